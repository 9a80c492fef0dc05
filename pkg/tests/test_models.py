import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shockstab import models
from shockstab.errors import DegenerateShockError, HypothesisError, StructuralError


@pytest.mark.parametrize("name", sorted(models.BUILTINS))
def test_builtin_jacobians_match_finite_differences(name):
    m = models.builtin(name)
    um, up = m.default_endstates
    for u in (um, up, 0.5 * (um + up)):
        assert models.jacobian_fd_check(m, u) < 1e-7


def test_unknown_builtin():
    with pytest.raises(StructuralError):
        models.builtin("nope")


def test_burgers_is_lax():
    m = models.burgers()
    es = models.classify_shock(m, [1.0], [-1.0])
    assert es.shock_class == "Lax"
    assert es.i == 2 and es.ell_expected == 1
    assert es.rh_residual == 0.0


def test_quadratic_gradient_is_undercompressive():
    m = models.quadratic_gradient()
    es = models.classify_shock(m, *m.default_endstates)
    assert es.shock_class == "undercompressive"
    assert es.i - es.n == 0
    np.testing.assert_allclose(es.speeds_minus, [-2.0, 2.0])
    np.testing.assert_allclose(es.speeds_plus, [-2.0, 2.0])


def test_p_system_default_is_lax_and_satisfies_jump_condition():
    m = models.p_system()
    es = models.classify_shock(m, *m.default_endstates)
    assert es.shock_class == "Lax"
    assert es.rh_residual < 1e-12


def test_equal_endstates_rejected():
    with pytest.raises(DegenerateShockError):
        models.classify_shock(models.burgers(), [1.0], [1.0])


def test_wrong_shape_rejected():
    with pytest.raises(StructuralError):
        models.classify_shock(models.burgers(), [1.0, 0.0], [-1.0, 0.0])


def test_zero_speed_endstate_is_a_hypothesis_failure():
    with pytest.raises(HypothesisError):
        models.classify_shock(models.burgers(), [0.0], [-1.0])


@pytest.mark.parametrize("name", ["burgers", "quadratic_gradient", "p_system"])
def test_builtin_hypotheses_hold(name):
    m = models.builtin(name)
    rep = models.check_hypotheses(m, models.classify_shock(m, *m.default_endstates))
    assert rep.ok, rep.summary_lines()
    assert rep.summary_lines()[-1] == "overall: pass"


def test_p_system_at_rest_fails_hypotheses():
    m = models.p_system(frame_speed=0.0)
    um, up = m.default_endstates
    up = up.copy()
    up[1] = -0.5
    rep = models.check_hypotheses(m, models.classify_shock(m, um, up))
    assert not rep.ok
    assert rep.passed("RH") is False


def test_reflection_swaps_speed_signs():
    m = models.burgers()
    r = models.reflect(m)
    u = np.array([0.7])
    np.testing.assert_allclose(r.flux_jacobian(u), -m.flux_jacobian(u))
    np.testing.assert_allclose(r.viscosity(u), m.viscosity(u))


@settings(max_examples=40, deadline=None)
@given(v=st.floats(0.2, 5.0), u=st.floats(-3, 3), mu=st.floats(0.1, 4.0))
def test_p_system_jacobian_property(v, u, mu):
    m = models.p_system(mu=mu)
    assert models.jacobian_fd_check(m, [v, u], h=1e-6) < 1e-5 * (1 + 1 / v ** 3)


@settings(max_examples=40, deadline=None)
@given(a=st.floats(0.1, 3.0))
def test_burgers_classification_by_sign(a):
    m = models.burgers()
    assert models.classify_shock(m, [a], [-a]).shock_class == "Lax"
    # expansive jump: both characteristics outgoing
    assert models.classify_shock(m, [-a], [a]).shock_class == "undercompressive"
