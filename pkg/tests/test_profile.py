import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shockstab import models, profile
from shockstab.errors import NoProfileError


def test_burgers_profile_is_tanh(burgers):
    _, prof = burgers
    x = np.linspace(-20, 20, 801)
    assert np.max(np.abs(prof(x)[:, 0] + np.tanh(x / 2))) < 1e-8
    assert np.max(np.abs(prof(x, nu=1)[:, 0] + 0.5 / np.cosh(x / 2) ** 2)) < 1e-7


def test_profile_is_centered(burgers, quadratic):
    for _, prof in (burgers, quadratic):
        assert abs(prof(np.array([0.0]))[0, 0]) < 1e-8


def test_decay_rate_burgers(burgers):
    _, prof = burgers
    alpha, C = profile.decay_rate(prof)
    assert abs(alpha - 1.0) < 1e-2
    assert abs(profile.estimate_decay_rate(burgers[0], prof.endstates) - 1.0) < 1e-10


def test_ode_residual_small(burgers, quadratic):
    for m, prof in (burgers, quadratic):
        assert profile.ode_residual(prof, m, finite_difference=False) < 1e-8


def test_shift_moves_center(burgers):
    _, prof = burgers
    sh = profile.shifted(prof, 1.5)
    np.testing.assert_allclose(sh.values[:, 0], -np.tanh((sh.x - 1.5) / 2), atol=1e-8)


def test_extrapolation_beyond_grid(burgers):
    _, prof = burgers
    x = np.array([-60.0, 60.0])
    np.testing.assert_allclose(prof(x)[:, 0], [1.0, -1.0], atol=1e-12)


def test_family_derivative_is_minus_slope(burgers):
    _, prof = burgers
    x = np.linspace(-5, 5, 11)
    h = 1e-5
    fd = (prof.family(h, x) - prof.family(-h, x)) / (2 * h)
    np.testing.assert_allclose(prof.family_derivative(0.0, x), fd, atol=1e-8)


def test_rankine_hugoniot_violation(burgers):
    m, _ = burgers
    es = models.classify_shock(m, [1.0], [-0.5])
    with pytest.raises(NoProfileError):
        profile.solve_profile(m, es)


def test_csv_roundtrip(tmp_path, quadratic):
    m, prof = quadratic
    path = tmp_path / "p.csv"
    profile.profile_to_csv(prof, path)
    back = profile.profile_from_csv(path, m)
    np.testing.assert_array_equal(back.values, prof.values)
    np.testing.assert_array_equal(back.x, prof.x)


def test_p_system_profile_connects_endstates():
    m = models.p_system()
    prof = profile.solve_profile(m)
    um, up = m.default_endstates
    np.testing.assert_allclose(prof.values[0], um, atol=1e-6)
    np.testing.assert_allclose(prof.values[-1], up, atol=1e-6)
    assert profile.ode_residual(prof, m, finite_difference=False) < 1e-7


@settings(max_examples=8, deadline=None)
@given(a=st.floats(0.5, 2.0))
def test_burgers_amplitude_family(a):
    m = models.burgers()
    es = models.classify_shock(m, [a], [-a])
    prof = profile.solve_profile(m, es, domain_half_width=30 / a)
    x = np.linspace(-10 / a, 10 / a, 201)
    assert np.max(np.abs(prof(x)[:, 0] + a * np.tanh(a * x / 2))) < 1e-6
