import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shockstab import models, profile, spectral


@pytest.fixture(scope="module")
def psys():
    m = models.p_system()
    return m, profile.solve_profile(m)


@pytest.fixture(scope="module")
def frozen():
    m = models.p_system()
    cp = profile.constant_profile(m, [1.5, 0.0], half_width=40, grid_points=801)
    sd = spectral.spectral_data(m, cp, audit=True)
    return m, cp, sd


@settings(max_examples=30, deadline=None)
@given(v=st.floats(0.3, 4.0), mu=st.floats(0.1, 3.0))
def test_p_system_effective_diffusion(v, mu):
    m = models.p_system(mu=mu)
    modes = spectral.endstate_modes(m, [v, 0.0])
    np.testing.assert_allclose(modes.beta, mu / (2 * v), atol=1e-10)
    assert modes.biorthogonality_residual < 1e-12


def test_quadratic_endstate_modes():
    m = models.quadratic_gradient()
    modes = spectral.endstate_modes(m, [-1.0, 0.0])
    np.testing.assert_allclose(modes.speeds, [-2.0, 2.0])
    assert np.all(modes.beta > 0)


def test_burgers_has_no_hyperbolic_block(burgers):
    m, prof = burgers
    sd = spectral.spectral_data(m, prof)
    assert sd.blocks.empty
    assert sd.eta_audit is None


def test_dynamical_normalization(psys):
    m, prof = psys
    sd = spectral.spectral_data(m, prof, audit=False)
    assert sd.blocks.normalization_residual() < 1e-6
    # biorthogonal blocks along the profile
    L, R = sd.blocks.L[0], sd.blocks.R[0]
    np.testing.assert_allclose(np.einsum("kim,kin->kmn", L, R), 1.0, atol=1e-10)


def test_hyperbolic_speed_matches_reduced_flux(psys):
    m, prof = psys
    sd = spectral.spectral_data(m, prof, audit=False)
    for k in (0, len(prof.x) // 2, -1):
        Ast, _ = spectral.frozen_hyperbolic_data(m, prof.values[k])
        assert abs(sd.blocks.speeds[k, 0] - Ast[0, 0]) < 1e-8


def test_eta_audit_reports_damping(frozen):
    _, _, sd = frozen
    for side in ("minus", "plus"):
        entry = sd.eta_audit[side][0]
        assert entry["resolved_rate"] > 0


def test_characteristics_constant_speed(frozen):
    m, cp, sd = frozen
    flow = spectral.CharacteristicFlow(sd)
    Ast, _ = spectral.frozen_hyperbolic_data(m, [1.5, 0.0])
    x = np.linspace(-5, 5, 11)
    y, zeta, abar, trunc = flow.trace(0, x, 2.0)
    np.testing.assert_allclose(y, x - 2.0 * Ast[0, 0], atol=1e-12)
    assert not trunc.any()
    assert np.all(np.abs(zeta) < 1)


def test_literal_sign_amplifies(frozen):
    _, _, sd = frozen
    res = spectral.CharacteristicFlow(sd).fit_decay(horizon=5)
    lit = spectral.CharacteristicFlow(sd, eta_sign="literal").fit_decay(horizon=5)
    assert res > 0 and lit < 0
    assert abs(res + lit) < 1e-8


def test_bad_eta_sign(frozen):
    with pytest.raises(ValueError):
        spectral.CharacteristicFlow(frozen[2], eta_sign="other")


def test_green_action_transport_oracle(frozen):
    m, cp, sd = frozen
    flow = spectral.CharacteristicFlow(sd)
    t = 3.0
    x = np.linspace(-10, 10, 41)

    def v0(y):
        return np.stack([np.exp(-y ** 2), 0 * y], -1)

    act = spectral.hyperbolic_green_action(flow, sd, v0, t)(x)
    Ast, _ = spectral.frozen_hyperbolic_data(m, [1.5, 0.0])
    a = Ast[0, 0]
    eta = sd.eta_audit["minus"][0]["resolved_rate"]
    R, L = sd.blocks.R_ext[0][0], sd.blocks.L_ext[0][0]
    expect = np.einsum("im,km->ki", R, np.exp(-eta * t) * np.einsum("im,ki->km", L, v0(x - a * t)))
    assert np.max(np.abs(act - expect)) < 1e-6


def test_summary_json(psys):
    m, prof = psys
    import json
    sd = spectral.spectral_data(m, prof)
    data = json.loads(spectral.spectral_to_json(sd))
    assert set(data) >= {"minus", "plus", "hyperbolic", "eta_sign_audit"}
