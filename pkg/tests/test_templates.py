import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from shockstab import templates as T


def test_errfn_limits_and_antiderivative():
    assert T.errfn(-40.0) == 0.0 and T.errfn(40.0) == 1.0
    assert abs(T.errfn(0.0) - 0.5) < 1e-15
    for z in (-3.0, -0.2, 0.7, 2.5):
        h = 1e-5
        fd = (T.errfn_antiderivative(z + h) - T.errfn_antiderivative(z - h)) / (2 * h)
        assert abs(fd - T.errfn(z)) < 1e-9
    assert T.errfn_antiderivative(-30.0) < 1e-300


def test_burgers_e_infinity_is_half(burgers):
    einf = T.e_infinity(*burgers)
    assert einf.ell == 1
    assert einf.normalization_residual < 1e-6
    assert np.max(np.abs(einf.rows[0, :, 0] - 0.5)) < 1e-6


def test_quadratic_e_infinity_normalized(quadratic):
    m, prof = quadratic
    einf = T.e_infinity(m, prof)
    assert einf.normalization_residual < 1e-6
    # int e . (-u') dy = 1
    val = np.trapezoid(np.einsum("kn,kn->k", einf.rows[0], -prof.derivative), prof.x)
    assert abs(val - 1) < 1e-5


def test_bundle_defaults(burgers_bundle):
    b = burgers_bundle
    assert b.n == 1 and b.ell == 1
    assert len(b.outgoing_minus) == 0 and len(b.outgoing_plus) == 0
    assert b.notes["a_default_heuristic"]
    np.testing.assert_allclose(b.l_minus[0, 0], [0.5])
    np.testing.assert_allclose(b.l_plus[0, 0], [0.5])


def test_bundle_rejects_unknown_constant(burgers):
    with pytest.raises(ValueError):
        T.template_bundle(*burgers, Z=1.0)
    with pytest.raises(Exception):
        T.template_bundle(*burgers, L=-1.0)


def test_kernel_tends_to_limit(burgers_bundle, quadratic_bundle):
    for b in (burgers_bundle, quadratic_bundle):
        y = np.linspace(-10, 10, 21)
        late = T.e_kernel(b, y, 1e6)
        np.testing.assert_allclose(late, T.e_limit(b, y), atol=1e-10)
        early = T.e_kernel(b, np.array([-50.0, 50.0]), 1.0)
        assert np.max(np.abs(early)) < 1e-12


@pytest.mark.parametrize("kind,dy,dt", [("y", 1, 0), ("t", 0, 1), ("yt", 1, 1)])
def test_kernel_derivatives(quadratic_bundle, kind, dy, dt):
    b = quadratic_bundle
    y = np.array([-7.0, -2.5, -0.4, 0.3, 1.9, 6.0])
    t = 3.0
    h = 1e-4

    def f(yy, tt):
        return T.e_kernel(b, yy, tt)

    if kind == "y":
        fd = (f(y + h, t) - f(y - h, t)) / (2 * h)
    elif kind == "t":
        fd = (f(y, t + h) - f(y, t - h)) / (2 * h)
    else:
        fd = (f(y + h, t + h) - f(y + h, t - h) - f(y - h, t + h) + f(y - h, t - h)) / (4 * h * h)
    np.testing.assert_allclose(T.e_kernel(b, y, t, kind), fd, atol=1e-6)


def test_cell_integrals_match_quadrature(quadratic_bundle):
    b = quadratic_bundle
    t = 2.0
    y0 = np.array([-6.0, -1.0, 0.0, 2.5])
    y1 = np.array([-4.0, 0.0, 0.7, 9.0])
    got = T.e_cell_integral(b, y0, y1, t)
    for i in range(len(y0)):
        for c in range(b.n):
            val = quad(lambda y: T.e_kernel(b, np.array([y]), t)[0, 0, c], y0[i], y1[i],
                       epsabs=1e-13, epsrel=1e-12)[0]
            assert abs(got[i, 0, c] - val) < 1e-10
    with pytest.raises(ValueError):
        T.e_cell_integral(b, np.array([-1.0]), np.array([1.0]), t)


def test_kernel_needs_positive_time(burgers_bundle):
    with pytest.raises(ValueError):
        T.e_kernel(burgers_bundle, np.zeros(3), 0.0)


@settings(max_examples=40, deadline=None)
@given(x=st.floats(-300, 300), t=st.floats(0.01, 500))
def test_templates_nonnegative_and_bounded(quadratic_bundle, x, t):
    b = quadratic_bundle
    for f in (T.theta, T.psi1, T.psi2):
        v = float(f(b, x, t))
        assert 0.0 <= v <= 2.0
    # psi1 lives inside the fan, psi2 outside
    inside = float(T.chi(b, x, t))
    assert float(T.psi1(b, x, t)) == 0.0 or inside == 1.0
    assert float(T.psi2(b, x, t)) == 0.0 or inside == 0.0


def test_theta_peaks_on_characteristics(quadratic_bundle):
    b = quadratic_bundle
    t = 50.0
    x = np.linspace(-200, 200, 4001)
    th = T.theta(b, x, t)
    peaks = x[np.argsort(th)[-2:]]
    np.testing.assert_allclose(sorted(peaks), [-100.0, 100.0], atol=0.2)
    assert abs(th.max() - (1 + t) ** -0.5) < 1e-6


def test_kernel_bound_constants_finite(burgers_bundle, quadratic_bundle):
    for b in (burgers_bundle, quadratic_bundle):
        c = T.kernel_bound_constants(b, np.linspace(-30, 30, 61), np.geomspace(0.5, 200, 30))
        assert all(math.isfinite(v) for v in c.values())


def test_gtilde_envelope_positive(quadratic_bundle):
    x = np.linspace(-20, 20, 9)
    for order in (0, (1, 0), (0, 1), (1, 1)):
        g = T.gtilde_envelope(quadratic_bundle, x, 5.0, 1.5, order)
        assert np.all(g > 0) and np.all(np.isfinite(g))


def test_lemma_report_small(burgers_bundle, tmp_path):
    samples = T.lemma_samples(burgers_bundle, 6)
    assert len(samples) == 6
    rep = T.verify_convolution_lemmas(burgers_bundle, samples, lines=["e_weight", "e_t_weight"])
    for name in ("e_weight", "e_t_weight"):
        assert math.isfinite(rep.constant(name)) and rep.constant(name) > 0
    import json
    data = json.loads(T.lemma_report_to_json(rep, tmp_path / "l.json"))
    assert set(data["lines"]) == {"e_weight", "e_t_weight"}


def test_weight_line_uses_unit_mass(burgers_bundle):
    # e is bounded by 1/2 + 1/2 and the weight integrates to a finite constant
    lhs = T.convolution_lhs(burgers_bundle, "e_weight", 0.0, 10.0)
    assert 0 < lhs < 10


def test_shift_sensitivity_burgers(burgers):
    # the splitting coefficients of a translate do not change
    assert T.shift_sensitivity(*burgers) < 1e-3


def test_templates_csv(burgers_bundle):
    text = T.templates_to_csv(burgers_bundle, [-1.0, 0.0, 1.0], [1.0, 2.0])
    lines = text.strip().splitlines()
    assert lines[0].startswith("t,x,chi")
    assert len(lines) == 7
