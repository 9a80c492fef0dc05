import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from shockstab import evans


@pytest.fixture(scope="module")
def burgers_system(burgers):
    return evans.eigenvalue_system(*burgers)


@settings(max_examples=25, deadline=None)
@given(arrays(float, (4, 4), elements=st.floats(-2, 2)), st.integers(1, 3))
def test_compound_is_derivative_of_wedge(M, k):
    # d/dt wedge(exp(tM) W) at t=0 equals compound(M) wedge(W)
    rng = np.random.default_rng(1)
    W = rng.normal(size=(4, k))
    h = 1e-6
    from scipy.linalg import expm
    fd = (evans.wedge_columns(expm(h * M) @ W) - evans.wedge_columns(expm(-h * M) @ W)) / (2 * h)
    np.testing.assert_allclose(evans.compound_matrix(M, k) @ evans.wedge_columns(W), fd, atol=1e-6)


def test_wedge_pair_is_determinant():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 2))
    B = rng.normal(size=(4, 2))
    val = evans.wedge_pair(evans.wedge_columns(A), evans.wedge_columns(B), 4, 2)
    assert abs(val - np.linalg.det(np.hstack([A, B]))) < 1e-12


def test_evans_vanishes_at_origin(burgers_system):
    d0 = evans.evans(burgers_system, lam=0.0)
    d1 = evans.evans(burgers_system, lam=0.5)
    assert abs(d0) < 1e-6 * abs(d1)


def test_evans_real_on_real_axis_and_conjugate_symmetric(burgers_system):
    lam = 0.3 + 0.7j
    a = evans.evans(burgers_system, lam=lam)
    b = evans.evans(burgers_system, lam=np.conj(lam))
    assert abs(a - np.conj(b)) < 1e-8 * abs(a)
    r = evans.evans(burgers_system, lam=0.4)
    assert abs(r.imag) < 1e-8 * abs(r)


def test_drury_agrees_with_exterior_up_to_scale(burgers_system):
    lams = [0.2, 0.5 + 1j, 2.0 - 0.3j]
    ext = np.array([evans.evans(burgers_system, lam=l) for l in lams])
    dr = np.array([evans.evans(burgers_system, lam=l, method="drury") for l in lams])
    ratio = dr / ext
    # both normalized by analytic endstate bases: same function
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-5)


def test_unknown_method(burgers_system):
    with pytest.raises(ValueError):
        evans.evans(burgers_system, lam=1.0, method="magic")


def test_criterion_burgers_and_cauchy(burgers):
    data = evans.verify_criterion_D(*burgers, R=5, rho=1e-3, samples=64)
    assert data.verdict == "pass"
    assert data.diagnostics["conjugate_symmetry_error"] < 1e-8
    p = 1.0 + 0.5j
    exact = evans.evans(evans.eigenvalue_system(*burgers), lam=p)
    assert abs(evans.cauchy_check(data, p) - exact) < 1e-2 * abs(exact)


def test_csv_and_json_export(tmp_path, burgers):
    data = evans.verify_criterion_D(*burgers, R=5, rho=1e-3, samples=16)
    text = evans.evans_to_csv(data, tmp_path / "e.csv")
    assert text.splitlines()[0].startswith("lam_re") or "," in text.splitlines()[0]
    import json
    js = json.loads(evans.evans_to_json(data, tmp_path / "e.json"))
    assert js["verdict"] == data.verdict


def test_fd_oracle_burgers(burgers):
    res = evans.fd_oracle(*burgers, points=300)
    assert res["passed"]
    assert res["has_simple_zero"]
