import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shockstab import kernels


def _pair(name):
    return kernels.IMPLEMENTATIONS[name]


@pytest.mark.parametrize("start,stop", [(0, 200), (200, 0), (0, 100)])
def test_linear_path_backends_agree(start, stop):
    rng = np.random.default_rng(0)
    N, d = 201, 4
    M0 = (rng.normal(size=(N, d, d)) * 0.3).astype(complex)
    M1 = np.broadcast_to(np.eye(d), (N, d, d)).astype(complex).copy()
    w0 = rng.normal(size=d) + 0j
    nb, npy = _pair("linear_path")
    a = nb(M0, M1, 0.3 + 0.2j, 0.1 + 0j, w0, start, stop, 0.01)
    b = npy(M0, M1, 0.3 + 0.2j, 0.1 + 0j, w0, start, stop, 0.01)
    w_a, w_b = a[0] * np.exp(a[1]), b[0] * np.exp(b[1])
    np.testing.assert_allclose(w_a, w_b, rtol=1e-12, atol=1e-12)


def test_linear_path_matches_matrix_exponential():
    # constant coefficients: w(x) = exp(x (M - shift)) w0
    from scipy.linalg import expm
    d, N, h = 3, 101, 0.01
    M = np.array([[0.1, 1.0, 0.0], [-1.0, 0.0, 0.3], [0.0, 0.2, -0.4]], complex)
    M0 = np.broadcast_to(M, (N, d, d)).copy()
    M1 = np.zeros_like(M0)
    w0 = np.array([1.0, 0.5, -0.2], complex)
    for nb_or_np in _pair("linear_path"):
        w, logn = nb_or_np(M0, M1, 0j, 0.2 + 0j, w0, 0, N - 1, h)
        expect = expm((N - 1) * h * (M - 0.2 * np.eye(d))) @ w0
        np.testing.assert_allclose(w * np.exp(logn), expect, rtol=1e-8)


def test_drury_backends_span_same_space():
    rng = np.random.default_rng(2)
    N, d = 201, 4
    M0 = (rng.normal(size=(N, d, d)) * 0.3).astype(complex)
    M1 = np.broadcast_to(np.eye(d), (N, d, d)).astype(complex).copy()
    Q0 = np.linalg.qr(rng.normal(size=(d, 2)))[0] + 0j
    nb, npy = _pair("drury_path")
    q1, a1 = nb(M0, M1, 0.3 + 0.2j, 0.1 + 0j, Q0, 0, N - 1, 0.01)
    q2, a2 = npy(M0, M1, 0.3 + 0.2j, 0.1 + 0j, Q0, 0, N - 1, 0.01)
    np.testing.assert_allclose(q1.conj().T @ q1, np.eye(2), atol=1e-12)
    assert abs(abs(np.linalg.det(q1.conj().T @ q2)) - 1) < 1e-10
    assert abs(a1 - a2) < 1e-10


@settings(max_examples=30, deadline=None)
@given(N=st.integers(1, 40), n=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_block_tridiag_solves_system(N, n, seed):
    rng = np.random.default_rng(seed)
    lo = rng.normal(size=(N, n, n))
    up = rng.normal(size=(N, n, n))
    dg = rng.normal(size=(N, n, n)) + 8 * np.eye(n)
    rhs = rng.normal(size=(N, n))
    A = np.zeros((N * n, N * n))
    for i in range(N):
        A[i * n:(i + 1) * n, i * n:(i + 1) * n] = dg[i]
        if i > 0:
            A[i * n:(i + 1) * n, (i - 1) * n:i * n] = lo[i]
        if i < N - 1:
            A[i * n:(i + 1) * n, (i + 1) * n:(i + 2) * n] = up[i]
    expect = np.linalg.solve(A, rhs.ravel()).reshape(N, n)
    for fn in _pair("block_tridiag"):
        np.testing.assert_allclose(fn(lo, dg, up, rhs), expect, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(K=st.integers(1, 30), C=st.integers(1, 6), n=st.integers(0, 30), seed=st.integers(0, 10_000))
def test_causal_conv_definition(K, C, n, seed):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(K + 1, C))
    data = rng.normal(size=(K, C))
    n = min(n, K)
    expect = sum(float(data[m] @ table[n - m]) for m in range(n))
    for fn in _pair("causal_conv"):
        assert abs(fn(table, data, n) - expect) < 1e-10


def test_env_flag_selects_numpy(tmp_path):
    import subprocess
    import sys
    code = "from shockstab import _accel; print(_accel.USE_NUMBA, _accel.backend_name())"
    out = subprocess.run([sys.executable, "-c", code], env={"SHOCKSTAB_NO_NUMBA": "1", "PATH": ""},
                         capture_output=True, text=True, check=True).stdout.split()
    assert out[0] == "False"
