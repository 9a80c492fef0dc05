"""Hot loops, each with a numba build and a plain numpy twin.

The public names at the bottom dispatch on :data:`shockstab._accel.USE_NUMBA`.
Both variants take and return the same array shapes, so tests can call the
``*_numba`` and ``*_numpy`` functions side by side.
"""

import numpy as np
from scipy.linalg import solve_banded

from ._accel import USE_NUMBA, jit


# ---------------------------------------------------------------------------
# linear ODE  w' = (M0[k] + lam*M1[k] - shift) w  on grid points, RK4 step 2h


@jit
def _linear_path_nb(M0, M1, lam, shift, w0, start, stop, h):
    d = w0.shape[0]
    w = w0.copy()
    direction = 1 if stop > start else -1
    step = 2.0 * h * direction
    lognorm = 0.0
    k = start
    k1 = np.empty(d, np.complex128)
    k2 = np.empty(d, np.complex128)
    k3 = np.empty(d, np.complex128)
    k4 = np.empty(d, np.complex128)
    tmp = np.empty(d, np.complex128)
    while k != stop:
        km = k + direction
        ke = k + 2 * direction
        for i in range(d):
            acc = -shift * w[i]
            for j in range(d):
                acc += (M0[k, i, j] + lam * M1[k, i, j]) * w[j]
            k1[i] = acc
        for i in range(d):
            tmp[i] = w[i] + 0.5 * step * k1[i]
        for i in range(d):
            acc = -shift * tmp[i]
            for j in range(d):
                acc += (M0[km, i, j] + lam * M1[km, i, j]) * tmp[j]
            k2[i] = acc
        for i in range(d):
            tmp[i] = w[i] + 0.5 * step * k2[i]
        for i in range(d):
            acc = -shift * tmp[i]
            for j in range(d):
                acc += (M0[km, i, j] + lam * M1[km, i, j]) * tmp[j]
            k3[i] = acc
        for i in range(d):
            tmp[i] = w[i] + step * k3[i]
        for i in range(d):
            acc = -shift * tmp[i]
            for j in range(d):
                acc += (M0[ke, i, j] + lam * M1[ke, i, j]) * tmp[j]
            k4[i] = acc
        nrm = 0.0
        for i in range(d):
            w[i] = w[i] + step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            nrm += w[i].real ** 2 + w[i].imag ** 2
        nrm = np.sqrt(nrm)
        if nrm == 0.0 or not np.isfinite(nrm):
            return w, -np.inf if nrm == 0.0 else np.nan
        for i in range(d):
            w[i] /= nrm
        lognorm += np.log(nrm)
        k = ke
    return w, lognorm


def _linear_path_np(M0, M1, lam, shift, w0, start, stop, h):
    w = np.array(w0, dtype=complex)
    direction = 1 if stop > start else -1
    step = 2.0 * h * direction
    lognorm = 0.0
    eye = np.eye(len(w))
    for k in range(start, stop, 2 * direction):
        Ma = M0[k] + lam * M1[k] - shift * eye
        Mm = M0[k + direction] + lam * M1[k + direction] - shift * eye
        Me = M0[k + 2 * direction] + lam * M1[k + 2 * direction] - shift * eye
        k1 = Ma @ w
        k2 = Mm @ (w + 0.5 * step * k1)
        k3 = Mm @ (w + 0.5 * step * k2)
        k4 = Me @ (w + step * k3)
        w = w + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        nrm = np.linalg.norm(w)
        if nrm == 0.0 or not np.isfinite(nrm):
            return w, -np.inf if nrm == 0.0 else np.nan
        w /= nrm
        lognorm += np.log(nrm)
    return w, lognorm


# ---------------------------------------------------------------------------
# continuous orthogonalization:  Q' = (I - QQ*) M Q,  a' = tr(Q* M Q) - shift


@jit
def _drury_rhs_nb(M, Q, shift):
    MQ = M @ Q
    G = np.conj(Q.T) @ MQ
    dQ = MQ - Q @ G
    tr = 0.0 + 0.0j
    for i in range(G.shape[0]):
        tr += G[i, i]
    return dQ, tr - shift


@jit
def _gram_schmidt_nb(Q):
    d, k = Q.shape
    logdet = 0.0
    for j in range(k):
        for i in range(j):
            c = 0.0 + 0.0j
            for m in range(d):
                c += np.conj(Q[m, i]) * Q[m, j]
            for m in range(d):
                Q[m, j] -= c * Q[m, i]
        nrm = 0.0
        for m in range(d):
            nrm += Q[m, j].real ** 2 + Q[m, j].imag ** 2
        nrm = np.sqrt(nrm)
        for m in range(d):
            Q[m, j] /= nrm
        logdet += np.log(nrm)
    return logdet


@jit
def _drury_path_nb(M0, M1, lam, shift, Q0, start, stop, h):
    Q = Q0.copy()
    direction = 1 if stop > start else -1
    step = 2.0 * h * direction
    alpha = 0.0 + 0.0j
    k = start
    while k != stop:
        Ma = M0[k] + lam * M1[k]
        Mm = M0[k + direction] + lam * M1[k + direction]
        Me = M0[k + 2 * direction] + lam * M1[k + 2 * direction]
        d1, t1 = _drury_rhs_nb(Ma, Q, shift)
        d2, t2 = _drury_rhs_nb(Mm, Q + 0.5 * step * d1, shift)
        d3, t3 = _drury_rhs_nb(Mm, Q + 0.5 * step * d2, shift)
        d4, t4 = _drury_rhs_nb(Me, Q + step * d3, shift)
        Q = Q + step / 6.0 * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
        alpha += step / 6.0 * (t1 + 2.0 * t2 + 2.0 * t3 + t4)
        alpha += _gram_schmidt_nb(Q)
        k += 2 * direction
    return Q, alpha


def _drury_rhs_np(M, Q, shift):
    MQ = M @ Q
    G = Q.conj().T @ MQ
    return MQ - Q @ G, np.trace(G) - shift


def _gram_schmidt_np(Q):
    Qn, R = np.linalg.qr(Q)
    dg = np.diag(R)
    ph = dg / np.abs(dg)
    return Qn * ph, float(np.sum(np.log(np.abs(dg))))


def _drury_path_np(M0, M1, lam, shift, Q0, start, stop, h):
    Q = np.array(Q0, dtype=complex)
    direction = 1 if stop > start else -1
    step = 2.0 * h * direction
    alpha = 0.0 + 0.0j
    for k in range(start, stop, 2 * direction):
        Ma = M0[k] + lam * M1[k]
        Mm = M0[k + direction] + lam * M1[k + direction]
        Me = M0[k + 2 * direction] + lam * M1[k + 2 * direction]
        d1, t1 = _drury_rhs_np(Ma, Q, shift)
        d2, t2 = _drury_rhs_np(Mm, Q + 0.5 * step * d1, shift)
        d3, t3 = _drury_rhs_np(Mm, Q + 0.5 * step * d2, shift)
        d4, t4 = _drury_rhs_np(Me, Q + step * d3, shift)
        Q = Q + step / 6.0 * (d1 + 2 * d2 + 2 * d3 + d4)
        alpha += step / 6.0 * (t1 + 2 * t2 + 2 * t3 + t4)
        Q, ld = _gram_schmidt_np(Q)
        alpha += ld
    return Q, alpha


# ---------------------------------------------------------------------------
# block tridiagonal solve: lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]


@jit
def _eliminate_nb(M, X, n, k):
    # in-place partial-pivot solve of M X = X, both preallocated
    for c in range(n):
        p = c
        best = abs(M[c, c])
        for r in range(c + 1, n):
            if abs(M[r, c]) > best:
                best = abs(M[r, c])
                p = r
        if p != c:
            for j in range(n):
                tmp = M[c, j]
                M[c, j] = M[p, j]
                M[p, j] = tmp
            for j in range(k):
                tmp = X[c, j]
                X[c, j] = X[p, j]
                X[p, j] = tmp
        piv = M[c, c]
        for r in range(c + 1, n):
            f = M[r, c] / piv
            if f != 0.0:
                for j in range(c, n):
                    M[r, j] -= f * M[c, j]
                for j in range(k):
                    X[r, j] -= f * X[c, j]
    for c in range(n - 1, -1, -1):
        for j in range(k):
            acc = X[c, j]
            for q in range(c + 1, n):
                acc -= M[c, q] * X[q, j]
            X[c, j] = acc / M[c, c]


@jit
def _block_tridiag_nb(lower, diag, upper, rhs):
    N, n, _ = diag.shape
    cp = np.zeros((N, n, n))
    dp = np.zeros((N, n))
    M = np.empty((n, n))
    X = np.empty((n, n + 1))
    for i in range(N):
        for a in range(n):
            for b in range(n):
                acc = diag[i, a, b]
                if i > 0:
                    for q in range(n):
                        acc -= lower[i, a, q] * cp[i - 1, q, b]
                M[a, b] = acc
            acc = rhs[i, a]
            if i > 0:
                for q in range(n):
                    acc -= lower[i, a, q] * dp[i - 1, q]
            X[a, n] = acc
            for b in range(n):
                X[a, b] = upper[i, a, b] if i < N - 1 else 0.0
        _eliminate_nb(M, X, n, n + 1)
        for a in range(n):
            for b in range(n):
                cp[i, a, b] = X[a, b]
            dp[i, a] = X[a, n]
    x = np.empty((N, n))
    for a in range(n):
        x[N - 1, a] = dp[N - 1, a]
    for i in range(N - 2, -1, -1):
        for a in range(n):
            acc = dp[i, a]
            for q in range(n):
                acc -= cp[i, a, q] * x[i + 1, q]
            x[i, a] = acc
    return x


def _block_tridiag_np(lower, diag, upper, rhs):
    N, n, _ = diag.shape
    size = N * n
    bw = 2 * n - 1
    ab = np.zeros((2 * bw + 1, size))
    for blk, off in ((lower, -1), (diag, 0), (upper, 1)):
        for p in range(n):
            for q in range(n):
                bi = np.arange(N)
                valid = (bi + off >= 0) & (bi + off < N)
                gi = bi[valid] * n + p
                gj = (bi[valid] + off) * n + q
                ab[bw + gi - gj, gj] = blk[valid, p, q]
    return solve_banded((bw, bw), ab, rhs.reshape(size)).reshape(N, n)


# ---------------------------------------------------------------------------
# causal time convolution  sum_{m<n} sum_i data[m, i] * table[n - m, i]


@jit
def _causal_conv_nb(table, data, n):
    acc = 0.0
    ny = data.shape[1]
    for m in range(n):
        row = n - m
        for i in range(ny):
            acc += data[m, i] * table[row, i]
    return acc


def _causal_conv_np(table, data, n):
    if n <= 0:
        return 0.0
    return float(np.vdot(data[:n][::-1].ravel(), table[1:n + 1].ravel()))


# ---------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    linear_path = _linear_path_nb
    drury_path = _drury_path_nb
    block_tridiag = _block_tridiag_nb
    causal_conv = _causal_conv_nb
else:
    linear_path = _linear_path_np
    drury_path = _drury_path_np
    block_tridiag = _block_tridiag_np
    causal_conv = _causal_conv_np

IMPLEMENTATIONS = {
    "linear_path": (_linear_path_nb, _linear_path_np),
    "drury_path": (_drury_path_nb, _drury_path_np),
    "block_tridiag": (_block_tridiag_nb, _block_tridiag_np),
    "causal_conv": (_causal_conv_nb, _causal_conv_np),
}
