"""Evans function and argument-principle verification of spectral stability.

The eigenvalue problem ``lam v + (A v)' = (B v')'`` is written as a first
order system ``W' = (M0(x) + lam M1(x)) W`` in the unknowns
``(v1, v2, w)`` with the flux variable ``w = B21 v1' + B22 v2' - A21 v1 - A22 v2``,
so only the viscous components are differentiated.  Two evaluation methods
are available: exterior powers (``'exterior'``) and continuous
orthogonalization (``'drury'``).
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .errors import EssentialSpectrumError, HypothesisError, InconclusiveError, NumericalError, SplittingError
from .models import ModelSystem
from .profile import ShockProfile, resample
from .spectral import endstate_modes, linearized_coefficients

SLOW_RADIUS = 0.05
EVANS_STEP = 0.01


# ---------------------------------------------------------------------------
# first-order system


@dataclass
class EigenSystem:
    """Coefficients ``M0 + lam M1`` on a grid with ``x = 0`` at index ``mid``."""

    x: np.ndarray
    M0: np.ndarray
    M1: np.ndarray
    M0_minus: np.ndarray
    M1_minus: np.ndarray
    M0_plus: np.ndarray
    M1_plus: np.ndarray
    speeds_minus: np.ndarray
    speeds_plus: np.ndarray
    k_minus: int = 0
    k_plus: int = 0
    _compound: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self):
        return self.M0.shape[1]

    @property
    def h(self):
        return float(self.x[1] - self.x[0])

    @property
    def mid(self):
        return (len(self.x) - 1) // 2

    def matrix(self, lam, where=None):
        if where == "minus":
            return self.M0_minus + lam * self.M1_minus
        if where == "plus":
            return self.M0_plus + lam * self.M1_plus
        return self.M0 + lam * self.M1


def _first_order_blocks(model: ModelSystem, A, dA, B):
    """Stack the (M0, M1) pair for arrays of A, A', B (leading axis = points)."""
    n, r = model.n, model.r
    m = n - r
    P = A.shape[0]
    d = n + r
    M0 = np.zeros((P, d, d))
    M1 = np.zeros((P, d, d))
    B21, B22 = B[:, m:, :m], B[:, m:, m:]
    B22i = np.linalg.inv(B22)
    A21, A22 = A[:, m:, :m], A[:, m:, m:]
    K = B22i @ B21
    # rows of v2' before the -K v1' correction: B22^{-1} [A21, A22, I]
    base2 = np.concatenate([B22i @ A21, B22i @ A22, B22i], axis=2)
    if m:
        A11, A12 = A[:, :m, :m], A[:, :m, m:]
        dA11, dA12 = dA[:, :m, :m], dA[:, :m, m:]
        C = A12 @ B22i
        Astar = A11 - A12 @ K
        Ai = np.linalg.inv(Astar)
        row1 = np.concatenate([Ai @ (-dA11 - C @ A21), Ai @ (-dA12 - C @ A22), -Ai @ C], axis=2)
        row1_l = np.concatenate([-Ai, np.zeros((P, m, 2 * r))], axis=2)
        M0[:, :m] = row1
        M1[:, :m] = row1_l
        M0[:, m:n] = base2 - K @ row1
        M1[:, m:n] = -K @ row1_l
    else:
        M0[:, :n] = base2
    M1[:, n:, m:n] = np.eye(r)
    return M0, M1


def eigenvalue_system(model: ModelSystem, profile: ShockProfile, lam=None, grid_points=None,
                      half_width=None) -> EigenSystem:
    """First-order coefficients on a grid with an odd number ``4k + 1`` of points.

    With ``lam`` given, the essential-spectrum guard is applied and the
    returned object is still the lam-independent pair (M0, M1).
    """
    X = profile.half_width if half_width is None else float(half_width)
    if grid_points is None:
        grid_points = 4 * int(np.ceil(2 * X / EVANS_STEP / 4)) + 1
    N = int(grid_points)
    if N % 4 != 1:
        N = 4 * (N // 4) + 1
    prof = resample(profile, N, X)
    lin = linearized_coefficients(model, prof)
    dA = np.gradient(lin.A, prof.x, axis=0, edge_order=2)
    M0, M1 = _first_order_blocks(model, lin.A, dA, lin.B)
    um, up = profile.endstates.u_minus, profile.endstates.u_plus
    zero = np.zeros((1, model.n, model.n))
    M0m, M1m = _first_order_blocks(model, model.flux_jacobian(um)[None], zero, model.viscosity(um)[None])
    M0p, M1p = _first_order_blocks(model, model.flux_jacobian(up)[None], zero, model.viscosity(up)[None])
    sys = EigenSystem(
        x=prof.x, M0=M0, M1=M1, M0_minus=M0m[0], M1_minus=M1m[0], M0_plus=M0p[0], M1_plus=M1p[0],
        speeds_minus=np.sort(np.linalg.eigvals(model.flux_jacobian(um)).real),
        speeds_plus=np.sort(np.linalg.eigvals(model.flux_jacobian(up)).real),
    )
    sys.k_minus, sys.k_plus = _splitting_dims(sys)
    if lam is not None:
        asymptotic_subspaces(sys, lam)
    return sys


def _splitting_dims(sys: EigenSystem, lam0=1.0):
    mu_m = np.linalg.eigvals(sys.matrix(lam0, "minus"))
    mu_p = np.linalg.eigvals(sys.matrix(lam0, "plus"))
    km = int(np.sum(mu_m.real > 0))
    kp = int(np.sum(mu_p.real < 0))
    if km + kp != sys.dim:
        raise SplittingError(
            f"unstable({km}) at -inf and stable({kp}) at +inf dimensions do not add up to {sys.dim}"
        )
    return km, kp


# ---------------------------------------------------------------------------
# asymptotic subspaces


def _group_mask(mu, lam, speeds, unstable, k_expected):
    """Which spatial eigenvalues belong to the unstable (or stable) group at this lam."""
    lam = complex(lam)
    scale = max(1.0, float(np.max(np.abs(mu))))
    if abs(lam) > SLOW_RADIUS:
        if lam.real < 0:
            raise EssentialSpectrumError(f"lam = {lam} has negative real part outside the small disc")
        tiny = np.abs(mu.real) < 1e-10 * scale
        if np.any(tiny):
            raise EssentialSpectrumError(f"spatial eigenvalue {mu[tiny][0]} on the imaginary axis at lam = {lam}")
        mask = mu.real > 0 if unstable else mu.real < 0
    else:
        # near the origin: slow eigenvalues follow mu ~ -lam / a_k by continuity from lam > 0
        mask = mu.real > 0 if unstable else mu.real < 0
        slow = np.argsort(np.abs(mu))[: len(speeds)]
        guess = np.array([-lam / a for a in speeds])
        cost = np.abs(mu[slow][:, None] - guess[None, :])
        rows, cols = linear_sum_assignment(cost)
        for i, k in zip(rows, cols):
            pos = speeds[k] < 0
            mask[slow[i]] = pos if unstable else not pos
    if int(np.sum(mask)) != k_expected:
        raise EssentialSpectrumError(
            f"consistent splitting fails at lam = {lam}: {int(np.sum(mask))} modes in group, expected {k_expected}"
        )
    return mask


def _reference_basis(sys, where, unstable, k):
    M = sys.matrix(1.0, where).astype(complex)
    mu, V = np.linalg.eig(M)
    mask = mu.real > 0 if unstable else mu.real < 0
    cols = []
    for i in np.where(mask)[0]:
        cols.append(V[:, i].real)
        if abs(mu[i].imag) > 0:
            cols.append(V[:, i].imag)
    Q, _ = np.linalg.qr(np.array(cols).T)
    # keep a real basis of the invariant subspace of dimension k
    U, s, _ = np.linalg.svd(Q, full_matrices=False)
    return U[:, :k]


def asymptotic_subspaces(sys: EigenSystem, lam):
    """Analytic bases ``P(lam) V0`` of the unstable space at -inf and stable space at +inf.

    Returns ``(Bminus, mu_sum_minus, Bplus, mu_sum_plus)``; the sums are the
    traces of the system matrix on each subspace, used as growth rates.
    """
    lam = complex(lam)
    if abs(lam) < 1e-12:
        # the slow eigenvalues coalesce at 0; take the limit from lam > 0
        lam = complex(1e-12)
    out = []
    for where, unstable, k, speeds in (("minus", True, sys.k_minus, sys.speeds_minus),
                                       ("plus", False, sys.k_plus, sys.speeds_plus)):
        M = sys.matrix(lam, where).astype(complex)
        mu, V = np.linalg.eig(M)
        mask = _group_mask(mu, lam, speeds, unstable, k)
        P = V[:, mask] @ np.linalg.inv(V)[mask, :]
        key = ("V0", where)
        if key not in sys._compound:
            sys._compound[key] = _reference_basis(sys, where, unstable, k)
        V0 = sys._compound[key]
        Bas = P @ V0
        if np.linalg.matrix_rank(Bas, tol=1e-10) < k:
            raise SplittingError(f"projected reference basis degenerates at lam = {lam} ({where})")
        out.extend([Bas, complex(np.trace(P @ M))])
    return tuple(out)


# ---------------------------------------------------------------------------
# exterior algebra


def _compound_index(d, k):
    combos = list(itertools.combinations(range(d), k))
    pos = {c: i for i, c in enumerate(combos)}
    entries = []
    for J, cJ in enumerate(combos):
        for p, jp in enumerate(cJ):
            for i in range(d):
                if i != jp and i in cJ:
                    continue
                new = list(cJ)
                new[p] = i
                order = np.argsort(new)
                sign = _perm_sign(order)
                entries.append((pos[tuple(sorted(new))], J, i, jp, sign))
    return combos, np.array(entries, dtype=int)


def _perm_sign(order):
    order = list(order)
    sign = 1
    seen = [False] * len(order)
    for i in range(len(order)):
        if seen[i]:
            continue
        j, cyc = i, 0
        while not seen[j]:
            seen[j] = True
            j = order[j]
            cyc += 1
        if cyc % 2 == 0:
            sign = -sign
    return sign


def compound_matrix(M, k):
    """Additive compound of ``M`` (leading axes broadcast) on the k-th exterior power."""
    d = M.shape[-1]
    combos, ent = _compound_index(d, k)
    C = np.zeros(M.shape[:-2] + (len(combos), len(combos)), dtype=M.dtype)
    for I, J, i, jp, s in ent:
        C[..., I, J] += s * M[..., i, jp]
    return C


def wedge_columns(W):
    """Plucker coordinates of the column span of ``W`` (d x k)."""
    d, k = W.shape
    combos = list(itertools.combinations(range(d), k))
    return np.array([np.linalg.det(W[list(c), :]) for c in combos])


def wedge_pair(a, b, d, ka):
    """Scalar ``a ^ b`` for a in Lambda^ka, b in Lambda^(d-ka) of C^d."""
    ca = list(itertools.combinations(range(d), ka))
    cb = {c: i for i, c in enumerate(itertools.combinations(range(d), d - ka))}
    total = 0.0 + 0.0j
    for i, c in enumerate(ca):
        comp = tuple(j for j in range(d) if j not in c)
        sign = _perm_sign(np.argsort(list(c) + list(comp)))
        total += sign * a[i] * b[cb[comp]]
    return total


def _compounds(sys: EigenSystem, k):
    key = ("C", k)
    if key not in sys._compound:
        sys._compound[key] = (
            np.ascontiguousarray(compound_matrix(sys.M0, k).astype(complex)),
            np.ascontiguousarray(compound_matrix(sys.M1, k).astype(complex)),
        )
    return sys._compound[key]


# ---------------------------------------------------------------------------
# Evans function


def evans(model_or_sys, profile=None, lam=0.0, method="exterior", sys=None):
    """Evans function ``D(lam) = det[W-(0), W+(0)]`` with analytic endstate bases."""
    if isinstance(model_or_sys, EigenSystem):
        sys = model_or_sys
    elif sys is None:
        sys = eigenvalue_system(model_or_sys, profile)
    lam = complex(lam)
    Bm, mum, Bp, mup = asymptotic_subspaces(sys, lam)
    N = len(sys.x)
    mid = sys.mid
    h = sys.h
    d = sys.dim
    if method == "exterior":
        Cm0, Cm1 = _compounds(sys, sys.k_minus)
        Cp0, Cp1 = _compounds(sys, sys.k_plus)
        wm, lm = kernels.linear_path(Cm0, Cm1, lam, mum, wedge_columns(Bm).astype(complex), 0, mid, h)
        wp, lp = kernels.linear_path(Cp0, Cp1, lam, mup, wedge_columns(Bp).astype(complex), N - 1, mid, h)
        if not (np.isfinite(lm) and np.isfinite(lp)):
            raise NumericalError("exterior-power integration lost the solution", where=f"lam={lam}")
        return complex(np.exp(lm + lp) * wedge_pair(wm, wp, d, sys.k_minus))
    if method == "drury":
        M0 = np.ascontiguousarray(sys.M0.astype(complex))
        M1 = np.ascontiguousarray(sys.M1.astype(complex))
        Qm0, Rm0 = np.linalg.qr(Bm)
        Qp0, Rp0 = np.linalg.qr(Bp)
        Qm, am = kernels.drury_path(M0, M1, lam, mum, np.ascontiguousarray(Qm0), 0, mid, h)
        Qp, ap = kernels.drury_path(M0, M1, lam, mup, np.ascontiguousarray(Qp0), N - 1, mid, h)
        det0 = np.linalg.det(Rm0) * np.linalg.det(Rp0)
        return complex(np.linalg.det(np.concatenate([Qm, Qp], axis=1)) * np.exp(am + ap) * det0)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# contour and winding


@dataclass
class EvansData:
    lam: np.ndarray
    D: np.ndarray
    segment: np.ndarray
    winding_number: float
    origin_multiplicity: float
    ell: int
    R: float
    rho: float
    verdict: str
    origin_lam: np.ndarray = None
    origin_D: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.verdict == "pass"

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "winding_number": self.winding_number,
            "origin_multiplicity": self.origin_multiplicity,
            "ell": self.ell,
            "R": self.R,
            "rho": self.rho,
            "samples": int(len(self.lam)),
            "diagnostics": self.diagnostics,
        }


def _unwrap_increments(D):
    ph = np.angle(D)
    return np.angle(np.exp(1j * np.diff(ph)))


def _refine(f, params, values, path, max_depth=12, max_jump=np.pi / 2):
    """Bisect parameter intervals whose phase increment exceeds ``max_jump``."""
    params = list(params)
    values = list(values)
    depth = 0
    while depth < max_depth:
        inc = _unwrap_increments(np.array(values))
        bad = np.where(np.abs(inc) > max_jump)[0]
        if len(bad) == 0:
            return np.array(params), np.array(values), True
        for i in bad[::-1]:
            tm = 0.5 * (params[i] + params[i + 1])
            params.insert(i + 1, tm)
            values.insert(i + 1, f(path(tm)))
        depth += 1
    inc = _unwrap_increments(np.array(values))
    return np.array(params), np.array(values), bool(np.all(np.abs(inc) <= max_jump))


def contour_pieces(R, rho, samples=64):
    """Counterclockwise boundary of {Re lam >= 0, rho <= |lam| <= R} as parametrized pieces."""
    lr, lR = np.log(rho), np.log(R)
    return [
        ("arc", lambda s: R * np.exp(1j * s), np.linspace(-np.pi / 2, np.pi / 2, samples)),
        ("axis_upper", lambda s: 1j * np.exp(s), np.linspace(lR, lr, samples)),
        ("indent", lambda s: rho * np.exp(1j * s), np.linspace(np.pi / 2, -np.pi / 2, max(9, samples // 4))),
        ("axis_lower", lambda s: -1j * np.exp(s), np.linspace(lr, lR, samples)),
    ]


def verify_criterion_D(model: ModelSystem, profile: ShockProfile, R=None, rho=1e-3, samples=64,
                       method="exterior", sys=None, max_depth=12, raise_inconclusive=False) -> EvansData:
    t0 = time.perf_counter()
    sys = sys or eigenvalue_system(model, profile)
    if R is None:
        mm = endstate_modes(model, profile.endstates.u_minus)
        mp = endstate_modes(model, profile.endstates.u_plus)
        amax = max(np.max(np.abs(mm.speeds)), np.max(np.abs(mp.speeds)))
        bmin = min(np.min(mm.beta), np.min(mp.beta))
        R = max(5.0, 4.0 * amax ** 2 / max(bmin, 1e-12))

    def f(lam):
        return evans(sys, lam=lam, method=method)

    lams, Ds, segs = [], [], []
    ok = True
    for name, path, params in contour_pieces(R, rho, samples):
        vals = [f(path(s)) for s in params]
        ps, vs, good = _refine(f, params, vals, path, max_depth)
        ok &= good
        start = 0 if not lams else 1  # pieces share endpoints
        lams.extend(path(ps)[start:])
        Ds.extend(vs[start:])
        segs.extend([name] * (len(ps) - start))
    lams = np.array(lams)
    Ds = np.array(Ds)
    total = float(np.sum(_unwrap_increments(np.append(Ds, Ds[0]))))
    winding = total / (2 * np.pi)

    # multiplicity at the origin: winding along |lam| = rho
    circ = lambda s: rho * np.exp(1j * s)
    ps = np.linspace(0, 2 * np.pi, 33)
    ps, ov, good2 = _refine(f, ps, [f(circ(s)) for s in ps], circ, max_depth)
    ok &= good2
    mult = float(np.sum(_unwrap_increments(ov))) / (2 * np.pi)

    ell = profile.ell
    integral = abs(winding - round(winding)) < 0.05 and abs(mult - round(mult)) < 0.05
    if not ok or not integral:
        verdict = "inconclusive"
    elif round(winding) == 0 and round(mult) == ell:
        verdict = "pass"
    else:
        verdict = "fail"
    conj = _conjugate_symmetry(lams, Ds)
    data = EvansData(
        lam=lams, D=Ds, segment=np.array(segs), winding_number=winding, origin_multiplicity=mult,
        ell=ell, R=float(R), rho=float(rho), verdict=verdict, origin_lam=circ(ps), origin_D=ov,
        diagnostics={
            "method": method, "conjugate_symmetry_error": conj, "refinement_ok": bool(ok),
            "grid_points": int(len(sys.x)), "half_width": float(sys.x[-1]),
            "k_minus": sys.k_minus, "k_plus": sys.k_plus,
            "seconds": time.perf_counter() - t0,
        },
    )
    if verdict == "inconclusive" and raise_inconclusive:
        raise InconclusiveError(f"phase accumulation not resolved: winding {winding:.3f}, origin {mult:.3f}")
    return data


def _conjugate_symmetry(lams, Ds):
    """max |D(conj lam) - conj D(lam)| / max|D| over sample pairs found on the contour."""
    worst = 0.0
    scale = np.max(np.abs(Ds))
    key = {(round(l.real, 12), round(l.imag, 12)): d for l, d in zip(lams, Ds)}
    for l, d in zip(lams, Ds):
        other = key.get((round(l.real, 12), round(-l.imag, 12)))
        if other is not None:
            worst = max(worst, abs(other - np.conj(d)))
    return float(worst / scale) if scale > 0 else 0.0


def cauchy_check(data: EvansData, point):
    """Cauchy-integral reconstruction of D at an interior point from the contour samples."""
    lam = np.append(data.lam, data.lam[0])
    D = np.append(data.D, data.D[0])
    dl = np.diff(lam)
    mid_D = 0.5 * (D[1:] + D[:-1])
    mid_l = 0.5 * (lam[1:] + lam[:-1])
    return complex(np.sum(mid_D / (mid_l - point) * dl) / (2j * np.pi))


def cauchy_reconstruct(sys: EigenSystem, point, R, rho, nodes=256, method="exterior"):
    """High-order Cauchy integral over the boundary (Gauss-Legendre per piece)."""
    xg, wg = np.polynomial.legendre.leggauss(nodes)
    total = 0.0 + 0.0j
    pieces = [
        (lambda s: R * np.exp(1j * s), lambda s: 1j * R * np.exp(1j * s), -np.pi / 2, np.pi / 2),
        (lambda s: 1j * s, lambda s: 1j + 0 * s, R, rho),
        (lambda s: rho * np.exp(1j * s), lambda s: 1j * rho * np.exp(1j * s), np.pi / 2, -np.pi / 2),
        (lambda s: 1j * s, lambda s: 1j + 0 * s, -rho, -R),
    ]
    for path, dpath, a, b in pieces:
        s = 0.5 * (b - a) * xg + 0.5 * (a + b)
        w = 0.5 * (b - a) * wg
        for si, wi in zip(s, w):
            lam = path(si)
            total += wi * evans(sys, lam=lam, method=method) / (lam - point) * dpath(si)
    return complex(total / (2j * np.pi))


# ---------------------------------------------------------------------------
# finite-difference oracle


def fd_spectrum(model: ModelSystem, profile: ShockProfile, points=400, half_width=None):
    """Eigenvalues of a centered finite-difference discretization of L with Dirichlet ends."""
    X = profile.half_width if half_width is None else float(half_width)
    x = np.linspace(-X, X, points + 2)
    h = x[1] - x[0]
    xm = 0.5 * (x[1:] + x[:-1])
    u = profile(x)
    um = profile(xm)
    A = model.A(u, profile(x, nu=1))
    Bm = model.viscosity(um)
    n = model.n
    N = points
    Lmat = np.zeros((N * n, N * n))
    for i in range(1, N + 1):
        row = slice((i - 1) * n, i * n)
        # -(A v)' central
        for j, c in ((i - 1, 1.0 / (2 * h)), (i + 1, -1.0 / (2 * h))):
            if 1 <= j <= N:
                Lmat[row, (j - 1) * n:j * n] += c * A[j]
        # (B v')' conservative
        Lmat[row, row] -= (Bm[i - 1] + Bm[i]) / h ** 2
        if i - 1 >= 1:
            Lmat[row, (i - 2) * n:(i - 1) * n] += Bm[i - 1] / h ** 2
        if i + 1 <= N:
            Lmat[row, i * n:(i + 1) * n] += Bm[i] / h ** 2
    return np.linalg.eigvals(Lmat)


def fd_oracle(model, profile, points=400, threshold=1e-4, zero_tol=1e-2):
    ev = fd_spectrum(model, profile, points)
    i0 = int(np.argmin(np.abs(ev)))
    near_zero = ev[i0]
    rest = np.delete(ev, i0)
    unstable = rest[rest.real >= threshold]
    return {
        "near_zero": complex(near_zero),
        "has_simple_zero": bool(abs(near_zero) < zero_tol),
        "unstable_count": int(len(unstable)),
        "max_real_excluding_zero": float(np.max(rest.real)),
        "passed": bool(abs(near_zero) < zero_tol and len(unstable) == 0),
    }


# ---------------------------------------------------------------------------
# export


def evans_to_csv(data: EvansData, path=None):
    lines = ["segment,re_lambda,im_lambda,re_D,im_D"]
    for s, l, d in zip(data.segment, data.lam, data.D):
        lines.append(f"{s},{l.real:.17g},{l.imag:.17g},{d.real:.17g},{d.imag:.17g}")
    if data.origin_lam is not None:
        for l, d in zip(data.origin_lam, data.origin_D):
            lines.append(f"origin_circle,{l.real:.17g},{l.imag:.17g},{d.real:.17g},{d.imag:.17g}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def evans_to_json(data: EvansData, path=None, extra=None):
    payload = data.to_dict()
    if extra:
        payload.update(extra)
    text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, complex):
        return [o.real, o.imag]
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
