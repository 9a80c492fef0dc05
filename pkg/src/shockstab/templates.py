"""Decay templates, phase kernels and the convolution-estimate checker.

Everything here is a pure function of a :class:`TemplateBundle`, which bundles
the endstate characteristic speeds, their effective diffusion rates, the
envelope constants and the splitting coefficients of the phase kernel.

Sign conventions follow the kernel: for ``y <= 0`` the kernel is built from
the incoming modes at ``u_-`` (speeds ``a_k^- > 0``), for ``y > 0`` it is the
mirror image built from the incoming modes at ``u_+`` (speeds ``a_k^+ < 0``).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid, simpson
from scipy.special import erf

from .errors import HypothesisError, NumericalError
from .models import ModelSystem
from .profile import ShockProfile, shifted
from .spectral import SpectralData, spectral_data

SQRT_PI = math.sqrt(math.pi)
RATIO_FLOOR = 1e-300


def errfn(z):
    """Gaussian cumulative ``(1/sqrt(pi)) int_{-inf}^z exp(-s^2) ds``."""
    return 0.5 * (1.0 + erf(z))


def errfn_antiderivative(z):
    """``P`` with ``P' = errfn`` and ``P(-inf) = 0``."""
    z = np.asarray(z, dtype=float)
    return z * errfn(z) + np.exp(-z * z) / (2.0 * SQRT_PI)


def _gauss(z):
    return np.exp(-z * z) / SQRT_PI


# ---------------------------------------------------------------------------
# stationary adjoint problem


@dataclass(frozen=True)
class EInfinity:
    """Normalized bounded zero-modes of the adjoint linearized operator.

    ``rows[j]`` samples ``pi_j`` on ``x``; ``l_minus[j, k]`` is the row vector
    ``(pi_j(-inf) . r_k) l_k`` for the k-th incoming mode at ``u_-`` (likewise
    ``l_plus``).
    """
    x: np.ndarray
    rows: np.ndarray            # (ell, N, n)
    limit_minus: np.ndarray     # (ell, n)
    limit_plus: np.ndarray      # (ell, n)
    l_minus: np.ndarray         # (ell, K-, n)
    l_plus: np.ndarray          # (ell, K+, n)
    incoming_minus: np.ndarray  # mode indices
    incoming_plus: np.ndarray
    gram: np.ndarray
    normalization_residual: float
    decaying_modes: int = 0

    @property
    def ell(self):
        return self.rows.shape[0]

    def __call__(self, y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        ell, N, n = self.rows.shape
        out = np.empty(y.shape + (ell, n))
        for j in range(ell):
            for c in range(n):
                out[..., j, c] = np.interp(y, self.x, self.rows[j, :, c])
        return out

    def to_dict(self):
        return {
            "ell": self.ell,
            "limit_minus": self.limit_minus.tolist(),
            "limit_plus": self.limit_plus.tolist(),
            "normalization_residual": self.normalization_residual,
            "decaying_modes": self.decaying_modes,
        }


def _adjoint_coefficients(model: ModelSystem, A, B, x):
    """Matrices ``N`` and ``Phi`` with ``w' = N w`` and ``pi' = Phi w``.

    ``w`` is the viscous block of ``B^T pi'``; the zero-mode equation is
    ``(B^T pi')' + A^T pi' = 0``.
    """
    n, r = model.n, model.r
    m = n - r
    B22 = B[:, m:, m:]
    B22inv_T = np.linalg.inv(B22).transpose(0, 2, 1)
    if m == 0:
        N = -np.einsum("kji,kjl->kil", A, B22inv_T)
        return N, B22inv_T
    A11, A12, A21, A22 = A[:, :m, :m], A[:, :m, m:], A[:, m:, :m], A[:, m:, m:]
    B21 = B[:, m:, :m]
    E = np.linalg.solve(B22, B21).transpose(0, 2, 1)   # K^T, (m, r)
    if len(x) > 2:
        dE = np.gradient(E, x, axis=0, edge_order=2)
    else:
        dE = np.zeros_like(E)
    P = np.linalg.inv(A11).transpose(0, 2, 1)
    A12T = A12.transpose(0, 2, 1)
    A21T = A21.transpose(0, 2, 1)
    A22T = A22.transpose(0, 2, 1)
    lhs = np.eye(r)[None] - A12T @ P @ E
    rhs = A12T @ P @ A21T @ B22inv_T + A12T @ P @ dE - A22T @ B22inv_T
    N = np.linalg.solve(lhs, rhs)
    phi2 = B22inv_T
    phi1 = -P @ (A21T @ B22inv_T + dE + E @ N)
    Phi = np.concatenate([phi1, phi2], axis=1)
    return N, Phi


def _grid_rk4(N, x, start, stop, Y0):
    """Integrate ``Y' = N(x) Y`` on grid indices with midpoint-averaged coefficients."""
    direction = 1 if stop > start else -1
    path = np.empty((len(x),) + Y0.shape)
    Y = Y0.astype(float).copy()
    path[start] = Y
    for k in range(start, stop, direction):
        h = x[k + direction] - x[k]
        Na, Nb = N[k], N[k + direction]
        Nm = 0.5 * (Na + Nb)
        k1 = Na @ Y
        k2 = Nm @ (Y + 0.5 * h * k1)
        k3 = Nm @ (Y + 0.5 * h * k2)
        k4 = Nb @ (Y + h * k3)
        Y = Y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        path[k + direction] = Y
    return path


def _null_space(M, rtol=1e-7):
    if M.shape[0] == 0:
        return np.eye(M.shape[1])
    _, s, Vh = np.linalg.svd(M)
    scale = s[0] if len(s) and s[0] > 0 else 1.0
    rank = int(np.sum(s > rtol * scale))
    return Vh[rank:].T.conj()


def _decaying_modes(N, Phi, x, rtol=1e-7):
    """Primitives of ``Phi w`` for solutions ``w`` decaying at both ends."""
    mid = len(x) // 2
    wm, Vm = np.linalg.eig(N[0])
    wp, Vp = np.linalg.eig(N[-1])
    left = np.real_if_close(Vm[:, wm.real > 1e-9])
    right = np.real_if_close(Vp[:, wp.real < -1e-9])
    if left.shape[1] == 0 or right.shape[1] == 0:
        return []
    # real bases for the decaying subspaces
    left = np.linalg.qr(np.concatenate([left.real, left.imag], axis=1))[0][:, :left.shape[1]] \
        if np.iscomplexobj(left) else left
    right = np.linalg.qr(np.concatenate([right.real, right.imag], axis=1))[0][:, :right.shape[1]] \
        if np.iscomplexobj(right) else right
    Yl = _grid_rk4(N, x, 0, mid, left)
    Yr = _grid_rk4(N, x, len(x) - 1, mid, right)
    cl_norm = np.linalg.norm(Yl[mid], axis=0)
    cr_norm = np.linalg.norm(Yr[mid], axis=0)
    M = np.concatenate([Yl[mid] / cl_norm, -Yr[mid] / cr_norm], axis=1)
    ker = _null_space(M, rtol)
    out = []
    pl = left.shape[1]
    for v in ker.T:
        cl = np.real(v[:pl]) / cl_norm
        cr = np.real(v[pl:]) / cr_norm
        w = np.empty((len(x), N.shape[1]))
        w[:mid + 1] = Yl[:mid + 1] @ cl
        w[mid:] = Yr[mid:] @ cr
        phi = np.einsum("kij,kj->ki", Phi, w)
        prim = cumulative_trapezoid(phi, x, axis=0, initial=0.0)
        out.append(prim)
    return out


def e_infinity(model: ModelSystem, profile: ShockProfile, spectral: Optional[SpectralData] = None) -> EInfinity:
    """Bounded adjoint zero-modes normalized against the translate direction."""
    if spectral is None:
        spectral = spectral_data(model, profile, audit=False)
    x = profile.x
    n = model.n
    lin = spectral.linearized
    N, Phi = _adjoint_coefficients(model, lin.A, lin.B, x)
    decaying = _decaying_modes(N, Phi, x)
    p = len(decaying)
    mm, mp = spectral.minus, spectral.plus
    out_minus = np.where(mm.speeds < 0)[0]
    out_plus = np.where(mp.speeds > 0)[0]
    # unknowns: constant c (n) and decaying-mode weights d (p)
    rows = []
    for j in out_minus:
        rows.append(np.concatenate([mm.right[:, j], np.zeros(p)]))
    for j in out_plus:
        rows.append(np.concatenate([mp.right[:, j], [mp.right[:, j] @ d[-1] for d in decaying]]))
    C = np.array(rows).reshape(len(rows), n + p)
    ker = _null_space(C)
    ell = ker.shape[1]
    if ell != profile.ell:
        raise HypothesisError(
            f"bounded adjoint zero-space has dimension {ell}, expected {profile.ell}", "D")
    basis = np.empty((ell, len(x), n))
    for b in range(ell):
        c, d = ker[:n, b], ker[n:, b]
        basis[b] = c[None, :] + sum(d[i] * decaying[i] for i in range(p)) if p else c[None, :]
    directions = _profile_directions(profile, ell)
    gram = _gram(basis, directions, x)
    if abs(np.linalg.det(gram)) < 1e-12:
        raise HypothesisError("normalization matrix against the translate direction is singular", "D")
    rows_e = np.einsum("ab,bkn->akn", np.linalg.inv(gram), basis)
    resid = _gram(rows_e, directions, x) - np.eye(ell)
    lm = rows_e[:, 0, :]
    lp = rows_e[:, -1, :]
    in_minus = np.where(mm.speeds > 0)[0]
    in_plus = np.where(mp.speeds < 0)[0]
    l_minus = np.stack([[(lm[j] @ mm.right[:, k]) * mm.left[k] for k in in_minus] for j in range(ell)]) \
        if len(in_minus) else np.zeros((ell, 0, n))
    l_plus = np.stack([[(lp[j] @ mp.right[:, k]) * mp.left[k] for k in in_plus] for j in range(ell)]) \
        if len(in_plus) else np.zeros((ell, 0, n))
    return EInfinity(
        x=x, rows=rows_e, limit_minus=lm, limit_plus=lp,
        l_minus=np.asarray(l_minus).reshape(ell, len(in_minus), n),
        l_plus=np.asarray(l_plus).reshape(ell, len(in_plus), n),
        incoming_minus=in_minus, incoming_plus=in_plus,
        gram=gram, normalization_residual=float(np.max(np.abs(resid))), decaying_modes=p,
    )


def _profile_directions(profile: ShockProfile, ell):
    """Sampled ``d u^delta / d delta_k``; only the translate direction is available."""
    if ell != 1:
        raise NotImplementedError("profile families with more than one parameter are not supported")
    return (-profile.derivative)[None]


def _gram(rows, directions, x):
    """``G[j, k] = int rows_j . directions_k dy``."""
    dots = np.einsum("jyn,kyn->jky", rows, directions)
    return simpson(dots, x=x, axis=-1)


# ---------------------------------------------------------------------------
# bundle


@dataclass(frozen=True)
class TemplateBundle:
    speeds_minus: np.ndarray
    speeds_plus: np.ndarray
    beta_minus: np.ndarray
    beta_plus: np.ndarray
    L: float
    M: float
    eta: float
    a: float
    eta0: float
    l_minus: np.ndarray          # (ell, K-, n), incoming modes at u_-
    l_plus: np.ndarray           # (ell, K+, n), incoming modes at u_+
    C: float = 1.0
    t_floor: float = 1e-8
    einf: Optional[EInfinity] = field(default=None, compare=False, repr=False)
    notes: dict = field(default_factory=dict, compare=False)

    @property
    def n(self):
        return len(self.speeds_minus)

    @property
    def ell(self):
        return self.l_minus.shape[0]

    @property
    def outgoing_minus(self):
        return self.speeds_minus[self.speeds_minus < 0]

    @property
    def outgoing_plus(self):
        return self.speeds_plus[self.speeds_plus > 0]

    @property
    def incoming_minus(self):
        return self.speeds_minus[self.speeds_minus > 0]

    @property
    def incoming_plus(self):
        return self.speeds_plus[self.speeds_plus < 0]

    @property
    def beta_incoming_minus(self):
        return self.beta_minus[self.speeds_minus > 0]

    @property
    def beta_incoming_plus(self):
        return self.beta_plus[self.speeds_plus < 0]

    def constants(self):
        return {"L": self.L, "M": self.M, "eta": self.eta, "a": self.a, "eta0": self.eta0,
                "C": self.C, "t_floor": self.t_floor}

    def to_dict(self):
        out = {
            "speeds_minus": self.speeds_minus.tolist(),
            "speeds_plus": self.speeds_plus.tolist(),
            "beta_minus": self.beta_minus.tolist(),
            "beta_plus": self.beta_plus.tolist(),
            "constants": self.constants(),
            "l_minus": self.l_minus.tolist(),
            "l_plus": self.l_plus.tolist(),
            "notes": dict(self.notes),
        }
        if self.einf is not None:
            out["e_infinity"] = self.einf.to_dict()
        return out


def _positive(name, value):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive and finite, got {value}")
    return value


def template_bundle(model: ModelSystem, profile: ShockProfile, spectral: Optional[SpectralData] = None,
                    einf: Optional[EInfinity] = None, **overrides) -> TemplateBundle:
    """Assemble speeds, rates, constants and kernel coefficients for a profile.

    Keyword overrides: ``L``, ``M``, ``eta``, ``a``, ``eta0``, ``C``, ``t_floor``.
    """
    unknown = set(overrides) - {"L", "M", "eta", "a", "eta0", "C", "t_floor"}
    if unknown:
        raise ValueError(f"unknown template constants: {sorted(unknown)}")
    if spectral is None:
        spectral = spectral_data(model, profile, audit=False)
    if einf is None:
        einf = e_infinity(model, profile, spectral)
    bm, bp = spectral.minus.beta, spectral.plus.beta
    beta_max = float(np.max(np.concatenate([bm, bp])))
    L = overrides.get("L", 8.0 * beta_max)
    M = overrides.get("M", 2.0 * L)
    alpha = profile.alpha if np.isfinite(profile.alpha) and profile.alpha > 0 else 1.0
    eta = overrides.get("eta", 0.5 * alpha)
    incoming = np.abs(np.concatenate([spectral.minus.speeds[spectral.minus.speeds > 0],
                                      spectral.plus.speeds[spectral.plus.speeds < 0]]))
    a_default = 0.5 * float(np.min(incoming)) if len(incoming) else 1.0
    a = overrides.get("a", a_default)
    notes = {"a_default_heuristic": "a" not in overrides}
    if "eta0" in overrides:
        eta0 = overrides["eta0"]
    elif not spectral.blocks.empty:
        rates = [-e for e in spectral.dissipation.eta]
        eta0 = float(min(np.min(np.linalg.eigvals(r[k]).real) for r in rates for k in (0, -1)))
    else:
        eta0 = eta
    return TemplateBundle(
        speeds_minus=np.asarray(spectral.minus.speeds, float),
        speeds_plus=np.asarray(spectral.plus.speeds, float),
        beta_minus=np.asarray(bm, float), beta_plus=np.asarray(bp, float),
        L=_positive("L", L), M=_positive("M", M), eta=_positive("eta", eta), a=_positive("a", a),
        eta0=float(eta0), l_minus=einf.l_minus, l_plus=einf.l_plus,
        C=_positive("C", overrides.get("C", 1.0)), t_floor=_positive("t_floor", overrides.get("t_floor", 1e-8)),
        einf=einf, notes=notes,
    )


# ---------------------------------------------------------------------------
# decay templates


def _tt(bundle, t):
    return np.maximum(np.asarray(t, dtype=float), bundle.t_floor)


def chi(bundle: TemplateBundle, x, t):
    """Indicator of ``a_1^- t <= x <= a_n^+ t``."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    return ((x >= bundle.speeds_minus[0] * t) & (x <= bundle.speeds_plus[-1] * t)).astype(float)


def theta(bundle: TemplateBundle, x, t):
    x = np.asarray(x, dtype=float)
    t = _tt(bundle, t)
    out = np.zeros(np.broadcast(x, t).shape)
    for a in np.concatenate([bundle.outgoing_minus, bundle.outgoing_plus]):
        out = out + (1 + t) ** -0.5 * np.exp(-((x - a * t) ** 2) / (bundle.L * t))
    return out


def psi1(bundle: TemplateBundle, x, t):
    x = np.asarray(x, dtype=float)
    t = _tt(bundle, t)
    out = np.zeros(np.broadcast(x, t).shape)
    for a in np.concatenate([bundle.outgoing_minus, bundle.outgoing_plus]):
        out = out + (1 + np.abs(x) + t) ** -0.5 * (1 + np.abs(x - a * t)) ** -0.5
    return chi(bundle, x, t) * out


def psi2(bundle: TemplateBundle, x, t):
    x = np.asarray(x, dtype=float)
    t = _tt(bundle, t)
    a1, an = bundle.speeds_minus[0], bundle.speeds_plus[-1]
    edge = (1 + np.abs(x - a1 * t) + np.sqrt(t)) ** -1.5 + (1 + np.abs(x - an * t) + np.sqrt(t)) ** -1.5
    return (1.0 - chi(bundle, x, t)) * edge


def template_sum(bundle: TemplateBundle, x, t):
    return theta(bundle, x, t) + psi1(bundle, x, t) + psi2(bundle, x, t)


# ---------------------------------------------------------------------------
# phase kernel


def _side_data(bundle, side):
    if side < 0:
        return bundle.incoming_minus, bundle.beta_incoming_minus, bundle.l_minus
    return -bundle.incoming_plus, bundle.beta_incoming_plus, bundle.l_plus


def e_kernel(bundle: TemplateBundle, y, t, kind="value"):
    """Phase kernel rows, shape ``broadcast(y, t) + (ell, n)``.

    ``kind``: ``value``, ``y``, ``t``, ``yt``, ``limit`` (the ``t -> inf``
    value) or ``minus_limit`` (value minus limit).
    """
    y = np.asarray(y, dtype=float)
    if kind != "limit" and np.any(np.asarray(t) <= 0):
        raise ValueError("phase kernel needs t > 0")
    t = np.asarray(t, dtype=float)
    shape = np.broadcast(y, t).shape
    ell, n = bundle.ell, bundle.n
    out = np.zeros(shape + (ell, n))
    for side in (-1, 1):
        speeds, betas, ls = _side_data(bundle, side)
        mask = (y <= 0) if side < 0 else (y > 0)
        mask = np.broadcast_to(mask, shape)
        if not np.any(mask):
            continue
        Y = np.broadcast_to(-side * y, shape)
        T = np.broadcast_to(t, shape)
        for k, (a, beta) in enumerate(zip(speeds, betas)):
            if kind == "limit":
                coef = np.ones(shape)
            else:
                w = np.sqrt(4.0 * beta * T)
                z1 = (Y + a * T) / w
                z2 = (Y - a * T) / w
                if kind == "value":
                    coef = errfn(z1) - errfn(z2)
                elif kind == "minus_limit":
                    coef = errfn(z1) - errfn(z2) - 1.0
                elif kind == "y":
                    coef = -side * (_gauss(z1) - _gauss(z2)) / w
                elif kind == "t":
                    zt1 = a / w - z1 / (2 * T)
                    zt2 = -a / w - z2 / (2 * T)
                    coef = _gauss(z1) * zt1 - _gauss(z2) * zt2
                elif kind == "yt":
                    zt1 = a / w - z1 / (2 * T)
                    zt2 = -a / w - z2 / (2 * T)
                    c1 = _gauss(z1) * (-2 * z1 * zt1 - 1 / (2 * T))
                    c2 = _gauss(z2) * (-2 * z2 * zt2 - 1 / (2 * T))
                    coef = -side * (c1 - c2) / w
                else:
                    raise ValueError(f"unknown kernel kind {kind!r}")
            out += np.where(mask, coef, 0.0)[..., None, None] * ls[:, k, :][(None,) * len(shape)]
    return out


def e_profile(bundle: TemplateBundle, j, y, t):
    """Row ``e_j(y, t)``."""
    return e_kernel(bundle, y, t)[..., j, :]


def e_limit(bundle: TemplateBundle, y):
    return e_kernel(bundle, y, 1.0, kind="limit")


def e_cell_integral(bundle: TemplateBundle, y0, y1, t):
    """``int_{y0}^{y1} e(y, t) dy`` for cells not straddling 0; shape ``cells + (ell, n)``."""
    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    if np.any((y0 < 0) & (y1 > 0)):
        raise ValueError("cells must not straddle y = 0")
    out = np.zeros(y0.shape + (bundle.ell, bundle.n))
    if t <= 0:
        return out
    for side in (-1, 1):
        speeds, betas, ls = _side_data(bundle, side)
        mask = (y1 <= 0) if side < 0 else (y0 >= 0)
        for k, (a, beta) in enumerate(zip(speeds, betas)):
            w = math.sqrt(4.0 * beta * t)
            if side < 0:
                def prim(y):
                    return w * (errfn_antiderivative((y + a * t) / w) - errfn_antiderivative((y - a * t) / w))
            else:
                def prim(y):
                    return -w * (errfn_antiderivative((-y + a * t) / w) - errfn_antiderivative((-y - a * t) / w))
            val = np.where(mask, prim(y1) - prim(y0), 0.0)
            out += val[..., None, None] * ls[:, k, :][(None,) * y0.ndim]
    return out


def e_edge_values(bundle: TemplateBundle, edges, t):
    """Kernel at cell edges with the two one-sided values averaged at ``y = 0``."""
    edges = np.asarray(edges, dtype=float)
    if t <= 0:
        return np.zeros(edges.shape + (bundle.ell, bundle.n))
    vals = e_kernel(bundle, edges, t)
    zero = edges == 0
    if np.any(zero):
        right = e_kernel(bundle, np.array([1e-300]), t)[0]
        vals[zero] = 0.5 * (vals[zero] + right)
    return vals


# ---------------------------------------------------------------------------
# diffusive remainder majorant and source envelopes


def _envelope_left(speeds_m, speeds_p, M, eta, x, t, y):
    """Majorant sum for ``y <= 0`` (without prefactors and the pure exponential term)."""
    xp = np.maximum(x, 0.0)
    xm = np.maximum(-x, 0.0)
    g = np.zeros(np.broadcast(x, t, y).shape)
    rt = t ** -0.5
    for a in speeds_m:
        g = g + rt * np.exp(-((x - y - a * t) ** 2) / (M * t)) * np.exp(-eta * xp)
    ay = np.abs(y)
    for ak in speeds_m[speeds_m > 0]:
        ind = (np.abs(ak * t) >= ay)
        lag = t - ay / ak
        for aj in speeds_m[speeds_m < 0]:
            g = g + ind * rt * np.exp(-((x - aj * lag) ** 2) / (M * t)) * np.exp(-eta * xp)
        for aj in speeds_p[speeds_p > 0]:
            g = g + ind * rt * np.exp(-((x - aj * lag) ** 2) / (M * t)) * np.exp(-eta * xm)
    return g


def gtilde_envelope(bundle: TemplateBundle, x, t, y, deriv_order=0):
    """Majorant of ``|d^alpha G~(x, t; y)|``.

    ``deriv_order`` is an int (total order; any positive order switches on
    both the ``y`` and ``x`` exponential prefactors) or a pair
    ``(order_x, order_y)``.
    """
    if isinstance(deriv_order, (tuple, list)):
        ax, ay = int(deriv_order[0]), int(deriv_order[1])
        total = ax + ay
    else:
        total = int(deriv_order)
        ax = ay = int(total > 0)
    if not 0 <= total <= 2:
        raise ValueError("derivative order must be between 0 and 2")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    t = _tt(bundle, t)
    eta, M = bundle.eta, bundle.M
    left = _envelope_left(bundle.speeds_minus, bundle.speeds_plus, M, eta, x, t, y)
    # mirror: x -> -x, y -> -y, speeds -> -speeds with sides exchanged
    right = _envelope_left(-bundle.speeds_plus[::-1], -bundle.speeds_minus[::-1], M, eta, -x, t, -y)
    body = np.where(y <= 0, left, right)
    pref = t ** (-total / 2.0) + (ay > 0) * np.exp(-eta * np.abs(y)) + (ax > 0) * np.exp(-eta * np.abs(x))
    return bundle.C * (np.exp(-eta * (np.abs(x - y) + t)) + pref * body)


def source_psi(bundle: TemplateBundle, y, s):
    s = _tt(bundle, s)
    T = template_sum(bundle, y, s)
    return (1 + s) ** 0.5 * s ** -0.5 * T * T + T / (1 + s)


def source_phi1(bundle: TemplateBundle, y, s):
    s = _tt(bundle, s)
    return np.exp(-bundle.eta * np.abs(y)) * s ** -0.5 * template_sum(bundle, y, s)


def source_phi2(bundle: TemplateBundle, y, s):
    s = np.asarray(s, dtype=float)
    return np.exp(-bundle.eta * np.abs(np.asarray(y, dtype=float))) * (1 + s) ** -1.5


def source_upsilon(bundle: TemplateBundle, y, s):
    s = _tt(bundle, s)
    return s ** -0.25 * template_sum(bundle, y, s) + s ** -0.5 * np.exp(-bundle.eta * np.abs(y))


# ---------------------------------------------------------------------------
# quadrature


GL_NODES = 6
Y_MAX = 1e12
FEATURE_OFFSETS = np.array([-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0])


@lru_cache(maxsize=8)
def _gl(k):
    xi, wi = np.polynomial.legendre.leggauss(k)
    return xi, wi


def _composite(breaks, k=GL_NODES):
    """Nodes and weights of composite Gauss-Legendre on sorted ``breaks`` (last axis)."""
    xi, wi = _gl(k)
    a, b = breaks[..., :-1], breaks[..., 1:]
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    nodes = mid[..., None] + half[..., None] * xi
    weights = half[..., None] * wi
    shape = breaks.shape[:-1] + (-1,)
    return nodes.reshape(shape), weights.reshape(shape)


@lru_cache(maxsize=4)
def _ladder(ymax=Y_MAX):
    pos = 0.25 * 2.0 ** np.arange(0, int(np.ceil(np.log2(ymax / 0.25))) + 1)
    return np.concatenate([-pos[::-1], [0.0], pos])


def _y_rule(centers, widths):
    """Composite rule in ``y`` for each row of ``centers``/``widths`` (shape (S, F))."""
    S = centers.shape[0]
    w = np.maximum(widths, 1e-12)
    pts = (centers[..., None] + w[..., None] * FEATURE_OFFSETS).reshape(S, -1)
    pts = np.clip(pts, -Y_MAX, Y_MAX)
    ladder = np.broadcast_to(_ladder(), (S, len(_ladder())))
    breaks = np.sort(np.concatenate([ladder, pts], axis=1), axis=1)
    return _composite(breaks)


def _endpoint_rule(length, k=GL_NODES, ratio=2.0, finest=1e-3):
    """Rule on ``[0, length]`` graded toward 0, with ``sigma = tau^2`` on every panel."""
    if length <= 0:
        return np.zeros(0), np.zeros(0)
    h0 = finest * min(1.0, length)
    edges = [0.0, h0]
    while edges[-1] < length:
        edges.append(min(length, edges[-1] * ratio))
    tau = np.sqrt(np.array(edges))
    nodes, weights = _composite(tau, k)
    return nodes ** 2, 2.0 * nodes * weights


def _time_rule(t_end):
    """Rule on ``[0, t_end]`` graded toward both endpoints."""
    if t_end <= 0:
        return np.zeros(0), np.zeros(0)
    half = 0.5 * t_end
    sl, wl = _endpoint_rule(half)
    sr, wr = _endpoint_rule(half)
    return np.concatenate([sl, t_end - sr]), np.concatenate([wl, wr])


def _features(bundle: TemplateBundle, x, t, s):
    """Centers and widths of kinks, Gaussians and indicator edges in ``y``."""
    s = np.atleast_1d(s)
    tau = np.maximum(t - s, bundle.t_floor)
    ss = np.maximum(s, bundle.t_floor)
    cs, ws = [], []

    def add(c, w):
        cs.append(np.broadcast_to(c, s.shape))
        ws.append(np.broadcast_to(w, s.shape))

    add(0.0, 1.0 / bundle.eta)
    add(0.0, 1e-3)
    speeds = np.concatenate([bundle.speeds_minus, bundle.speeds_plus])
    for a in speeds:
        add(a * ss, np.sqrt(bundle.L * ss) + 1.0)
        add(a * ss, 1e-9)
        add(x - a * tau, np.sqrt(bundle.M * tau))
    for side_m, side_p, sgn in ((bundle.speeds_minus, bundle.speeds_plus, 1.0),
                                (-bundle.speeds_plus[::-1], -bundle.speeds_minus[::-1], -1.0)):
        xx = sgn * x
        for ak in side_m[side_m > 0]:
            add(-sgn * ak * tau, 1e-9)
            for aj in np.concatenate([side_m[side_m < 0], side_p[side_p > 0]]):
                ystar = -(aj * tau - xx) * ak / aj
                add(sgn * ystar, np.sqrt(bundle.M * tau) * abs(ak / aj))
    for side in (-1, 1):
        speeds_in, betas, _ = _side_data(bundle, side)
        for a, beta in zip(speeds_in, betas):
            w = np.sqrt(4 * beta * tau)
            add(side * a * tau, w)
            add(-side * a * tau, w)
    return np.stack(cs, axis=1), np.stack(ws, axis=1)


def _enorm(arr):
    return np.sqrt(np.sum(arr * arr, axis=(-2, -1)))


def _weight(y):
    return (1.0 + np.abs(y)) ** -1.5


# integrands f(bundle, x, tau, s, y); tau = t - s for double integrals, tau = t for single ones
LEMMA_LINES = {
    # name: (group, integrand, rhs, order, depends on x, cut at t - 1)
    "gtilde_weight": ("linear_weighted", lambda b, x, tau, s, y: gtilde_envelope(b, x, tau, y, 0) * _weight(y),
                      lambda b, x, t: template_sum(b, x, t), "single", True, False),
    "e_t_weight": ("linear_weighted", lambda b, x, tau, s, y: _enorm(e_kernel(b, y, tau, "t")) * _weight(y),
                   lambda b, x, t: (1 + t) ** -1.5, "single", False, False),
    "e_weight": ("linear_weighted", lambda b, x, tau, s, y: _enorm(e_kernel(b, y, tau)) * _weight(y),
                 lambda b, x, t: 1.0, "single", False, False),
    "e_minus_limit_weight": ("linear_weighted",
                             lambda b, x, tau, s, y: _enorm(e_kernel(b, y, tau, "minus_limit")) * _weight(y),
                             lambda b, x, t: (1 + t) ** -0.5, "single", False, False),
    "gtilde_y_psi": ("nonlinear_psi", lambda b, x, tau, s, y: gtilde_envelope(b, x, tau, y, (0, 1)) * source_psi(b, y, s),
                     lambda b, x, t: template_sum(b, x, t), "double", True, False),
    "gtilde_xy_psi": ("nonlinear_psi", lambda b, x, tau, s, y: gtilde_envelope(b, x, tau, y, (1, 1)) * source_psi(b, y, s),
                      lambda b, x, t: template_sum(b, x, t), "double", True, True),
    "e_yt_psi": ("nonlinear_psi", lambda b, x, tau, s, y: _enorm(e_kernel(b, y, tau, "yt")) * source_psi(b, y, s),
                 lambda b, x, t: (1 + t) ** -1.0, "double", False, False),
    "e_y_limit_tail_psi": ("nonlinear_psi", None, lambda b, x, t: (1 + t) ** -0.5, "tail", False, False),
    "e_y_minus_limit_psi": ("nonlinear_psi",
                            lambda b, x, tau, s, y: _enorm(e_kernel(b, y, tau, "y")) * source_psi(b, y, s),
                            lambda b, x, t: (1 + t) ** -0.5, "double", False, False),
    "gtilde_y_phi1": ("nonlinear_phi1",
                      lambda b, x, tau, s, y: gtilde_envelope(b, x, tau, y, (0, 1)) * source_phi1(b, y, s),
                      lambda b, x, t: template_sum(b, x, t), "double", True, False),
    "gtilde_xy_phi1": ("nonlinear_phi1",
                       lambda b, x, tau, s, y: gtilde_envelope(b, x, tau, y, (1, 1)) * source_phi1(b, y, s),
                       lambda b, x, t: template_sum(b, x, t), "double", True, True),
    "e_yt_phi1": ("nonlinear_phi1", lambda b, x, tau, s, y: _enorm(e_kernel(b, y, tau, "yt")) * source_phi1(b, y, s),
                  lambda b, x, t: (1 + t) ** -1.0, "double", False, False),
    "e_y_phi1": ("nonlinear_phi1", lambda b, x, tau, s, y: _enorm(e_kernel(b, y, tau, "y")) * source_phi1(b, y, s),
                 lambda b, x, t: (1 + t) ** -0.5, "double", False, False),
    "gtilde_phi2": ("nonlinear_phi2", lambda b, x, tau, s, y: gtilde_envelope(b, x, tau, y, 0) * source_phi2(b, y, s),
                    lambda b, x, t: template_sum(b, x, t), "double", True, False),
    "gtilde_x_phi2": ("nonlinear_phi2",
                      lambda b, x, tau, s, y: gtilde_envelope(b, x, tau, y, (1, 0)) * source_phi2(b, y, s),
                      lambda b, x, t: template_sum(b, x, t), "double", True, False),
    "e_t_phi2": ("nonlinear_phi2", lambda b, x, tau, s, y: _enorm(e_kernel(b, y, tau, "t")) * source_phi2(b, y, s),
                 lambda b, x, t: (1 + t) ** -1.5, "double", False, False),
    "e_minus_limit_phi2": ("nonlinear_phi2",
                           lambda b, x, tau, s, y: _enorm(e_kernel(b, y, tau, "minus_limit")) * source_phi2(b, y, s),
                           lambda b, x, t: (1 + t) ** -1.5, "double", False, False),
}

# lines whose fitted constants are required to be stable under refinement
CORE_LINES = ("gtilde_weight", "e_t_weight", "e_weight", "e_minus_limit_weight",
              "gtilde_y_phi1", "e_yt_phi1", "e_y_phi1",
              "gtilde_phi2", "e_t_phi2", "e_minus_limit_phi2")


def convolution_lhs(bundle: TemplateBundle, name, x, t):
    """Quadrature of the left side of one convolution estimate at ``(x, t)``."""
    group, f, _, order, _, cut = LEMMA_LINES[name]
    if order == "single":
        c, w = _features(bundle, x, t, np.zeros(1))
        y, wy = _y_rule(c, w)
        return float(np.sum(f(bundle, x, t, 0.0, y) * wy))
    if order == "tail":
        # the kernel limit is piecewise constant: its y-derivative is a jump at 0
        jump = _enorm((bundle.l_plus.sum(axis=1) - bundle.l_minus.sum(axis=1))[None])[0]
        if jump == 0:
            return 0.0
        sig, ws = _endpoint_rule(1e6 * (1 + t))
        return float(jump * np.sum(source_psi(bundle, 0.0, t + sig) * ws))
    t_end = t - 1.0 if cut else t
    s, ws = _time_rule(t_end)
    if len(s) == 0:
        return 0.0
    c, w = _features(bundle, x, t, s)
    y, wy = _y_rule(c, w)
    tau = np.maximum(t - s, bundle.t_floor)[:, None]
    vals = f(bundle, x, tau, s[:, None], y)
    return float(np.sum(np.sum(vals * wy, axis=1) * ws))


def lemma_samples(bundle: TemplateBundle, count, t_range=(1.0, 100.0)):
    """Deterministic ``(x, t)`` samples spanning the fan of characteristics."""
    k = max(2, 2 * int(round(math.sqrt(count) / 2.2)))
    m = int(math.ceil(count / k))
    ts = np.geomspace(t_range[0], t_range[1], m)
    amax = float(np.max(np.abs(np.concatenate([bundle.speeds_minus, bundle.speeds_plus]))))
    out = []
    for t in ts:
        span = amax * t + 2.0 * math.sqrt(bundle.M * t)
        for x in np.linspace(-span, span, k):
            out.append((float(x), float(t)))
    return out[:count] if len(out) > count else out


@dataclass
class LemmaReport:
    lines: dict
    samples: list
    constants_used: dict

    def constant(self, name):
        return self.lines[name]["constant"]

    def to_dict(self):
        return {"constants_used": self.constants_used, "samples": self.samples, "lines": self.lines}


def verify_convolution_lemmas(bundle: TemplateBundle, sample_set=None, lines=None, flow=None,
                              spectral: Optional[SpectralData] = None) -> LemmaReport:
    """Fitted constants ``C = max LHS/RHS`` for each convolution estimate.

    ``flow``/``spectral`` enable the hyperbolic transport line.  Samples whose
    quadrature is not finite are excluded and listed per line.
    """
    if sample_set is None:
        sample_set = lemma_samples(bundle, 20)
    names = list(LEMMA_LINES) if lines is None else list(lines)
    if flow is not None and spectral is not None and (lines is None or "h_upsilon" in names):
        if "h_upsilon" not in names:
            names.append("h_upsilon")
    out = {}
    for name in names:
        if name == "h_upsilon":
            group, rhs_fn, dep_x = "hyperbolic_upsilon", (lambda b, x, t: (psi1(b, x, t) + psi2(b, x, t))), True
        else:
            group, _, rhs_fn, _, dep_x, _ = LEMMA_LINES[name]
        cache = {}
        ratios, lhs_vals, excluded = [], [], []
        for x, t in sample_set:
            key = (x, t) if dep_x else t
            if key not in cache:
                with np.errstate(over="ignore", under="ignore", invalid="ignore", divide="ignore"):
                    if name == "h_upsilon":
                        cache[key] = _h_upsilon(bundle, flow, spectral, x, t)
                    else:
                        cache[key] = convolution_lhs(bundle, name, x, t)
            lhs = cache[key]
            rhs = float(rhs_fn(bundle, x, t))
            if not np.isfinite(lhs) or not np.isfinite(rhs):
                excluded.append([x, t])
                continue
            lhs_vals.append(lhs)
            if rhs <= RATIO_FLOOR:
                ratios.append(0.0 if lhs <= RATIO_FLOOR else float("inf"))
            else:
                ratios.append(lhs / rhs)
        out[name] = {
            "group": group,
            "constant": float(max(ratios)) if ratios else float("nan"),
            "ratios": ratios,
            "lhs": lhs_vals,
            "excluded": excluded,
        }
    return LemmaReport(lines=out, samples=[list(p) for p in sample_set], constants_used=bundle.constants())


def _h_upsilon(bundle, flow, spectral, x, t):
    from .spectral import hyperbolic_green_action

    n = spectral.n
    s, ws = _endpoint_rule(t, k=4, ratio=4.0)
    total = np.zeros(n)
    for si, wi in zip(s, ws):
        def v0(y, si=si):
            return source_upsilon(bundle, y, si)[:, None] * np.ones(n)
        act = hyperbolic_green_action(flow, spectral, v0, t - si)
        total += wi * act(np.array([x]))[0]
    return float(np.linalg.norm(total))


def refinement_check(bundle: TemplateBundle, coarse=20, fine=80, lines=CORE_LINES, factor=2.0):
    """Compare fitted constants between a coarse and a fine sample set."""
    rc = verify_convolution_lemmas(bundle, lemma_samples(bundle, coarse), lines=lines)
    rf = verify_convolution_lemmas(bundle, lemma_samples(bundle, fine), lines=lines)
    out = {}
    for name in lines:
        c0, c1 = rc.constant(name), rf.constant(name)
        finite = bool(np.isfinite(c0) and np.isfinite(c1))
        if finite and c0 > 0 and c1 > 0:
            change = max(c0 / c1, c1 / c0)
        elif finite and c0 == c1 == 0:
            change = 1.0
        else:
            change = float("inf")
        out[name] = {"coarse": c0, "fine": c1, "change": change, "ok": finite and change < factor}
    return out


# ---------------------------------------------------------------------------
# pointwise kernel bounds


def kernel_bound_constants(bundle: TemplateBundle, ys, ts):
    """Fitted constants for the pointwise bounds on the phase kernel and its derivatives."""
    Y, T = np.meshgrid(np.asarray(ys, float), np.asarray(ts, float), indexing="ij")
    M, eta = bundle.M, bundle.eta
    bracket = np.zeros(Y.shape)
    gsum = np.zeros(Y.shape)
    for side in (-1, 1):
        speeds, betas, _ = _side_data(bundle, side)
        mask = (Y <= 0) if side < 0 else (Y > 0)
        Ys = -side * Y
        for a, beta in zip(speeds, betas):
            w = np.sqrt(4 * beta * T)
            bracket += np.where(mask, errfn((Ys + a * T) / w) - errfn((Ys - a * T) / w), 0.0)
            gsum += np.where(mask, np.exp(-((Ys + a * T) ** 2) / (M * T)), 0.0)
    ex = np.exp(-eta * np.abs(Y))
    rt = T ** -0.5
    lines = {
        "value": (_enorm(e_kernel(bundle, Y, T)), bracket),
        "minus_limit": (_enorm(e_kernel(bundle, Y, T, "minus_limit")), errfn((np.abs(Y) - bundle.a * T) / (M * np.sqrt(T)))),
        "t": (_enorm(e_kernel(bundle, Y, T, "t")), rt * gsum),
        "y": (_enorm(e_kernel(bundle, Y, T, "y")), rt * gsum + ex * bracket),
        "y_minus_limit": (_enorm(e_kernel(bundle, Y, T, "y")), rt * gsum),
        "yt": (_enorm(e_kernel(bundle, Y, T, "yt")), (1 / T + rt * ex) * gsum),
    }
    out = {}
    for name, (lhs, rhs) in lines.items():
        live = rhs > RATIO_FLOOR
        worst = float(np.max(lhs[live] / rhs[live])) if np.any(live) else 0.0
        if np.any(~live & (lhs > RATIO_FLOOR)):
            worst = float("inf")
        out[name] = worst
    return out


def shift_sensitivity(model: ModelSystem, profile: ShockProfile, spectral: Optional[SpectralData] = None,
                      h=1e-3):
    """Fitted ``C`` in ``|d e / d delta*| <= C |e|`` from recomputed splitting coefficients."""
    rows = []
    for d in (-h, h):
        prof = shifted(profile, d)
        rows.append(e_infinity(model, prof, spectral_data(model, prof, audit=False) if spectral is None else spectral))
    out = 0.0
    for attr in ("l_minus", "l_plus"):
        a0, a1 = getattr(rows[0], attr), getattr(rows[1], attr)
        if a0.size == 0:
            continue
        dl = np.abs(a1 - a0) / (2 * h)
        base = np.abs(0.5 * (a0 + a1))
        live = base > 1e-12
        if np.any(live):
            out = max(out, float(np.max(dl[live] / base[live])))
        if np.any(~live & (dl > 1e-8)):
            out = float("inf")
    return out


# ---------------------------------------------------------------------------
# export


def templates_to_csv(bundle: TemplateBundle, xs, ts, path=None):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["t", "x", "chi", "theta", "psi1", "psi2", "template_sum"])
    for t in ts:
        xx = np.asarray(xs, dtype=float)
        cols = [chi(bundle, xx, t), theta(bundle, xx, t), psi1(bundle, xx, t), psi2(bundle, xx, t)]
        for i, x in enumerate(xx):
            vals = [float(c[i]) for c in cols]
            wr.writerow([repr(float(t)), repr(float(x))] + [repr(v) for v in vals] + [repr(sum(vals[1:]))])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def lemma_report_to_json(report: LemmaReport, path=None, refinement=None):
    payload = report.to_dict()
    if refinement is not None:
        payload["refinement"] = refinement
    text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(type(obj).__name__)
