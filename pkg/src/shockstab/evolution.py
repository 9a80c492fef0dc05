"""Nonlinear time integration around a shock profile.

The solver is a conservative finite-volume scheme on cell centers with
central convective fluxes and a Crank-Nicolson treatment of the viscous
term (coefficients lagged within each stage).  On top of it sit the phase
fit, the perturbation/phase bookkeeping of a run, the decay and energy
reports, and the fixed-point phase iteration (see ``phase_iteration``).
"""

import csv
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import make_interp_spline
from scipy.sparse.linalg import spsolve

from . import kernels
from .errors import AccuracyError, BlowUpError, ConfigError, NumericalError
from .models import ModelSystem
from .profile import ShockProfile
from .templates import TemplateBundle, e_infinity, template_bundle, template_sum

CFL_MAX = 0.9
BLOWUP_LIMIT = 1e6
STEADY_TOL = 1e-11
PHASE_WEIGHT_WIDTHS = 4.0
BOUNDARY_TEMPLATE_TOL = 1e-6


class AmbiguousPhaseWarning(UserWarning):
    """The least-squares phase landscape has no unique interior minimum."""


class HorizonWarning(UserWarning):
    """Outgoing waves reach the pinned boundary before the end of the run."""


# ---------------------------------------------------------------------------
# grid and finite-volume operator


@dataclass(frozen=True)
class Grid:
    """``cells`` uniform cells on ``[-half_width, half_width]``; ``cells`` is even so 0 is an edge."""

    half_width: float
    cells: int

    @property
    def dx(self):
        return 2.0 * self.half_width / self.cells

    @property
    def edges(self):
        return np.linspace(-self.half_width, self.half_width, self.cells + 1)

    @property
    def x(self):
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])


def make_grid(half_width, dx) -> Grid:
    if not (half_width > 0 and dx > 0) or not np.isfinite(half_width) or not np.isfinite(dx):
        raise ConfigError(f"grid needs positive half_width and dx, got {half_width}, {dx}")
    cells = 2 * int(math.ceil(half_width / dx - 1e-9))
    return Grid(float(half_width), cells)


class FVSolver:
    """Central flux-difference convection plus lagged-coefficient Crank-Nicolson viscosity.

    Far-field ghost cells are pinned to ``u_minus`` / ``u_plus``.  Each call to
    :meth:`step` records the boundary mass flux so conservation can be audited.
    """

    def __init__(self, model: ModelSystem, grid: Grid, u_minus, u_plus):
        self.model = model
        self.grid = grid
        self.n = model.n
        self.u_minus = np.asarray(u_minus, dtype=float)
        self.u_plus = np.asarray(u_plus, dtype=float)
        self.dx = grid.dx
        self.last_boundary_flux = np.zeros(self.n)
        self._constant_B = self._viscosity_is_constant()

    def _viscosity_is_constant(self):
        probe = np.stack([self.u_minus, self.u_plus, 0.5 * (self.u_minus + self.u_plus)])
        return not np.any(self.model.viscosity_derivative(probe))

    def _ghosted(self, U):
        return np.vstack([self.u_minus[None], U, self.u_plus[None]])

    def convective_flux(self, U):
        F = self.model.flux(self._ghosted(U))
        return 0.5 * (F[:-1] + F[1:])

    def convective_rhs(self, U):
        G = self.convective_flux(U)
        return -(G[1:] - G[:-1]) / self.dx

    def edge_viscosity(self, U):
        if self._constant_B:
            B0 = self.model.viscosity(self.u_minus[None])[0]
            return np.broadcast_to(B0, (U.shape[0] + 1, self.n, self.n))
        Ue = self._ghosted(U)
        return self.model.viscosity(0.5 * (Ue[:-1] + Ue[1:]))

    def diffusive_flux(self, Bedge, U):
        Ue = self._ghosted(U)
        return np.einsum("kij,kj->ki", Bedge, Ue[1:] - Ue[:-1]) / self.dx

    def diffusion_rhs(self, Bedge, U):
        G = self.diffusive_flux(Bedge, U)
        return (G[1:] - G[:-1]) / self.dx

    def residual(self, U):
        """Semi-discrete right-hand side ``-F(U)_x + (B(U) U_x)_x``."""
        return self.convective_rhs(U) + self.diffusion_rhs(self.edge_viscosity(U), U)

    def _implicit_solve(self, Bedge, rhs, dt):
        # (I - dt/2 T) X = rhs with T the interior part of the diffusion operator
        N, n = rhs.shape
        c = 0.5 * dt / self.dx ** 2
        lower = np.zeros((N, n, n))
        upper = np.zeros((N, n, n))
        lower[1:] = -c * Bedge[1:N]
        upper[:-1] = -c * Bedge[1:N]
        diag = np.broadcast_to(np.eye(n), (N, n, n)) + c * (Bedge[:-1] + Bedge[1:])
        rhs = rhs.copy()
        rhs[0] += c * Bedge[0] @ self.u_minus
        rhs[-1] += c * Bedge[-1] @ self.u_plus
        return kernels.block_tridiag(np.ascontiguousarray(lower), np.ascontiguousarray(diag),
                                     np.ascontiguousarray(upper), rhs)

    def step(self, U, t, dt, forcing=None):
        """Advance one IMEX Heun / Crank-Nicolson step.

        ``forcing`` is an optional ``(N, n)`` array added as a source, held
        constant over the step.
        """
        U = np.asarray(U, dtype=float)
        src = 0.0 if forcing is None else forcing
        G0 = self.convective_flux(U)
        E0 = -(G0[1:] - G0[:-1]) / self.dx
        B0 = self.edge_viscosity(U)
        rhs = U + dt * (E0 + src) + 0.5 * dt * self.diffusion_rhs(B0, U)
        U1 = self._implicit_solve(B0, rhs, dt)
        G1 = self.convective_flux(U1)
        E1 = -(G1[1:] - G1[:-1]) / self.dx
        Bh = self.edge_viscosity(0.5 * (U + U1))
        rhs = U + 0.5 * dt * (E0 + E1) + dt * src + 0.5 * dt * self.diffusion_rhs(Bh, U)
        Unew = self._implicit_solve(Bh, rhs, dt)
        if not np.all(np.isfinite(Unew)) or np.max(np.abs(Unew)) > BLOWUP_LIMIT:
            raise BlowUpError("solution left the finite range", where=f"t={t + dt:.6g}")
        Dh = self.diffusive_flux(Bh, 0.5 * (U + Unew))
        inflow = 0.5 * (G0[0] + G1[0]) - Dh[0]
        outflow = 0.5 * (G0[-1] + G1[-1]) - Dh[-1]
        self.last_boundary_flux = dt * (inflow - outflow)
        return Unew

    def max_speed(self, U):
        lam = np.linalg.eigvals(self.model.flux_jacobian(self._ghosted(U)))
        return float(np.max(np.abs(lam)))

    def check_cfl(self, U, dt, cfl=CFL_MAX):
        speed = self.max_speed(U)
        if not (dt > 0 and np.isfinite(dt)):
            raise ConfigError(f"time step must be positive, got {dt}")
        if speed * dt / self.dx > cfl:
            raise ConfigError(
                f"CFL restriction violated: max|a| dt/dx = {speed * dt / self.dx:.3f} > {cfl}")
        return speed * dt / self.dx


@dataclass
class SolverState:
    t: float
    U: np.ndarray


def step(model: ModelSystem, state: SolverState, dt, grid: Grid = None, u_minus=None, u_plus=None,
         forcing=None, solver: FVSolver = None) -> SolverState:
    """Functional wrapper around :meth:`FVSolver.step`."""
    if solver is None:
        if grid is None or u_minus is None or u_plus is None:
            raise ConfigError("step needs a solver or (grid, u_minus, u_plus)")
        solver = FVSolver(model, grid, u_minus, u_plus)
    solver.check_cfl(state.U, dt)
    return SolverState(state.t + dt, solver.step(state.U, state.t, dt, forcing))


# ---------------------------------------------------------------------------
# discrete steady state

FAMILY_SPLINE_DEGREE = 7


@dataclass(frozen=True)
class DiscreteProfile(ShockProfile):
    """Grid steady state whose translates use a high-degree spline.

    Translates of a discrete steady state agree with the steady states of the
    same mass to the interpolation order, so a cubic would leave an
    ``O(dx^4)`` floor in the perturbation.
    """

    def _spline(self):
        spl = self.__dict__.get("_sp")
        if spl is None:
            spl = make_interp_spline(self.x, self.values, k=FAMILY_SPLINE_DEGREE, axis=0)
            object.__setattr__(self, "_sp", spl)
        return spl


def _fd_jacobian(solver: FVSolver, U, h=1e-7):
    """Sparse block-tridiagonal Jacobian of the residual via 3n-coloring."""
    N, n = U.shape
    R0 = solver.residual(U)
    rows, cols, vals = [], [], []
    idx = np.arange(N)
    for color in range(3):
        cells = idx[color::3]
        for c in range(n):
            Up = U.copy()
            Up[cells, c] += h
            dR = (solver.residual(Up) - R0) / h
            for off in (-1, 0, 1):
                tgt = cells + off
                ok = (tgt >= 0) & (tgt < N)
                for r in range(n):
                    rows.append(tgt[ok] * n + r)
                    cols.append(cells[ok] * n + c)
                    vals.append(dR[tgt[ok], r])
    J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N * n, N * n))
    return J, R0


def discrete_profile(model: ModelSystem, profile: ShockProfile, grid: Grid, tol=STEADY_TOL,
                     maxiter=20) -> ShockProfile:
    """Steady state of the discrete scheme near ``profile``, pinned in phase.

    Solves ``R(U) + mu u' = 0`` with ``<U - u, u'> = 0`` by bordered Newton;
    ``mu`` absorbs the exponentially small translation defect of the truncated
    domain.  The result is returned as a :class:`ShockProfile` on the grid.
    """
    x = grid.x
    ends = profile.endstates
    solver = FVSolver(model, grid, ends.u_minus, ends.u_plus)
    U = profile(x)
    dU = profile(x, nu=1)
    N, n = U.shape
    d = dU.ravel()
    dnorm = float(d @ d)
    mu = 0.0
    ref = U.ravel().copy()
    res = np.inf
    for it in range(maxiter):
        J, R = _fd_jacobian(solver, U)
        F = np.concatenate([R.ravel() + mu * d, [(U.ravel() - ref) @ d / dnorm]])
        res = float(np.max(np.abs(F[:-1])))
        if res <= tol:
            break
        K = sp.bmat([[J, sp.csr_matrix(d[:, None])], [sp.csr_matrix(d[None, :] / dnorm), None]], format="csc")
        delta = spsolve(K, -F)
        U = U + delta[:-1].reshape(N, n)
        mu += delta[-1]
    else:
        R = solver.residual(U)
        res = float(np.max(np.abs(R.ravel() + mu * d)))
        if res > 1e3 * tol:
            raise AccuracyError(f"discrete steady state did not converge (residual {res:.2e})")
    deriv = make_interp_spline(x, U, k=FAMILY_SPLINE_DEGREE, axis=0)(x, 1)
    return DiscreteProfile(
        x=x, values=U, derivative=deriv, endstates=ends, alpha=profile.alpha, ell=profile.ell,
        decay_constant=profile.decay_constant, alpha_sides=profile.alpha_sides,
        diagnostics={"discrete": True, "residual": res, "translation_defect": mu,
                     "dx": grid.dx, "half_width": grid.half_width},
    )


# ---------------------------------------------------------------------------
# residual splitting


def _diff(u, dx):
    out = np.empty_like(u)
    out[1:-1] = (u[2:] - u[:-2]) / (2 * dx)
    out[0] = (u[1] - u[0]) / dx
    out[-1] = (u[-1] - u[-2]) / dx
    return out


def nonlinear_residuals(model: ModelSystem, profile: ShockProfile, x, u, u_x, delta, delta_dot, delta_star):
    """Nonlinear fluxes ``Q``, ``R`` and source ``S`` of the perturbation equation.

    With ``v = u(. - delta_star)`` and ``w = u(. - delta_star - delta)`` the
    perturbation ``u`` about ``w`` satisfies ``u_t - L u = (Q + R)_x + S`` where
    ``L`` is linearized about ``v``.  ``R = (A(v) - A(w)) u`` and ``Q`` is the rest of
    the flux difference; at ``delta = 0`` it is the second-order Taylor remainder
    of the flux and viscous terms about ``v``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    u_x = np.asarray(u_x, dtype=float)
    v = profile(x, delta_star)
    vx = profile(x, delta_star, nu=1)
    Av = model.A(v, vx)
    Bv = model.viscosity(v)
    if delta == 0:
        w, wx, Aw = v, vx, Av
    else:
        w = profile(x, delta_star + delta)
        wx = profile(x, delta_star + delta, nu=1)
        Aw = model.A(w, wx)
    mv = lambda M, a: np.einsum("...ij,...j->...i", M, a)
    R = mv(Av - Aw, u)
    # full flux difference about w minus its linearization about v
    full = -(model.flux(w + u) - model.flux(w)) + mv(model.viscosity(w + u), wx + u_x) \
        - mv(model.viscosity(w), wx)
    lin = -mv(Av, u) + mv(Bv, u_x)
    Q = full - lin - R
    if delta == 0 or delta_dot == 0:
        S = np.zeros_like(v)
    else:
        S = delta_dot * (-wx + vx)
    return Q, R, S


# ---------------------------------------------------------------------------
# phase fit


@dataclass
class PhaseFit:
    delta: float
    residual: float
    iterations: int
    converged: bool
    ambiguous: bool


def _phase_weight(profile, x, width=None):
    W = width if width is not None else PHASE_WEIGHT_WIDTHS / (profile.alpha if profile.alpha > 0 else 1.0)
    return np.exp(-np.abs(x) / W), W


def _phase_objective(profile, x, utilde, w, d):
    r = (utilde - profile(x, d)) * w[:, None]
    return 0.5 * float(np.sum(r * r))


def _local_minima(vals):
    inner = np.where((vals[1:-1] < vals[:-2]) & (vals[1:-1] <= vals[2:]))[0] + 1
    return inner


def fit_phase(profile: ShockProfile, x, utilde, guess=0.0, width=None, scan=False, tol=1e-13,
              maxiter=50) -> PhaseFit:
    """Least-squares translate ``argmin_d |(utilde - u(. - d)) w|`` by safeguarded Gauss-Newton."""
    x = np.asarray(x, dtype=float)
    utilde = np.asarray(utilde, dtype=float).reshape(len(x), -1)
    w, W = _phase_weight(profile, x, width)
    w2 = w[:, None] ** 2
    d = float(guess)
    J = _phase_objective(profile, x, utilde, w, d)
    converged = False
    it = 0
    for it in range(1, maxiter + 1):
        diff = utilde - profile(x, d)
        slope = profile(x, d, nu=1)
        g = float(np.sum(w2 * diff * slope))
        hgn = float(np.sum(w2 * slope * slope))
        if hgn <= 0:
            break
        stepd = float(np.clip(-g / hgn, -0.5 * W, 0.5 * W))
        lam = 1.0
        while lam > 1e-6:
            cand = d + lam * stepd
            Jc = _phase_objective(profile, x, utilde, w, cand)
            if Jc <= J * (1 + 1e-14) + 1e-300:
                break
            lam *= 0.5
        d, J = cand, Jc
        if abs(lam * stepd) <= tol * max(1.0, abs(d)):
            converged = True
            break
        if abs(d - guess) > 8 * W:
            break
    ambiguous = not converged
    if scan or not converged:
        grid = d + np.linspace(-4 * W, 4 * W, 81)
        vals = np.array([_phase_objective(profile, x, utilde, w, c) for c in grid])
        mins = _local_minima(vals)
        spread = np.max(vals) - np.min(vals)
        if len(mins) != 1 or spread <= 1e-14 * max(1.0, np.max(vals)):
            ambiguous = True
        elif len(mins) == 1 and np.argmin(vals) in (0, len(vals) - 1):
            ambiguous = True
    if ambiguous:
        warnings.warn(f"phase fit ambiguous near delta={d:.4g}", AmbiguousPhaseWarning, stacklevel=2)
    norm = math.sqrt(max(float(np.sum(w2 * utilde * utilde)), 1e-300))
    return PhaseFit(delta=d, residual=math.sqrt(2 * J) / norm, iterations=it, converged=converged,
                    ambiguous=ambiguous)


def mass_shift(profile: ShockProfile, x, dx, u0, einf_rows, guess=0.0, tol=1e-14):
    """Shift ``d`` with ``sum e(x) . (u + u0 - u(. - d)) dx = 0`` (first row of ``einf_rows``)."""
    base = profile(x)
    rows = einf_rows[:, 0, :] if einf_rows.ndim == 3 else einf_rows
    target = float(np.sum(rows * (base + u0)) * dx)
    d = float(guess)
    for _ in range(50):
        g = float(np.sum(rows * profile(x, d)) * dx) - target
        dg = -float(np.sum(rows * profile(x, d, nu=1)) * dx)
        if dg == 0:
            break
        step_ = -g / dg
        d += step_
        if abs(step_) <= tol:
            break
    return d


# ---------------------------------------------------------------------------
# norms


def weighted_h2_norm(x, u, dx):
    """Discrete ``||(1+x^2)^(-3/4) u||_{H^2}`` with first and second differences."""
    f = (1.0 + x[:, None] ** 2) ** -0.75 * np.asarray(u).reshape(len(x), -1)
    return math.sqrt(h2_energy(f, dx))


def h2_energy(u, dx):
    u = np.asarray(u).reshape(u.shape[0], -1)
    d1 = np.diff(u, axis=0) / dx
    d2 = np.diff(u, n=2, axis=0) / dx ** 2
    return float((np.sum(u * u) + np.sum(d1 * d1) + np.sum(d2 * d2)) * dx)


def lp_norms(u, dx):
    mag = np.linalg.norm(np.asarray(u).reshape(u.shape[0], -1), axis=1)
    return {"L1": float(np.sum(mag) * dx), "L2": float(math.sqrt(np.sum(mag * mag) * dx)),
            "Linf": float(np.max(mag)) if mag.size else 0.0}


def b1_norm(t, h, hdot, t_mid=None):
    """``sup |h|(1+t)^(1/2) + sup |h'|(1+t)`` on samples (rates at ``t_mid`` if given)."""
    t = np.asarray(t, dtype=float)
    tm = t if t_mid is None else np.asarray(t_mid, dtype=float)
    h = np.asarray(h, dtype=float)
    hdot = np.asarray(hdot, dtype=float)
    a = float(np.max(np.abs(h) * np.sqrt(1 + t))) if h.size else 0.0
    b = float(np.max(np.abs(hdot) * (1 + tm))) if hdot.size else 0.0
    return a + b


def pointwise_ratio(bundle, x, t, u, u_x):
    """``(|u| + |u_x|) / (theta + psi1 + psi2)`` at time ``t``."""
    mag = np.linalg.norm(u.reshape(len(x), -1), axis=1) + np.linalg.norm(u_x.reshape(len(x), -1), axis=1)
    tmpl = template_sum(bundle, x, max(t, bundle.t_floor))
    return mag / np.maximum(tmpl, 1e-300)


def b2_norm(bundle, x, t, g, dx):
    """``||g / (theta + psi1 + psi2)||_{W^{1,inf}}`` at one time."""
    tmpl = template_sum(bundle, x, max(t, bundle.t_floor))
    q = np.asarray(g).reshape(len(x), -1) / np.maximum(tmpl, 1e-300)[:, None]
    dq = np.diff(q, axis=0) / dx
    return float(np.max(np.abs(q)) + (np.max(np.abs(dq)) if dq.size else 0.0))


# ---------------------------------------------------------------------------
# simulation trace


@dataclass
class SimulationTrace:
    """Time series of a run around a shock; immutable once the run returns."""

    x: np.ndarray
    dx: float
    times: np.ndarray
    u0: np.ndarray
    E0: float
    delta_star: float
    shift: np.ndarray            # total translate used for u (delta_star + delta)
    delta: np.ndarray
    delta_dot: np.ndarray
    gamma: np.ndarray
    norms: dict                  # L1 / L2 / Linf arrays
    ratio: np.ndarray            # sup_x (|u| + |u_x|) / (E0 template)
    zeta: np.ndarray
    b2: np.ndarray
    energy: dict                 # h2, l2, weighted_h2 arrays
    snapshots: dict              # t -> (utilde, u)
    fit_residual: np.ndarray
    mass_defect: float
    notes: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def b1_phase_norm(self):
        return b1_norm(self.times, self.delta, self.delta_dot)

    def snapshot(self, t):
        keys = np.array(sorted(self.snapshots))
        if keys.size == 0:
            raise KeyError("trace has no snapshots")
        return self.snapshots[float(keys[np.argmin(np.abs(keys - t))])]

    def value_at(self, series, t):
        return float(np.asarray(series)[np.argmin(np.abs(self.times - t))])

    def summary(self):
        return {
            "E0": self.E0, "delta_star": self.delta_star, "t_final": float(self.times[-1]),
            "records": int(len(self.times)), "mass_defect_max": self.mass_defect,
            "zeta_final": float(self.zeta[-1]), "b1_phase_norm": self.b1_phase_norm(),
            "b2_sup": float(np.max(self.b2)) if self.b2.size else 0.0,
            "notes": list(self.notes), **self.meta,
        }


class _Recorder:
    def __init__(self, base: ShockProfile, bundle: TemplateBundle, x, dx, E0, snapshot_times, dt):
        self.base = base
        self.bundle = bundle
        self.x = x
        self.dx = dx
        self.E0 = E0
        self.pending = sorted(float(s) for s in snapshot_times)
        self.tol = 0.5 * dt
        self.rows = {k: [] for k in ("t", "shift", "L1", "L2", "Linf", "raw_ratio", "b2",
                                     "h2", "l2", "weighted_h2", "fit_residual")}
        self.snapshots = {}

    def record(self, t, Utilde, shift, fit_residual=0.0):
        x, dx = self.x, self.dx
        u = Utilde - self.base(x, shift)
        ux = _diff(u, dx)
        r = self.rows
        r["t"].append(t)
        r["shift"].append(shift)
        for k, v in lp_norms(u, dx).items():
            r[k].append(v)
        r["raw_ratio"].append(float(np.max(pointwise_ratio(self.bundle, x, t, u, ux))))
        r["b2"].append(b2_norm(self.bundle, x, t, u, dx))
        r["h2"].append(h2_energy(u, dx))
        r["l2"].append(float(np.sum(u * u) * dx))
        r["weighted_h2"].append(weighted_h2_norm(x, u, dx) ** 2)
        r["fit_residual"].append(fit_residual)
        while self.pending and self.pending[0] <= t + self.tol:
            s = self.pending.pop(0)
            if abs(s - t) <= self.tol:
                self.snapshots[float(t)] = (Utilde.copy(), u.copy())
        return u

    def arrays(self):
        return {k: np.asarray(v, dtype=float) for k, v in self.rows.items()}


def _perturbation_values(perturbation, x, n):
    if callable(perturbation):
        vals = np.asarray(perturbation(x), dtype=float)
    else:
        vals = np.asarray(perturbation, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None] * np.ones(n)[None, :] if vals.shape[0] == len(x) else np.broadcast_to(vals, (len(x), n))
    if vals.shape != (len(x), n):
        raise ConfigError(f"perturbation has shape {vals.shape}, expected {(len(x), n)}")
    return np.array(vals)


def default_half_width(bundle: TemplateBundle, t_max, margin=20.0):
    """Half width keeping outgoing diffusion waves well inside the domain over the horizon."""
    out = np.concatenate([bundle.outgoing_minus, bundle.outgoing_plus])
    if out.size == 0:
        return max(30.0, margin + 10.0)
    beta = float(np.max(np.concatenate([bundle.beta_minus, bundle.beta_plus])))
    return float(np.max(np.abs(out)) * t_max + 9.0 * math.sqrt(beta * t_max) + margin)


def _horizon_notes(bundle, grid, t_max):
    notes = []
    out = np.concatenate([bundle.outgoing_minus, bundle.outgoing_plus])
    if out.size:
        beta = float(np.max(np.concatenate([bundle.beta_minus, bundle.beta_plus])))
        front = float(np.max(np.abs(out)) * t_max + 4.0 * math.sqrt(4 * beta * t_max))
        if front > grid.half_width:
            msg = f"outgoing waves reach the boundary before t={t_max:g} (front {front:.1f} > {grid.half_width:.1f})"
            warnings.warn(msg, HorizonWarning, stacklevel=3)
            notes.append(msg)
    ts = np.linspace(max(t_max / 50, 1.0), t_max, 50)
    edge = max(float(np.max(template_sum(bundle, np.array([-grid.half_width, grid.half_width]), t)))
               for t in ts)
    return notes, edge


def simulate(model: ModelSystem, profile: ShockProfile, perturbation, t_max, dt, dx=0.1,
             half_width=None, record_every=1.0, snapshot_times=(), bundle: TemplateBundle = None,
             base: ShockProfile = None, cfl=CFL_MAX, on_blowup="raise") -> SimulationTrace:
    """Evolve ``u_bar + u0`` and track the least-squares phase.

    ``u = utilde - u_bar(. - delta_fit(t))`` with the fitted translate; the
    asymptotic shift is the conserved-mass shift against the bounded adjoint
    zero modes.  ``on_blowup="truncate"`` returns the partial trace instead of
    raising.
    """
    if bundle is None:
        bundle = template_bundle(model, profile)
    if half_width is None:
        half_width = default_half_width(bundle, t_max)
    grid = make_grid(half_width, dx)
    x = grid.x
    if base is None:
        base = discrete_profile(model, profile, grid)
    ends = base.endstates
    solver = FVSolver(model, grid, ends.u_minus, ends.u_plus)
    u0 = _perturbation_values(perturbation, x, model.n)
    E0 = weighted_h2_norm(x, u0, grid.dx)
    einf = bundle.einf if bundle.einf is not None else e_infinity(model, profile)
    d_star = mass_shift(base, x, grid.dx, u0, einf(x))
    U = base(x) + u0
    solver.check_cfl(U, dt, cfl)
    notes, edge_template = _horizon_notes(bundle, grid, t_max)
    steps = int(round(t_max / dt))
    every = max(1, int(round(record_every / dt)))
    rec = _Recorder(base, bundle, x, grid.dx, E0, snapshot_times, dt)
    fit = fit_phase(base, x, U, guess=d_star, scan=True)
    rec.record(0.0, U, fit.delta, fit.residual)
    mass_defect = 0.0
    blowup = None
    for k in range(steps):
        t = k * dt
        try:
            Un = solver.step(U, t, dt)
        except BlowUpError as exc:
            if on_blowup != "truncate":
                raise
            blowup = str(exc)
            break
        mass_defect = max(mass_defect, abs(float(np.sum(Un - U) * grid.dx - np.sum(solver.last_boundary_flux))))
        U = Un
        if (k + 1) % every == 0 or k + 1 == steps:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", AmbiguousPhaseWarning)
                fit = fit_phase(base, x, U, guess=fit.delta)
            if fit.ambiguous:
                notes.append(f"ambiguous phase fit at t={(k + 1) * dt:.4g}")
            rec.record((k + 1) * dt, U, fit.delta, fit.residual)
    arr = rec.arrays()
    times = arr["t"]
    shift = arr["shift"]
    delta = shift - d_star
    ddot = np.gradient(delta, times) if len(times) > 1 else np.zeros_like(delta)
    zeta = np.maximum.accumulate(arr["raw_ratio"] + np.abs(ddot) * (1 + times))
    meta = {"model": model.name, "dt": dt, "dx": grid.dx, "half_width": grid.half_width,
            "cells": grid.cells, "t_max": t_max, "record_every": every * dt,
            "boundary_template_max": edge_template, "steady_state": base.diagnostics,
            "backend": _backend(), "blowup": blowup}
    if edge_template > BOUNDARY_TEMPLATE_TOL:
        notes.append(f"template at the boundary reaches {edge_template:.2e}")
    return SimulationTrace(
        x=x, dx=grid.dx, times=times, u0=u0, E0=E0, delta_star=d_star, shift=shift, delta=delta,
        delta_dot=ddot, gamma=np.zeros_like(times),
        norms={"L1": arr["L1"], "L2": arr["L2"], "Linf": arr["Linf"]},
        ratio=arr["raw_ratio"] / E0 if E0 > 0 else arr["raw_ratio"] * 0.0, zeta=zeta, b2=arr["b2"],
        energy={"h2": arr["h2"], "l2": arr["l2"], "weighted_h2": arr["weighted_h2"]},
        snapshots=rec.snapshots, fit_residual=arr["fit_residual"], mass_defect=mass_defect,
        notes=notes, meta=meta,
    )


def _backend():
    from ._accel import backend_name
    return backend_name()


def extract_phase(trace: SimulationTrace, profile: ShockProfile, t, scan=True) -> PhaseFit:
    """Least-squares phase of the stored snapshot nearest ``t``."""
    utilde, _ = trace.snapshot(t)
    return fit_phase(profile, trace.x, utilde, guess=trace.value_at(trace.shift, t), scan=scan)


# ---------------------------------------------------------------------------
# decay and energy reports


LP_RATES = {"L1": 0.0, "L2": -0.25, "Linf": -0.5}


@dataclass
class DecayReport:
    window: tuple
    slopes: dict
    expected: dict
    slope_errors: dict
    sharp_rates_expected: bool
    upper_constants: dict
    ratio_sup: float
    ratio_at: dict
    late_growth_ok: bool
    delta_dot_sup: float
    delta_dot_argmax: float
    delta_sup: float
    delta_argmax: float
    delta_star: float
    delta_star_over_E0: float
    E0: float

    def slopes_within(self, tol=0.1):
        return all(abs(v) <= tol for v in self.slope_errors.values())

    def phase_sups_before(self, t_limit=50.0):
        return self.delta_dot_argmax <= t_limit and self.delta_argmax <= t_limit

    def to_dict(self):
        return {
            "lp_slope_check": {"window": list(self.window), "slopes": self.slopes,
                               "expected": self.expected, "errors": self.slope_errors,
                               "sharp_rates_expected": self.sharp_rates_expected,
                               "upper_bound_constants": self.upper_constants},
            "pointwise_template_check": {"sup_ratio": self.ratio_sup, "ratio_at": self.ratio_at,
                                         "late_growth_ok": self.late_growth_ok},
            "phase_rate_check": {"sup_delta_dot_weighted": self.delta_dot_sup,
                                 "argmax_delta_dot": self.delta_dot_argmax,
                                 "sup_delta_weighted": self.delta_sup, "argmax_delta": self.delta_argmax},
            "asymptotic_shift_check": {"delta_star": self.delta_star,
                                       "delta_star_over_E0": self.delta_star_over_E0, "E0": self.E0},
        }


def _loglog_slope(t, y):
    mask = (t > 0) & (y > 0)
    if np.count_nonzero(mask) < 3:
        return float("nan")
    return float(np.polyfit(np.log(t[mask]), np.log(y[mask]), 1)[0])


def verify_decay(trace: SimulationTrace, bundle: TemplateBundle = None, window=None,
                 ratio_times=(20.0, 200.0), late_factor=2.0) -> DecayReport:
    t = trace.times
    t_max = float(t[-1])
    if window is None:
        window = (0.1 * t_max, t_max)
    sel = (t >= window[0] - 1e-9) & (t <= window[1] + 1e-9)
    slopes = {k: _loglog_slope(t[sel], trace.norms[k][sel]) for k in LP_RATES}
    errors = {k: slopes[k] - LP_RATES[k] for k in LP_RATES}
    sharp = True
    if bundle is not None:
        sharp = bool(bundle.outgoing_minus.size + bundle.outgoing_plus.size)
    E0 = trace.E0 if trace.E0 > 0 else 1.0
    upper = {k: float(np.max(trace.norms[k] / (E0 * (1 + t) ** LP_RATES[k]))) for k in LP_RATES}
    late = t >= 1.0
    ratio_sup = float(np.max(trace.ratio[late])) if np.any(late) else float(np.max(trace.ratio))
    ratio_at = {f"{s:g}": trace.value_at(trace.ratio, s) for s in ratio_times if s <= t_max + 1e-9}
    vals = list(ratio_at.values())
    late_ok = len(vals) < 2 or vals[-1] <= late_factor * vals[0]
    wd = np.abs(trace.delta_dot) * (1 + t)
    wdl = np.abs(trace.delta) * np.sqrt(1 + t)
    return DecayReport(
        window=tuple(float(w) for w in window), slopes=slopes, expected=dict(LP_RATES),
        slope_errors=errors, sharp_rates_expected=sharp, upper_constants=upper,
        ratio_sup=ratio_sup, ratio_at=ratio_at, late_growth_ok=bool(late_ok),
        delta_dot_sup=float(np.max(wd)), delta_dot_argmax=float(t[np.argmax(wd)]),
        delta_sup=float(np.max(wdl)), delta_argmax=float(t[np.argmax(wdl)]),
        delta_star=trace.delta_star, delta_star_over_E0=abs(trace.delta_star) / E0, E0=trace.E0,
    )


@dataclass
class EnergyReport:
    feasible: bool
    damping_failure: bool
    C: float
    theta2: float
    crude_M: float
    crude_feasible: bool
    ratio_growth: float
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return {"energy_estimate_check": {"feasible": self.feasible, "damping_failure": self.damping_failure,
                                          "C": self.C, "theta2": self.theta2,
                                          "ratio_growth": self.ratio_growth},
                "crude_energy_check": {"M": self.crude_M, "feasible": self.crude_feasible},
                **self.detail}


def _damped_integral(t, g, rate):
    """``int_0^t exp(-rate (t - s)) g(s) ds`` by the trapezoid rule on the samples."""
    out = np.zeros_like(t)
    for i in range(1, len(t)):
        h = t[i] - t[i - 1]
        decay = math.exp(-rate * h)
        out[i] = out[i - 1] * decay + 0.5 * h * (g[i - 1] * decay + g[i])
    return out


def _growth(ratio):
    k = len(ratio)
    if k < 3:
        return 1.0
    split = max(1, (2 * k) // 3)
    early = float(np.max(ratio[:split]))
    late = float(np.max(ratio[split:]))
    if late == 0:
        return 0.0
    return late / early if early > 0 else float("inf")


def energy_monitor(trace: SimulationTrace, rates=None, growth_limit=1.5, crude_limit=1e3) -> EnergyReport:
    """Fit the damped energy inequality and the crude exponential envelope on a trace."""
    t = trace.times
    lhs = trace.energy["h2"]
    src = trace.energy["l2"] + trace.delta_dot ** 2 + trace.gamma ** 2
    failed = bool(trace.meta.get("blowup"))
    if np.all(lhs == 0) and np.all(src == 0):
        return EnergyReport(True, False, 0.0, 1.0, 0.0, True, 0.0, {"trivial": True})
    if rates is None:
        rates = np.geomspace(10.0, 1e-3, 41)
    best = None
    growth_at = {}
    for rate in rates:
        rhs = np.exp(-rate * t) * lhs[0] + _damped_integral(t, src, rate)
        ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), np.where(lhs > 0, np.inf, 0.0))
        if not np.all(np.isfinite(ratio)):
            continue
        g = _growth(ratio)
        growth_at[float(rate)] = g
        if g <= growth_limit:
            best = (float(rate), float(max(np.max(ratio), 1e-300)), g)
            break
    feasible = best is not None and not failed
    # crude bound  ||w u||^2 <= M e^{M t} (E0^2 + int delta_dot^2 + gamma^2)
    wl = trace.energy["weighted_h2"]
    srcc = _damped_integral(t, trace.delta_dot ** 2 + trace.gamma ** 2, 0.0) + trace.E0 ** 2

    def holds(M):
        return bool(np.all(wl <= M * np.exp(np.minimum(M * t, 700.0)) * srcc * (1 + 1e-9) + 1e-300))

    lo, hi = 1e-8, crude_limit
    crude_ok = holds(hi) and not failed
    if crude_ok:
        for _ in range(80):
            mid = math.sqrt(lo * hi)
            if holds(mid):
                hi = mid
            else:
                lo = mid
    growth = best[2] if best else (min(growth_at.values()) if growth_at else float("inf"))
    return EnergyReport(
        feasible=feasible, damping_failure=not feasible, C=best[1] if best else float("inf"),
        theta2=best[0] if best else float("nan"), crude_M=hi if crude_ok else float("inf"),
        crude_feasible=crude_ok, ratio_growth=growth,
        detail={"blowup": trace.meta.get("blowup")},
    )


# ---------------------------------------------------------------------------
# persistence


def _fmt(v):
    return f"{v:.17g}"


def trace_timeseries_csv(trace: SimulationTrace, path=None):
    cols = ["t", "delta", "delta_dot", "delta_star", "gamma", "L1", "L2", "Linf", "ratio", "zeta",
            "b2", "energy_h2", "energy_l2", "energy_weighted_h2", "fit_residual"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for i, t in enumerate(trace.times):
        w.writerow([_fmt(v) for v in (
            t, trace.delta[i], trace.delta_dot[i], trace.delta_star, trace.gamma[i],
            trace.norms["L1"][i], trace.norms["L2"][i], trace.norms["Linf"][i], trace.ratio[i],
            trace.zeta[i], trace.b2[i], trace.energy["h2"][i], trace.energy["l2"][i],
            trace.energy["weighted_h2"][i], trace.fit_residual[i])])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def snapshot_csv(trace: SimulationTrace, t, path=None):
    utilde, u = trace.snapshot(t)
    n = utilde.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x"] + [f"utilde{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(n)])
    for i, x in enumerate(trace.x):
        w.writerow([_fmt(x)] + [_fmt(v) for v in utilde[i]] + [_fmt(v) for v in u[i]])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def write_trace(trace: SimulationTrace, outdir, prefix="trace", manifest_extra=None):
    """Write the time series, one CSV per snapshot and a JSON manifest; returns the paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = {"timeseries": os.path.join(outdir, f"{prefix}_timeseries.csv")}
    trace_timeseries_csv(trace, paths["timeseries"])
    snaps = []
    for t in sorted(trace.snapshots):
        p = os.path.join(outdir, f"{prefix}_snapshot_t{t:g}.csv")
        snapshot_csv(trace, t, p)
        snaps.append(os.path.basename(p))
    manifest = {"summary": trace.summary(), "snapshots": snaps, **(manifest_extra or {})}
    paths["manifest"] = os.path.join(outdir, f"{prefix}_manifest.json")
    with open(paths["manifest"], "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
    return paths


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return str(obj)


# ---------------------------------------------------------------------------
# fixed-point phase iteration
#
# Sign conventions: u^n = utilde^n - u_bar(. - s - delta^{n-1}(t)) with s the
# previous asymptotic shift, so that
#     u_t = L u + (Q + R)_x - S - delta_dot^n d_delta u_bar|_s
# once the forcing (delta_dot^n - delta_dot^{n-1}) u_bar'(. - s) is added.  With
#     Phi(t) = int e(t) u0 - int_0^t int e(t - s') S - int_0^t int e_y(t - s') (Q + R)
# the choice delta^n = Phi - Phi(inf), s^n = s + Phi(inf) removes the
# translational part of the solution exactly.

TABLE_GL_NODES = 3
FIRST_PANEL_NODES = 6
TAIL_DECADE = 10.0
TABLE_MEMORY_LIMIT = 2e9


@dataclass
class PhaseHistory:
    """Phase values at the step times and piecewise-constant rates on the steps."""

    t: np.ndarray
    values: np.ndarray
    rates: np.ndarray

    @classmethod
    def zero(cls, t):
        t = np.asarray(t, dtype=float)
        return cls(t, np.zeros_like(t), np.zeros(len(t) - 1))

    @classmethod
    def from_function(cls, t, f):
        t = np.asarray(t, dtype=float)
        v = np.asarray(f(t), dtype=float)
        return cls(t, v, np.diff(v) / np.diff(t))

    @property
    def t_mid(self):
        return 0.5 * (self.t[:-1] + self.t[1:])

    def b1(self):
        return b1_norm(self.t, self.values, self.rates, self.t_mid)

    def __sub__(self, other):
        return PhaseHistory(self.t, self.values - other.values, self.rates - other.rates)


def star_norm(d_delta: PhaseHistory, d_star, weight=1.0):
    """``|d_delta|_{B1} + weight |d_star|`` on the sampled horizon."""
    return d_delta.b1() + weight * abs(float(d_star))


class PhaseKernelTables:
    """Time-integrated cell moments of the phase kernel on a fixed grid and step.

    Row ``k`` of ``cell`` holds ``int_{t_{k-1}}^{t_k} int_cell e(y, tau) dy dtau``
    and row ``k`` of ``edge`` the same time integral of the edge jumps
    ``e(y_{i+1/2}, tau) - e(y_{i-1/2}, tau)``; ``value[k]`` is the cell integral at
    ``t_k`` itself.  Rows depend only on ``k``, so truncating the horizon leaves the
    earlier rows untouched.
    """

    def __init__(self, bundle: TemplateBundle, grid: Grid, dt, steps):
        if bundle.ell != 1:
            raise NotImplementedError("phase tables are implemented for a single zero mode")
        N, n = grid.cells, bundle.n
        need = 3.0 * (steps + 1) * N * n * 8
        if need > TABLE_MEMORY_LIMIT:
            raise ConfigError(f"phase tables would need {need / 1e9:.1f} GB; reduce horizon or grid")
        self.bundle, self.grid, self.dt, self.steps = bundle, grid, float(dt), int(steps)
        edges = grid.edges
        self._y0, self._y1 = edges[:-1], edges[1:]
        self._edges = edges
        self.value = np.zeros((steps + 1, N * n))
        self.cell = np.zeros((steps + 1, N * n))
        self.edge = np.zeros((steps + 1, N * n))
        gl_x, gl_w = np.polynomial.legendre.leggauss(TABLE_GL_NODES)
        fx, fw = np.polynomial.legendre.leggauss(FIRST_PANEL_NODES)
        for k in range(1, steps + 1):
            self.value[k] = self._cell(k * dt)
            if k == 1:
                # tau = dt v^2 resolves the sqrt(tau) onset
                v = 0.5 * (fx + 1)
                nodes, weights = dt * v ** 2, 0.5 * fw * 2 * dt * v
            else:
                nodes = (k - 1) * dt + 0.5 * dt * (gl_x + 1)
                weights = 0.5 * dt * gl_w
            for tau, w in zip(nodes, weights):
                self.cell[k] += w * self._cell(tau)
                self.edge[k] += w * self._jump(tau)
        lim = bundle_limit_rows(bundle, grid.x)
        self.cell_limit = (lim * grid.dx).reshape(-1)
        elim = bundle_limit_rows(bundle, edges)
        zero = edges == 0
        if np.any(zero):
            elim[zero] = 0.5 * (bundle_limit_rows(bundle, np.array([-1.0]))[0]
                                + bundle_limit_rows(bundle, np.array([1.0]))[0])
        self.edge_limit = (elim[1:] - elim[:-1]).reshape(-1)

    def _cell(self, tau):
        from .templates import e_cell_integral
        return e_cell_integral(self.bundle, self._y0, self._y1, tau)[:, 0, :].reshape(-1)

    def _jump(self, tau):
        from .templates import e_edge_values
        ev_ = e_edge_values(self.bundle, self._edges, tau)[:, 0, :]
        return (ev_[1:] - ev_[:-1]).reshape(-1)


def bundle_limit_rows(bundle: TemplateBundle, y):
    from .templates import e_limit
    return e_limit(bundle, np.asarray(y, dtype=float))[:, 0, :]


def _tail(times, g, decade=TAIL_DECADE, floor=1e-14):
    """Extrapolate ``int_T^inf g`` from an algebraic fit over the last decade.

    Returns ``(tail, exponent)``; the exponent ``p`` in ``|g| ~ s^-p`` must exceed 1
    for the tail to converge.
    """
    times = np.asarray(times, dtype=float)
    g = np.asarray(g, dtype=float)
    T = times[-1]
    scale = float(np.max(np.abs(g))) if g.size else 0.0
    sel = times >= T / decade
    last = np.abs(g[sel])
    if scale == 0 or np.max(last) <= floor * max(scale, 1.0):
        return 0.0, float("inf")
    mask = last > 0
    if np.count_nonzero(mask) < 3:
        return 0.0, float("inf")
    p = -float(np.polyfit(np.log(times[sel][mask]), np.log(last[mask]), 1)[0])
    if p <= 1.0:
        return float("nan"), p
    return float(g[-1] * T / (p - 1.0)), p


@dataclass
class PhaseIntegrals:
    phi: np.ndarray          # Phi(t_k), k = 0..K
    phi_inf: float
    tail: float
    tail_exponent: float
    tail_parts: dict


def phase_integrals(tables: PhaseKernelTables, u0_cells, S_hist, N_hist) -> PhaseIntegrals:
    """Assemble ``Phi(t_k)`` and ``Phi(inf)`` from piecewise-constant data histories.

    ``u0_cells`` is ``(N, n)``; ``S_hist`` and ``N_hist`` are ``(K, N, n)`` with step ``m``
    holding the data on ``[t_m, t_{m+1})``.
    """
    K = S_hist.shape[0]
    S = np.ascontiguousarray(S_hist.reshape(K, -1))
    Nf = np.ascontiguousarray(N_hist.reshape(K, -1))
    u0 = np.asarray(u0_cells).reshape(-1)
    phi = np.zeros(K + 1)
    for k in range(1, K + 1):
        phi[k] = (float(tables.value[k] @ u0) - kernels.causal_conv(tables.cell, S, k)
                  - kernels.causal_conv(tables.edge, Nf, k))
    return _phase_limit(tables, u0, S, Nf, phi)


def _phase_limit(tables, u0, S, Nf, phi):
    dt = tables.dt
    gS = S @ tables.cell_limit
    gN = Nf @ tables.edge_limit
    times = dt * np.arange(S.shape[0])
    tS, pS = _tail(times, gS)
    tN, pN = _tail(times, gN)
    tail = tS + tN
    exponent = min(pS, pN)
    phi_inf = float(u0 @ tables.cell_limit) - dt * float(np.sum(gS)) - dt * float(np.sum(gN)) - tail
    return PhaseIntegrals(phi=phi, phi_inf=phi_inf, tail=tail, tail_exponent=exponent,
                          tail_parts={"source": tS, "flux": tN, "source_exponent": pS, "flux_exponent": pN})


def rate_consistency(bundle: TemplateBundle, grid: Grid, dt, u0_cells, S_hist, N_hist, rates, steps):
    """Compare the tabulated step rates with the differentiated phase formula.

    The instantaneous rate at the step midpoint is evaluated pointwise (cell
    midpoint rule in space, exact in time); returns the largest deviation
    relative to ``max|rate|``.
    """
    from .templates import e_kernel
    x = grid.x
    dx = grid.dx
    scale = max(float(np.max(np.abs(rates))), 1e-300)
    worst = 0.0
    out = {}
    for m in steps:
        tau = (m + 0.5) * dt
        val = float(np.sum(e_kernel(bundle, x, tau, "t")[:, 0, :] * u0_cells) * dx)
        for mp in range(m + 1):
            a = tau - mp * dt
            b = max(tau - (mp + 1) * dt, 0.0)
            de = e_kernel(bundle, x, a)[:, 0, :] - (e_kernel(bundle, x, b)[:, 0, :] if b > 0 else 0.0)
            dey = e_kernel(bundle, x, a, "y")[:, 0, :] - (e_kernel(bundle, x, b, "y")[:, 0, :] if b > 0 else 0.0)
            val -= float(np.sum(de * S_hist[mp]) * dx) + float(np.sum(dey * N_hist[mp]) * dx)
        dev = abs(val - rates[m]) / scale
        out[f"{tau:g}"] = {"pointwise": val, "tabulated": float(rates[m]), "relative_deviation": dev}
        worst = max(worst, dev)
    return worst, out


@dataclass
class IterationRecord:
    n: int
    delta_prev: PhaseHistory
    delta_star_prev: float
    delta: PhaseHistory
    delta_star: float
    trace: SimulationTrace
    diff_delta_b1: float
    diff_star: float
    star_norm: float
    tail: dict
    consistency: dict
    alpha_hat: Optional[float] = None

    @property
    def delta_at_zero(self):
        return float(self.delta.values[0])

    def to_dict(self):
        return {
            "n": self.n, "delta_star_prev": self.delta_star_prev, "delta_star": self.delta_star,
            "delta_at_zero": self.delta_at_zero, "delta_at_horizon": float(self.delta.values[-1]),
            "phase_b1_norm": self.delta.b1(), "diff_delta_b1": self.diff_delta_b1,
            "diff_delta_star": self.diff_star, "star_norm_of_difference": self.star_norm,
            "alpha_hat": self.alpha_hat, "tail": self.tail, "consistency": self.consistency,
            "zeta_final": float(self.trace.zeta[-1]), "E0": self.trace.E0,
        }


class PhaseIteration:
    """Fixed grid, step and kernel tables for repeated phase-iteration sweeps."""

    def __init__(self, model: ModelSystem, profile: ShockProfile, bundle: TemplateBundle, perturbation,
                 t_max, dt, dx=0.1, half_width=None, record_every=1.0, e0_guard=1e-2, zeta_guard=0.5,
                 star_weight=1.0, consistency_samples=4, cfl=CFL_MAX):
        self.model, self.profile, self.bundle = model, profile, bundle
        if half_width is None:
            half_width = default_half_width(bundle, t_max)
        self.grid = make_grid(half_width, dx)
        self.dt = float(dt)
        self.steps = int(round(t_max / dt))
        self.t = self.dt * np.arange(self.steps + 1)
        self.every = max(1, int(round(record_every / dt)))
        self.e0_guard, self.zeta_guard, self.star_weight = e0_guard, zeta_guard, star_weight
        self.consistency_samples = consistency_samples
        x = self.grid.x
        self.base = discrete_profile(model, profile, self.grid)
        self.solver = FVSolver(model, self.grid, self.base.endstates.u_minus, self.base.endstates.u_plus)
        self.u0 = _perturbation_values(perturbation, x, model.n)
        self.utilde0 = self.base(x) + self.u0
        self.E0 = weighted_h2_norm(x, self.u0, self.grid.dx)
        self.solver.check_cfl(self.utilde0, self.dt, cfl)
        self._tables = None
        self.notes, self.edge_template = _horizon_notes(bundle, self.grid, t_max)

    @property
    def tables(self):
        if self._tables is None:
            self._tables = PhaseKernelTables(self.bundle, self.grid, self.dt, self.steps)
        return self._tables

    def zero_seed(self):
        return PhaseHistory.zero(self.t), 0.0

    def __call__(self, previous, n=1) -> IterationRecord:
        return self.sweep(previous, n)

    def sweep(self, previous, n=1) -> IterationRecord:
        """One application of the phase map to ``previous = (delta^{n-1}, s^{n-1})``."""
        from .errors import IterationAbort
        prev, s = previous
        if self.E0 > self.e0_guard:
            raise IterationAbort(f"E0 = {self.E0:.3e} exceeds the small-data guard {self.e0_guard:g}",
                                 {"E0": self.E0})
        tables = self.tables
        x, dx, dt, K = self.grid.x, self.grid.dx, self.dt, self.steps
        base, model, bundle = self.base, self.model, self.bundle
        n_comp = model.n
        u0 = self.utilde0 - base(x, s)
        U = self.utilde0 + base(x, s + prev.values[0]) - base(x, s)
        slope_s = base(x, s, nu=1)
        u0f = u0.reshape(-1)
        S_hist = np.zeros((K, x.size, n_comp))
        N_hist = np.zeros((K, x.size, n_comp))
        phi = np.zeros(K + 1)
        rates = np.zeros(K)
        rec = _Recorder(base, bundle, x, dx, self.E0, (), dt)
        zeta_raw = []
        rec_idx = []
        for m in range(K):
            t = m * dt
            shift = s + prev.values[m]
            w = base(x, shift)
            u = U - w
            ux = _diff(u, dx)
            Q, R, Sm = nonlinear_residuals(model, base, x, u, ux, prev.values[m], prev.rates[m], s)
            S_hist[m] = Sm
            N_hist[m] = Q + R
            phi[m + 1] = (float(tables.value[m + 1] @ u0f)
                          - kernels.causal_conv(tables.cell, S_hist.reshape(K, -1), m + 1)
                          - kernels.causal_conv(tables.edge, N_hist.reshape(K, -1), m + 1))
            rates[m] = (phi[m + 1] - phi[m]) / dt
            if m % self.every == 0:
                rec.record(t, U, shift)
                raw = rec.rows["raw_ratio"][-1] + abs(rates[m]) * (1 + t)
                zeta_raw.append(raw)
                rec_idx.append(m)
                if max(zeta_raw) > self.zeta_guard:
                    raise IterationAbort(f"zeta = {max(zeta_raw):.3e} left the small-data regime at t={t:g}",
                                         {"t": t, "zeta": max(zeta_raw), "E0": self.E0})
            forcing = (rates[m] - prev.rates[m]) * slope_s
            try:
                U = self.solver.step(U, t, dt, forcing)
            except BlowUpError as exc:
                raise IterationAbort(str(exc), {"t": t, "E0": self.E0}) from exc
        rec.record(K * dt, U, s + prev.values[K])
        rec_idx.append(K)
        zeta_raw.append(rec.rows["raw_ratio"][-1] + abs(rates[-1]) * (1 + K * dt))
        ints = _phase_limit(tables, u0f, S_hist.reshape(K, -1), N_hist.reshape(K, -1), phi)
        if not np.isfinite(ints.tail):
            raise IterationAbort(
                f"phase integrand decays too slowly for tail extrapolation (exponent {ints.tail_exponent:.3f})",
                {"tail_exponent": ints.tail_exponent})
        new = PhaseHistory(self.t.copy(), phi - ints.phi_inf, rates)
        s_new = s + ints.phi_inf
        picks = np.unique(np.linspace(0, K - 1, self.consistency_samples + 2).astype(int)[1:-1])
        worst, detail = rate_consistency(bundle, self.grid, dt, u0, S_hist, N_hist, rates, picks)
        arr = rec.arrays()
        idx = np.asarray(rec_idx)
        dd = new - prev
        d_star = s_new - s
        rd = np.append(new.rates, new.rates[-1])[idx]
        trace = SimulationTrace(
            x=x, dx=dx, times=arr["t"], u0=u0, E0=self.E0, delta_star=s_new, shift=arr["shift"],
            delta=new.values[idx], delta_dot=rd,
            gamma=np.append(new.rates - prev.rates, 0.0)[idx],
            norms={"L1": arr["L1"], "L2": arr["L2"], "Linf": arr["Linf"]},
            ratio=arr["raw_ratio"] / self.E0 if self.E0 > 0 else arr["raw_ratio"] * 0,
            zeta=np.maximum.accumulate(np.asarray(zeta_raw)), b2=arr["b2"],
            energy={"h2": arr["h2"], "l2": arr["l2"], "weighted_h2": arr["weighted_h2"]},
            snapshots={}, fit_residual=arr["fit_residual"], mass_defect=0.0, notes=list(self.notes),
            meta={"model": model.name, "dt": dt, "dx": dx, "half_width": self.grid.half_width,
                  "iteration": n, "boundary_template_max": self.edge_template},
        )
        return IterationRecord(
            n=n, delta_prev=prev, delta_star_prev=s, delta=new, delta_star=s_new, trace=trace,
            diff_delta_b1=dd.b1(), diff_star=abs(d_star),
            star_norm=star_norm(dd, d_star, self.star_weight),
            tail={"extrapolated": ints.tail, "exponent": ints.tail_exponent, **ints.tail_parts},
            consistency={"max_relative_deviation": worst, "samples": detail},
        )

    def run(self, seed=None, n_max=5, tol=1e-10):
        """Iterate from ``seed`` until the star-norm change drops below ``tol``."""
        cur = self.zero_seed() if seed is None else seed
        out = []
        for n in range(1, n_max + 1):
            rec = self.sweep(cur, n)
            out.append(rec)
            cur = (rec.delta, rec.delta_star)
            if rec.star_norm <= tol:
                break
        return out


def iterate_T(model, profile, bundle, perturbation, previous=None, setup: PhaseIteration = None, n=1,
              **kwargs) -> IterationRecord:
    """One sweep of the phase map; builds a :class:`PhaseIteration` unless one is given."""
    if setup is None:
        setup = PhaseIteration(model, profile, bundle, perturbation, **kwargs)
    if previous is None:
        previous = setup.zero_seed()
    return setup.sweep(previous, n)


def contraction_ratios(records_a, records_b, weight=1.0, seeds=None, floor_rel=1e-12):
    """Star-norm ratios between successive iterate pairs of two runs.

    ``seeds`` is the pair of starting points; entry ``k`` compares the pair after
    sweep ``k + 1`` with the pair before it.  Once a pair difference falls below
    ``floor_rel`` times the size of the iterates it is at rounding level, the
    ratio is no longer measurable and is reported as ``None``.
    """
    pairs = []
    sizes = []
    if seeds is not None:
        (da, sa), (db, sb) = seeds
        pairs.append(star_norm(da - db, sa - sb, weight))
        sizes += [star_norm(da, sa, weight), star_norm(db, sb, weight)]
    for ra, rb in zip(records_a, records_b):
        pairs.append(star_norm(ra.delta - rb.delta, ra.delta_star - rb.delta_star, weight))
        sizes += [star_norm(ra.delta, ra.delta_star, weight), star_norm(rb.delta, rb.delta_star, weight)]
    floor = floor_rel * max(sizes + [1e-300])
    ratios = [pairs[k + 1] / pairs[k] if pairs[k] > floor else None for k in range(len(pairs) - 1)]
    offset = 0 if seeds is not None else 1
    for k, ratio in enumerate(ratios):
        records_a[k + offset].alpha_hat = ratio
        records_b[k + offset].alpha_hat = ratio
    return ratios, pairs, floor
