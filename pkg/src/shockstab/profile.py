"""Standing viscous shock profiles.

The profile ODE ``B(u) u' = F(u) - F(u_-)`` is reduced to the viscous
components ``u2`` (the hyperbolic block is slaved through the algebraic
constraint ``F1(u1, u2) = F1(u_-)``), then solved by shooting from both
rest points toward a phase point at ``x = 0``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline

from .errors import (
    AccuracyError,
    DecayError,
    HypothesisError,
    NoProfileError,
    NumericalError,
    ReductionError,
)
from .models import ModelSystem, ShockEndstates, classify_shock

SEED_OFFSET = 1e-8
IVP_RTOL = 1e-12
IVP_ATOL = 1e-14
UNDERFLOW_FLOOR = 1e-12


@dataclass(frozen=True)
class ShockProfile:
    x: np.ndarray
    values: np.ndarray
    derivative: np.ndarray
    endstates: ShockEndstates
    alpha: float
    ell: int
    decay_constant: float = float("nan")
    alpha_sides: tuple = (float("nan"), float("nan"))
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def n(self):
        return self.values.shape[1]

    @property
    def dx(self):
        return float(self.x[1] - self.x[0])

    @property
    def half_width(self):
        return float(self.x[-1])

    def _spline(self):
        sp = self.__dict__.get("_sp")
        if sp is None:
            sp = CubicHermiteSpline(self.x, self.values, self.derivative, axis=0, extrapolate=False)
            object.__setattr__(self, "_sp", sp)
        return sp

    def __call__(self, x, delta=0.0, nu=0):
        """Evaluate ``u^delta(x) = u(x - delta)`` (``nu``-th x-derivative)."""
        xs = np.asarray(x, dtype=float) - delta
        out = np.empty(xs.shape + (self.n,))
        inside = (xs >= self.x[0]) & (xs <= self.x[-1])
        out[inside] = self._spline()(xs[inside], nu)
        a = self.alpha if np.isfinite(self.alpha) and self.alpha > 0 else 1.0
        um, up = self.endstates.u_minus, self.endstates.u_plus
        for mask, edge, end, sgn in ((xs < self.x[0], 0, um, -1.0), (xs > self.x[-1], -1, up, 1.0)):
            if not np.any(mask):
                continue
            dist = np.abs(xs[mask] - self.x[edge])
            tail = (self.values[edge] - end)[None, :] * np.exp(-a * dist)[:, None]
            if nu == 0:
                out[mask] = end + tail
            else:
                out[mask] = tail * (-sgn * a) ** nu
        return out

    def family(self, delta, x):
        return self(x, delta)

    def family_derivative(self, delta, x):
        """d u^delta / d delta = -u'(x - delta) for the translate family."""
        return -self(x, delta, nu=1)


# ---------------------------------------------------------------------------
# reduction to the viscous block


def reduce_manifold(model: ModelSystem, u2, reference, target=None, tol=1e-13, maxiter=50):
    """Return the full state ``(h(u2), u2)`` on the constraint ``F1 = F1(target)``.

    ``target`` defaults to ``reference``.  Newton is seeded at the hyperbolic
    block of ``reference`` and damped by backtracking.
    """
    m = model.n - model.r
    u2 = np.asarray(u2, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if m == 0:
        return u2.copy()
    target = reference if target is None else np.asarray(target, dtype=float)
    goal = model.flux(target)[:m]
    u1 = reference[:m].copy()

    def resid(v1):
        return model.flux(np.concatenate([v1, u2]))[:m] - goal

    r = resid(u1)
    for _ in range(maxiter):
        if np.linalg.norm(r) <= tol * (1 + np.linalg.norm(goal)):
            return np.concatenate([u1, u2])
        J = model.flux_jacobian(np.concatenate([u1, u2]))[:m, :m]
        if abs(np.linalg.det(J)) < 1e-12 * max(1.0, np.linalg.norm(J)) ** m:
            raise ReductionError(
                "dF1/du1 is singular: the hyperbolic block has a vanishing characteristic speed (H1)(i)",
                "H1",
            )
        step = np.linalg.solve(J, -r)
        lam = 1.0
        while lam > 1e-6:
            trial = u1 + lam * step
            rt = resid(trial)
            if np.linalg.norm(rt) < np.linalg.norm(r) or lam < 1e-3:
                break
            lam *= 0.5
        u1, r = trial, rt
    raise NumericalError("Newton for the constraint did not converge", where=u2.tolist())


class ReducedODE:
    """``u2' = g(u2)`` on the constraint manifold through ``u_-``."""

    def __init__(self, model: ModelSystem, endstates: ShockEndstates):
        self.model = model
        self.m = model.n - model.r
        self.um = endstates.u_minus
        self.up = endstates.u_plus
        self.F2m = model.flux(self.um)[self.m:]
        self._last = self.um.copy()

    def full(self, u2):
        u = reduce_manifold(self.model, u2, self._last, target=self.um)
        self._last = u
        return u

    def slaving(self, u):
        m = self.m
        if m == 0:
            return np.zeros((0, self.model.r))
        J = self.model.flux_jacobian(u)
        return -np.linalg.solve(J[:m, :m], J[:m, m:])

    def mass(self, u):
        m = self.m
        B = self.model.viscosity(u)
        return B[m:, :m] @ self.slaving(u) + B[m:, m:] if m else B

    def rhs(self, x, u2):
        u = self.full(u2)
        g = self.model.flux(u)[self.m:] - self.F2m
        return np.linalg.solve(self.mass(u), g)

    def jacobian_at(self, u):
        m = self.m
        J = self.model.flux_jacobian(u)
        dG = J[m:, m:] + (J[m:, :m] @ self.slaving(u) if m else 0.0)
        return np.linalg.solve(self.mass(u), dG)

    def derivative(self, u):
        """Full-state derivative ``u'`` at a point of the orbit."""
        du2 = self.rhs(0.0, u[self.m:])
        if self.m == 0:
            return du2
        return np.concatenate([self.slaving(u) @ du2, du2])


def rest_point_modes(ode: ReducedODE, u, where):
    J = ode.jacobian_at(u)
    w, V = np.linalg.eig(J)
    scale = max(np.max(np.abs(w)), 1e-300)
    if np.min(np.abs(w.real)) < 1e-10 * scale:
        raise HypothesisError(
            f"endstate {where} is not a hyperbolic rest point of the reduced profile ODE (eigenvalues {w})",
            "H2",
        )
    return w, V


def _real_basis(w, V, select):
    cols = []
    idx = np.where(select)[0]
    for k in idx:
        v = V[:, k]
        if abs(w[k].imag) > 0:
            if w[k].imag > 0:
                cols.extend([v.real, v.imag])
        else:
            cols.append(v.real)
    B = np.array(cols).T if cols else np.zeros((len(w), 0))
    if B.shape[1]:
        B, _ = np.linalg.qr(B)
    return B


def _phase_component(endstates):
    jump = np.abs(endstates.u_plus - endstates.u_minus)
    k = int(np.argmax(jump))
    mid = 0.5 * (endstates.u_plus[k] + endstates.u_minus[k])
    return k, mid


def _shoot(ode, start, direction, k, mid, x_span, sign):
    """Integrate from ``start`` in x-direction ``sign`` until component k hits mid."""
    m = ode.m

    def f(x, y):
        return sign * ode.rhs(x, y)

    def hit(x, y):
        return ode.full(y)[k] - mid
    hit.terminal = True

    def escape(x, y):
        return 1e3 * (1 + np.linalg.norm(ode.um) + np.linalg.norm(ode.up)) - np.linalg.norm(y)
    escape.terminal = True

    ode._last = ode.um.copy() if sign > 0 else ode.up.copy()
    y0 = start[m:] + SEED_OFFSET * direction
    try:
        sol = solve_ivp(f, (0.0, x_span), y0, method="DOP853", rtol=IVP_RTOL, atol=IVP_ATOL,
                        events=(hit, escape), dense_output=True)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError):
        # orbit left the region where the reduced ODE is defined
        return None
    if sol.status == -1:
        raise NumericalError(f"profile integration failed: {sol.message}")
    if len(sol.t_events[0]) == 0:
        return None
    return sol, float(sol.t_events[0][0])


def _branch(ode, rest, vecs, k, mid, x_span, sign):
    """Return the first sign choice of the seed vector whose orbit reaches the phase point."""
    best = None
    for v in vecs:
        for s in (1.0, -1.0):
            res = _shoot(ode, rest, s * v, k, mid, x_span, sign)
            if res is None:
                continue
            if best is None or res[1] < best[1]:
                best = res
    return best


def _angle_scan(ode, rest, basis, k, mid, x_span, target):
    """Two-dimensional unstable manifold: pick the seed angle whose orbit ends closest to target."""
    from scipy.optimize import minimize_scalar

    def endpoint_miss(phi):
        v = basis @ np.array([np.cos(phi), np.sin(phi)])
        ode._last = ode.um.copy()
        sol = solve_ivp(lambda x, y: ode.rhs(x, y), (0.0, x_span), rest[ode.m:] + SEED_OFFSET * v,
                        method="DOP853", rtol=1e-10, atol=1e-12)
        return float(np.min(np.linalg.norm(sol.y.T - target[ode.m:], axis=1)))

    phis = np.linspace(0, 2 * np.pi, 73)[:-1]
    miss = np.array([endpoint_miss(p) for p in phis])
    j = int(np.argmin(miss))
    res = minimize_scalar(endpoint_miss, bracket=(phis[j] - 0.09, phis[j], phis[j] + 0.09), tol=1e-12)
    return basis @ np.array([np.cos(res.x), np.sin(res.x)]), float(res.fun)


def estimate_decay_rate(model, endstates):
    ode = ReducedODE(model, endstates)
    wm, _ = rest_point_modes(ode, endstates.u_minus, "u_minus")
    wp, _ = rest_point_modes(ode, endstates.u_plus, "u_plus")
    rates = [w.real for w in wm if w.real > 0] + [-w.real for w in wp if w.real < 0]
    return min(rates) if rates else float("nan")


def solve_profile(model: ModelSystem, endstates: Optional[ShockEndstates] = None, domain_half_width=None,
                  grid_points=2048, residual_tol=1e-8) -> ShockProfile:
    if endstates is None:
        endstates = classify_shock(model, *model.default_endstates)
    if endstates.rh_residual > 1e-8:
        raise NoProfileError(
            f"endstates violate the Rankine-Hugoniot condition (|F(u+) - F(u-)| = {endstates.rh_residual:.3e})"
        )
    if endstates.shock_class == "overcompressive":
        raise NotImplementedError("overcompressive profiles (ell > 1) are not supported")
    ode = ReducedODE(model, endstates)
    um, up = endstates.u_minus, endstates.u_plus
    wm, Vm = rest_point_modes(ode, um, "u_minus")
    wp, Vp = rest_point_modes(ode, up, "u_plus")
    du = int(np.sum(wm.real > 0))
    ds = int(np.sum(wp.real < 0))
    if du == 0 or ds == 0:
        raise NoProfileError(f"no connection possible: unstable dim {du} at u-, stable dim {ds} at u+")
    mu_m = np.min(wm.real[wm.real > 0])
    mu_p = np.min(-wp.real[wp.real < 0])
    alpha_est = min(mu_m, mu_p)
    X = float(domain_half_width) if domain_half_width else 20.0 / alpha_est
    k, mid = _phase_component(endstates)
    span = 40.0 / alpha_est + 4 * X

    Um = _real_basis(wm, Vm, wm.real > 0)
    if du == 1:
        left = _branch(ode, um, [Um[:, 0]], k, mid, span, +1.0)
    elif du == 2:
        v, miss = _angle_scan(ode, um, Um, k, mid, span, up)
        left = _branch(ode, um, [v], k, mid, span, +1.0)
    else:
        raise NotImplementedError("unstable manifolds of dimension > 2 are not supported")
    if left is None:
        raise NoProfileError("no orbit from the unstable manifold of u_minus reaches the phase point")
    Us = _real_basis(wp, Vp, wp.real < 0)
    right = _branch(ode, up, [Us[:, 0]], k, mid, span, -1.0) if ds == 1 else None

    x = np.linspace(-X, X, grid_points)
    vals = np.empty((grid_points, model.n))
    lsol, lx = left
    ode._last = um.copy()
    # left branch lives on seed coordinate s in [0, lx]; profile x = s - lx
    vals_left = _sample_branch(ode, lsol, lx, x[x <= 0] + lx, um, mu_m, +1)
    vals[x <= 0] = vals_left
    if right is not None:
        rsol, rx = right
        ode._last = up.copy()
        vals[x > 0] = _sample_branch(ode, rsol, rx, rx - x[x > 0], up, mu_p, -1)
        match = np.linalg.norm(ode.full(lsol.sol(lx)) - ode.full(rsol.sol(rx)))
    else:
        ode._last = ode.full(lsol.sol(lx))
        fwd = solve_ivp(lambda s, y: ode.rhs(s, y), (0.0, X), lsol.sol(lx), method="DOP853",
                        rtol=IVP_RTOL, atol=IVP_ATOL, dense_output=True)
        pts = x[x > 0]
        vals[x > 0] = np.array([ode.full(fwd.sol(p)) for p in pts])
        match = 0.0
    ders = np.array([ode.derivative(u) for u in vals])
    miss = float(np.linalg.norm(vals[-1] - up))
    if miss > 1e-3 * (1 + np.linalg.norm(up - um)) or match > 1e-6:
        raise NoProfileError(f"shooting failed: end miss {miss:.2e}, phase-point mismatch {match:.2e}")

    B = model.viscosity(vals)
    res = np.einsum("kij,kj->ki", B, ders) - (model.flux(vals) - model.flux(um))
    res_max = float(np.max(np.abs(res)))
    if res_max > residual_tol:
        raise AccuracyError(f"profile ODE residual {res_max:.2e} above tolerance {residual_tol:.1e}")
    excess = du + ds - model.r
    if endstates.shock_class == "Lax" and excess != endstates.ell_expected:
        consistency = False
    else:
        consistency = True
    prof = ShockProfile(
        x=x, values=vals, derivative=ders, endstates=endstates, alpha=alpha_est, ell=1,
        diagnostics={
            "unstable_dim_minus": du, "stable_dim_plus": ds, "manifold_excess": excess,
            "ell_consistent": consistency, "phase_component": k, "phase_value": mid,
            "phase_point_mismatch": match, "ode_residual": res_max, "alpha_estimate": alpha_est,
        },
    )
    try:
        alpha, C, sides = decay_rate(prof, return_sides=True)
    except DecayError:
        alpha, C, sides = alpha_est, float("nan"), (float("nan"), float("nan"))
    object.__setattr__(prof, "alpha", alpha)
    object.__setattr__(prof, "decay_constant", C)
    object.__setattr__(prof, "alpha_sides", sides)
    return prof


def _sample_branch(ode, sol, s_end, s_query, rest, mu, sign):
    """Sample an orbit that left ``rest``; before the integration start use the linear tail."""
    out = np.empty((len(s_query), ode.model.n))
    s0 = sol.t[0]
    first = ode.full(sol.sol(s0))
    for i, s in enumerate(s_query):
        if s >= s0:
            out[i] = ode.full(sol.sol(min(s, s_end)))
        else:
            out[i] = rest + (first - rest) * np.exp(mu * (s - s0))
    return out


# ---------------------------------------------------------------------------
# decay


def _fit_side(dist, err):
    keep = err > UNDERFLOW_FLOOR
    if np.sum(keep) < 3:
        raise DecayError("too few samples above the underflow floor to fit a decay rate")
    slope, icpt = np.polyfit(dist[keep], np.log(err[keep]), 1)
    if not slope < 0:
        raise DecayError(f"non-negative fitted slope {slope:.3e}: no exponential convergence")
    return -slope, float(np.exp(icpt))


def decay_rate(profile: ShockProfile, return_sides=False, derivative=False):
    """Exponential rate of ``|u - u_+-|`` (or ``|u'|``) on the outer thirds of the grid."""
    x = profile.x
    X = profile.half_width
    v = profile.derivative if derivative else profile.values
    left = x <= -X / 3
    right = x >= X / 3
    if derivative:
        el = np.linalg.norm(v[left], axis=1)
        er = np.linalg.norm(v[right], axis=1)
    else:
        el = np.linalg.norm(v[left] - profile.endstates.u_minus, axis=1)
        er = np.linalg.norm(v[right] - profile.endstates.u_plus, axis=1)
    a_l, c_l = _fit_side(np.abs(x[left]), el)
    a_r, c_r = _fit_side(np.abs(x[right]), er)
    alpha = min(a_l, a_r)
    C = max(c_l, c_r)
    if return_sides:
        return alpha, C, (a_l, a_r)
    return alpha, C


# ---------------------------------------------------------------------------
# residuals and auxiliary constructors


def ode_residual(profile: ShockProfile, model: ModelSystem, finite_difference=True):
    """Max of ``|B(u) u' - (F(u) - F(u_-))|`` with u' from centered differences or stored."""
    u = profile.values
    if finite_difference:
        du = np.gradient(u, profile.x, axis=0, edge_order=2)
    else:
        du = profile.derivative
    B = model.viscosity(u)
    res = np.einsum("kij,kj->ki", B, du) - (model.flux(u) - model.flux(profile.endstates.u_minus))
    return float(np.max(np.abs(res[1:-1])))


def shifted(profile: ShockProfile, delta) -> ShockProfile:
    """Translate ``u(x - delta)`` sampled on the same grid."""
    return ShockProfile(
        x=profile.x, values=profile(profile.x, delta), derivative=profile(profile.x, delta, nu=1),
        endstates=profile.endstates, alpha=profile.alpha, ell=profile.ell,
        decay_constant=profile.decay_constant, alpha_sides=profile.alpha_sides,
        diagnostics={**profile.diagnostics, "shift": delta},
    )


def constant_profile(model: ModelSystem, state, half_width=20.0, grid_points=513) -> ShockProfile:
    """A profile frozen at a single state (for frozen-coefficient experiments)."""
    state = np.asarray(state, dtype=float)
    x = np.linspace(-half_width, half_width, grid_points)
    a = np.sort(np.linalg.eigvals(model.flux_jacobian(state)).real)
    ends = ShockEndstates(
        u_minus=state, u_plus=state, i_minus=int(np.sum(a > 0)), i_plus=int(np.sum(a < 0)),
        speeds_minus=a, speeds_plus=a, n=model.n, shock_class="constant", ell_expected=0,
        rh_residual=0.0,
    )
    return ShockProfile(
        x=x, values=np.tile(state, (grid_points, 1)), derivative=np.zeros((grid_points, model.n)),
        endstates=ends, alpha=float("nan"), ell=0,
    )


def resample(profile: ShockProfile, grid_points=None, half_width=None) -> ShockProfile:
    X = profile.half_width if half_width is None else float(half_width)
    N = len(profile.x) if grid_points is None else int(grid_points)
    x = np.linspace(-X, X, N)
    return ShockProfile(
        x=x, values=profile(x), derivative=profile(x, nu=1), endstates=profile.endstates,
        alpha=profile.alpha, ell=profile.ell, decay_constant=profile.decay_constant,
        alpha_sides=profile.alpha_sides, diagnostics=dict(profile.diagnostics),
    )


# ---------------------------------------------------------------------------
# CSV


def profile_to_csv(profile: ShockProfile, path=None):
    n = profile.n
    meta = {
        "u_minus": profile.endstates.u_minus.tolist(),
        "u_plus": profile.endstates.u_plus.tolist(),
        "alpha": profile.alpha,
        "ell": profile.ell,
    }
    header = ",".join(["x"] + [f"u{i + 1}" for i in range(n)] + [f"du{i + 1}" for i in range(n)])
    buf = io.StringIO()
    buf.write("# " + json.dumps(meta) + "\n")
    buf.write(header + "\n")
    np.savetxt(buf, np.column_stack([profile.x, profile.values, profile.derivative]), delimiter=",", fmt="%.17g")
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def profile_from_csv(path, model: ModelSystem) -> ShockProfile:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError("profile CSV must start with a '# {json}' metadata line")
        meta = json.loads(first[1:])
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    n = (len(header) - 1) // 2
    if n != model.n or data.shape[1] != 2 * n + 1:
        raise ValueError(f"CSV has {n} state columns, model expects {model.n}")
    ends = classify_shock(model, meta["u_minus"], meta["u_plus"])
    return ShockProfile(
        x=data[:, 0], values=data[:, 1:n + 1], derivative=data[:, n + 1:], endstates=ends,
        alpha=float(meta["alpha"]), ell=int(meta["ell"]),
    )
