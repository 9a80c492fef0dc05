"""Conservation-law systems with block-degenerate viscosity.

A model is the pair ``u_t + F(u)_x = (B(u) u_x)_x`` in a frame moving with
the shock, so ``F`` already carries the ``- s u`` shift.  All callables act
on arrays whose last axis is the state index, so a whole grid is evaluated
in one call.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    DegenerateShockError,
    HypothesisError,
    NumericalError,
    StructuralError,
)

EIG_RTOL = 1e-8


@dataclass(frozen=True)
class ModelSystem:
    """Flux, viscosity and (optionally) symmetrizer of a 1-D system.

    ``viscosity_derivative(u)`` returns ``dB[..., i, k, j] = dB_ik/du_j``.
    ``symmetrizer(u)`` returns ``(S, du_dw)`` evaluated at the state ``u``.
    """

    name: str
    n: int
    r: int
    flux: Callable
    flux_jacobian: Callable
    viscosity: Callable
    viscosity_derivative: Callable
    frame_speed: float = 0.0
    symmetrizer: Optional[Callable] = None
    smoothness_order: int = 5
    params: dict = field(default_factory=dict)
    default_endstates: Optional[tuple] = None

    def __post_init__(self):
        if not (1 <= self.r <= self.n):
            raise StructuralError(f"need 1 <= r <= n, got n={self.n}, r={self.r}")

    @property
    def hyperbolic_dim(self):
        return self.n - self.r

    def A(self, u, du):
        """Linearized convection matrix ``dF(u) - dB(u)[.] u_x`` (batched)."""
        u = np.asarray(u, dtype=float)
        du = np.asarray(du, dtype=float)
        dB = self.viscosity_derivative(u)
        return self.flux_jacobian(u) - np.einsum("...ikj,...k->...ij", dB, du)

    def blocks(self, M):
        """Split a matrix (batched) into its 11, 12, 21, 22 blocks."""
        m = self.n - self.r
        return M[..., :m, :m], M[..., :m, m:], M[..., m:, :m], M[..., m:, m:]


@dataclass(frozen=True)
class ShockEndstates:
    u_minus: np.ndarray
    u_plus: np.ndarray
    i_minus: int
    i_plus: int
    speeds_minus: np.ndarray
    speeds_plus: np.ndarray
    n: int
    shock_class: str
    ell_expected: int
    rh_residual: float

    @property
    def i(self):
        return self.i_minus + self.i_plus


@dataclass
class HypothesisReport:
    results: dict = field(default_factory=dict)

    def add(self, key, passed, detail=""):
        self.results[key] = {"passed": passed, "detail": detail}

    def passed(self, key):
        entry = self.results.get(key)
        return None if entry is None else entry["passed"]

    @property
    def a_branch(self):
        keys = ("A1", "A2", "A3")
        vals = [self.passed(k) for k in keys]
        if any(v is None for v in vals):
            return None
        return all(vals)

    @property
    def ok(self):
        structural = self.passed("structure") is not False
        b1 = self.passed("B1") is True
        a_ok = self.a_branch is True
        if self.passed("A2") is True and self.a_branch is None and self.passed("H1") is not False:
            # symmetrizer absent: (A1),(A3) unchecked; accept on (A2)+(H1)
            a_ok = True
        tech = all(self.passed(k) is not False for k in ("H1", "H2"))
        return structural and (b1 or a_ok) and tech

    def to_dict(self):
        return {"ok": self.ok, "results": self.results}

    def summary_lines(self):
        lines = []
        for key, entry in self.results.items():
            flag = {True: "pass", False: "FAIL", None: "unchecked"}[entry["passed"]]
            lines.append(f"({key}) {flag}  {entry['detail']}")
        lines.append(f"overall: {'pass' if self.ok else 'FAIL'}")
        return lines


# ---------------------------------------------------------------------------
# eigen helpers


def sorted_real_eigs(M, where=None):
    """Eigen-decomposition with real, ascending eigenvalues.

    Returns ``(a, L, R)`` with ``L @ R = I``; raises if any eigenvalue has a
    non-negligible imaginary part or two eigenvalues nearly coincide.
    """
    M = np.asarray(M, dtype=float)
    try:
        w, V = np.linalg.eig(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigen-solver failed: {exc}", where=where) from exc
    scale = max(np.max(np.abs(w)), 1e-300)
    if np.max(np.abs(w.imag)) > EIG_RTOL * scale:
        raise HypothesisError(f"complex eigenvalues {w} at {where}", "H2")
    order = np.argsort(w.real)
    a = w.real[order]
    R = V[:, order].real
    if len(a) > 1 and np.min(np.diff(a)) < EIG_RTOL * scale:
        raise HypothesisError(f"repeated eigenvalues {a} at {where}", "H2")
    R = R / np.linalg.norm(R, axis=0)
    L = np.linalg.inv(R)
    return a, L, R


def rankine_hugoniot_residual(model, u_minus, u_plus):
    return float(np.linalg.norm(model.flux(np.asarray(u_plus, float)) - model.flux(np.asarray(u_minus, float))))


def _sample_states(u_minus, u_plus, count=9, spread=0.05, seed=0):
    rng = np.random.default_rng(seed)
    s = np.linspace(0.0, 1.0, count)
    line = (1 - s)[:, None] * u_minus + s[:, None] * u_plus
    jitter = spread * rng.standard_normal(line.shape) * (np.abs(u_plus - u_minus).max() or 1.0)
    return np.vstack([line, line + jitter])


# ---------------------------------------------------------------------------
# operations


def classify_shock(model: ModelSystem, u_minus, u_plus, rh_tol=1e-8) -> ShockEndstates:
    u_minus = np.atleast_1d(np.asarray(u_minus, dtype=float))
    u_plus = np.atleast_1d(np.asarray(u_plus, dtype=float))
    if u_minus.shape != (model.n,) or u_plus.shape != (model.n,):
        raise StructuralError(f"endstates must have shape ({model.n},)")
    if np.allclose(u_minus, u_plus, rtol=0, atol=1e-14):
        raise DegenerateShockError("u_minus equals u_plus: no shock")
    speeds = []
    for label, u in (("u_minus", u_minus), ("u_plus", u_plus)):
        w = np.linalg.eigvals(model.flux_jacobian(u))
        scale = max(np.max(np.abs(w)), 1e-300)
        if np.min(np.abs(w)) < EIG_RTOL * scale:
            raise HypothesisError(f"zero characteristic speed at {label}: {w}", "H2")
        speeds.append(np.sort(w.real))
    a_m, a_p = speeds
    i_minus = int(np.sum(a_m > 0))
    i_plus = int(np.sum(a_p < 0))
    diff = i_minus + i_plus - model.n
    if diff < 1:
        cls = "undercompressive"
        ell = 1
    elif diff == 1:
        cls = "Lax"
        ell = 1
    else:
        cls = "overcompressive"
        ell = diff
    return ShockEndstates(
        u_minus=u_minus,
        u_plus=u_plus,
        i_minus=i_minus,
        i_plus=i_plus,
        speeds_minus=a_m,
        speeds_plus=a_p,
        n=model.n,
        shock_class=cls,
        ell_expected=ell,
        rh_residual=rankine_hugoniot_residual(model, u_minus, u_plus),
    )


def genuine_coupling_margin(model, u):
    """min over unit eigenvectors v of dF(u) of |B(u) v| (zero means (A2) fails)."""
    w, V = np.linalg.eig(model.flux_jacobian(u))
    B = model.viscosity(u)
    V = V / np.linalg.norm(V, axis=0)
    return float(min(np.linalg.norm(B @ V[:, k]) for k in range(V.shape[1])))


def _check_block_structure(model, states):
    m = model.n - model.r
    for u in states:
        B = np.asarray(model.viscosity(u))
        if B.shape != (model.n, model.n):
            raise StructuralError(f"B(u) has shape {B.shape}, expected {(model.n, model.n)}")
        if m and np.any(B[:m, :] != 0.0):
            raise StructuralError(f"first {m} rows of B(u) are not zero at u={u}")


def check_hypotheses(model: ModelSystem, endstates: ShockEndstates) -> HypothesisReport:
    rep = HypothesisReport()
    um, up = endstates.u_minus, endstates.u_plus
    states = _sample_states(um, up)
    _check_block_structure(model, np.vstack([states, um, up]))
    rep.add("structure", True, f"n={model.n}, r={model.r}, rows 1..{model.n - model.r} of B vanish")
    rep.add("RH", endstates.rh_residual <= 1e-8, f"|F(u+)-F(u-)| = {endstates.rh_residual:.3e}")

    # (B1)
    if model.r == model.n:
        mins = []
        for u in states:
            try:
                mins.append(np.min(np.linalg.eigvals(model.viscosity(u)).real))
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"eigen-solver failed: {exc}", where=u) from exc
        rep.add("B1", bool(min(mins) > 0), f"min Re sigma(B) = {min(mins):.3e}")
    else:
        rep.add("B1", False, "n > r: not strictly parabolic")
        m = model.n - model.r
        mins = [np.min(np.linalg.eigvals(model.viscosity(u)[m:, m:]).real) for u in states]
        if min(mins) <= 0:
            rep.add("b2", False, f"min Re sigma(b2) = {min(mins):.3e}")

    # (A1)-(A3)
    margin = min(genuine_coupling_margin(model, um), genuine_coupling_margin(model, up))
    rep.add("A2", bool(margin > 1e-10), f"min |B v| over eigenvectors = {margin:.3e}")
    if model.symmetrizer is None:
        rep.add("A1", None, "no symmetrizer: A-branch unchecked")
        rep.add("A3", None, "no symmetrizer: A-branch unchecked")
    else:
        ok1, det1, ok3, det3 = True, [], True, []
        m = model.n - model.r
        for u in (um, up):
            S, dudw = model.symmetrizer(u)
            A0 = S @ dudw
            At = S @ model.flux_jacobian(u) @ dudw
            Bt = S @ model.viscosity(u) @ dudw
            sym0 = np.allclose(A0, A0.T, atol=1e-10)
            pos0 = sym0 and np.min(np.linalg.eigvalsh(0.5 * (A0 + A0.T))) > 0
            symA = np.allclose(At, At.T, atol=1e-10)
            ok1 &= bool(sym0 and pos0 and symA)
            det1.append(f"A0 sym={sym0} pd={pos0}, A sym={symA}")
            if m:
                blk = np.allclose(Bt[:m, :], 0, atol=1e-12) and np.allclose(Bt[:, :m], 0, atol=1e-12)
                bb = Bt[m:, m:]
            else:
                blk, bb = True, Bt
            th = np.min(np.linalg.eigvalsh(0.5 * (bb + bb.T)))
            ok3 &= bool(blk and th > 0)
            det3.append(f"block={blk}, theta={th:.3e}")
        rep.add("A1", ok1, "; ".join(det1))
        rep.add("A3", ok3, "; ".join(det3))

    # (H1)
    if model.r < model.n:
        rep.add("H1", *_check_h1(model, states))
    else:
        rep.add("H1", True, "strictly parabolic: no hyperbolic block")

    # (H2)
    ok2, det2 = True, []
    for label, u in (("-", um), ("+", up)):
        try:
            a, _, _ = sorted_real_eigs(model.flux_jacobian(u), where=label)
            scale = np.max(np.abs(a))
            nz = np.min(np.abs(a)) > EIG_RTOL * scale
            ok2 &= bool(nz)
            det2.append(f"a{label}={np.array2string(a, precision=4)}")
        except HypothesisError as exc:
            ok2 = False
            det2.append(str(exc))
    rep.add("H2", ok2, "; ".join(det2))
    return rep


def _check_h1(model, states):
    m = model.n - model.r
    eigs = []
    for u in states:
        if model.symmetrizer is not None:
            S, dudw = model.symmetrizer(u)
            A0 = S @ dudw
            At = S @ model.flux_jacobian(u) @ dudw
            Astar = At[:m, :m] @ np.linalg.inv(A0[:m, :m])
        else:
            A = model.flux_jacobian(u)
            B = model.viscosity(u)
            Astar = A[:m, :m] - A[:m, m:] @ np.linalg.solve(B[m:, m:], B[m:, :m])
        eigs.append(np.sort(np.linalg.eigvals(Astar).real))
    eigs = np.array(eigs)
    scale = max(np.max(np.abs(eigs)), 1.0)
    if np.min(np.abs(eigs)) <= EIG_RTOL * scale:
        return False, f"(i) eigenvalue of A* vanishes (min |a*| = {np.min(np.abs(eigs)):.3e})"
    signs = np.sign(eigs)
    if not (np.all(signs > 0) or np.all(signs < 0)):
        return False, "(ii) eigenvalues of A* change sign"
    mult = [tuple(_multiplicities(row)) for row in eigs]
    if len(set(mult)) != 1:
        return False, "(iii) multiplicity of A* eigenvalues varies"
    return True, f"a* in [{eigs.min():.4g}, {eigs.max():.4g}], multiplicities {mult[0]}"


def _multiplicities(vals, rgap=1e-6):
    groups = [[vals[0]]]
    for v in vals[1:]:
        if abs(v - groups[-1][-1]) <= rgap * max(1.0, abs(v)):
            groups[-1].append(v)
        else:
            groups.append([v])
    return [len(g) for g in groups]


# ---------------------------------------------------------------------------
# built-in testbeds


def _zeros_dB(n):
    def dB(u):
        u = np.asarray(u, dtype=float)
        return np.zeros(u.shape[:-1] + (n, n, n))
    return dB


def _const_B(B0):
    B0 = np.asarray(B0, dtype=float)

    def B(u):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(B0, u.shape[:-1] + B0.shape).copy()
    return B


def burgers(frame_speed=0.0, viscosity=1.0):
    s = float(frame_speed)

    def F(u):
        u = np.asarray(u, dtype=float)
        return 0.5 * u * u - s * u

    def dF(u):
        u = np.asarray(u, dtype=float)
        return (u - s)[..., None]

    return ModelSystem(
        name="burgers", n=1, r=1, flux=F, flux_jacobian=dF,
        viscosity=_const_B([[viscosity]]), viscosity_derivative=_zeros_dB(1),
        frame_speed=s, params={"frame_speed": s, "viscosity": viscosity},
        default_endstates=(np.array([1.0 + s]), np.array([-1.0 + s])),
    )


def quadratic_gradient():
    """f(u, v) = (u^2 - v^2, -2uv) with identity viscosity."""

    def F(U):
        U = np.asarray(U, dtype=float)
        u, v = U[..., 0], U[..., 1]
        return np.stack([u * u - v * v, -2.0 * u * v], axis=-1)

    def dF(U):
        U = np.asarray(U, dtype=float)
        u, v = U[..., 0], U[..., 1]
        row0 = np.stack([2 * u, -2 * v], axis=-1)
        row1 = np.stack([-2 * v, -2 * u], axis=-1)
        return np.stack([row0, row1], axis=-2)

    return ModelSystem(
        name="quadratic_gradient", n=2, r=2, flux=F, flux_jacobian=dF,
        viscosity=_const_B(np.eye(2)), viscosity_derivative=_zeros_dB(2),
        params={}, default_endstates=(np.array([1.0, 0.0]), np.array([-1.0, 0.0])),
    )


def p_system(mu=1.0, frame_speed=np.sqrt(0.5), v_minus=1.0, v_plus=2.0, u_minus=0.0):
    """Isothermal p-system ``v_t - u_x = 0, u_t + (1/v)_x = ((mu/v) u_x)_x``.

    State ordering is ``(v, u)``; only the momentum equation is viscous.
    The default frame speed gives a Lax 2-shock for ``v_minus < v_plus``.
    """
    s = float(frame_speed)
    mu = float(mu)

    def F(U):
        U = np.asarray(U, dtype=float)
        v, u = U[..., 0], U[..., 1]
        return np.stack([-u - s * v, 1.0 / v - s * u], axis=-1)

    def dF(U):
        U = np.asarray(U, dtype=float)
        v = U[..., 0]
        row0 = np.stack([np.full_like(v, -s), np.full_like(v, -1.0)], axis=-1)
        row1 = np.stack([-1.0 / (v * v), np.full_like(v, -s)], axis=-1)
        return np.stack([row0, row1], axis=-2)

    def B(U):
        U = np.asarray(U, dtype=float)
        out = np.zeros(U.shape[:-1] + (2, 2))
        out[..., 1, 1] = mu / U[..., 0]
        return out

    def dB(U):
        U = np.asarray(U, dtype=float)
        out = np.zeros(U.shape[:-1] + (2, 2, 2))
        out[..., 1, 1, 0] = -mu / U[..., 0] ** 2
        return out

    def sym(U):
        v = float(np.asarray(U)[0])
        return np.diag([1.0 / v ** 2, 1.0]), np.eye(2)

    u_plus = u_minus - s * (v_plus - v_minus)
    return ModelSystem(
        name="p_system", n=2, r=1, flux=F, flux_jacobian=dF, viscosity=B,
        viscosity_derivative=dB, frame_speed=s, symmetrizer=sym,
        params={"mu": mu, "frame_speed": s, "v_minus": v_minus, "v_plus": v_plus, "u_minus": u_minus},
        default_endstates=(np.array([v_minus, u_minus]), np.array([v_plus, u_plus])),
    )


def negative_viscosity_burgers():
    """Anti-test toy: Burgers with B = -1 (ill-posed, used to exercise failure flags)."""
    m = burgers(viscosity=-1.0)
    return ModelSystem(**{**m.__dict__, "name": "negative_viscosity_burgers"})


def polynomial_model(n, terms, viscosity_matrix, frame_speed=0.0, name="polynomial"):
    """Model with polynomial flux and constant viscosity.

    ``terms`` is a list of ``(component, coefficient, powers)`` with
    ``len(powers) == n``; the frame shift ``-s u`` is added automatically.
    """
    Bm = np.asarray(viscosity_matrix, dtype=float)
    if Bm.shape != (n, n):
        raise StructuralError(f"viscosity matrix must be {n}x{n}")
    zero_rows = 0
    while zero_rows < n and np.all(Bm[zero_rows] == 0):
        zero_rows += 1
    r = n - zero_rows
    if r == 0 or np.any(np.all(Bm[zero_rows:] == 0, axis=1)):
        raise StructuralError("viscosity must have its zero rows on top and r >= 1")
    parsed = []
    for comp, coef, powers in terms:
        powers = np.asarray(powers, dtype=int)
        if powers.shape != (n,) or np.any(powers < 0) or not (0 <= int(comp) < n):
            raise StructuralError(f"bad polynomial term {(comp, coef, list(powers))}")
        parsed.append((int(comp), float(coef), powers))
    s = float(frame_speed)

    def F(U):
        U = np.asarray(U, dtype=float)
        out = -s * U.copy()
        for comp, coef, p in parsed:
            out[..., comp] += coef * np.prod(U ** p, axis=-1)
        return out

    def dF(U):
        U = np.asarray(U, dtype=float)
        out = np.zeros(U.shape[:-1] + (n, n))
        out[..., range(n), range(n)] -= s
        for comp, coef, p in parsed:
            for j in range(n):
                if p[j] == 0:
                    continue
                q = p.copy()
                q[j] -= 1
                out[..., comp, j] += coef * p[j] * np.prod(U ** q, axis=-1)
        return out

    return ModelSystem(
        name=name, n=n, r=r, flux=F, flux_jacobian=dF, viscosity=_const_B(Bm),
        viscosity_derivative=_zeros_dB(n), frame_speed=s,
        params={"terms": [(c, k, list(map(int, p))) for c, k, p in parsed],
                "viscosity": Bm.tolist(), "frame_speed": s},
    )


BUILTINS = {
    "burgers": burgers,
    "quadratic_gradient": quadratic_gradient,
    "p_system": p_system,
    "negative_viscosity_burgers": negative_viscosity_burgers,
}


def builtin(name, **params):
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise StructuralError(f"unknown built-in model {name!r}; choose from {sorted(BUILTINS)}") from None
    return factory(**params)


def reflect(model: ModelSystem) -> ModelSystem:
    """Model for ``x -> -x``: flux and its Jacobian change sign, viscosity is unchanged."""
    return ModelSystem(**{
        **model.__dict__,
        "name": model.name + "_reflected",
        "flux": lambda U: -model.flux(U),
        "flux_jacobian": lambda U: -model.flux_jacobian(U),
        "frame_speed": -model.frame_speed,
        "symmetrizer": None,
    })


def jacobian_fd_check(model, u, h=1e-6):
    """Max deviation between flux_jacobian and centered finite differences at ``u``."""
    u = np.asarray(u, dtype=float)
    J = np.empty((model.n, model.n))
    for j in range(model.n):
        e = np.zeros(model.n)
        e[j] = h
        J[:, j] = (model.flux(u + e) - model.flux(u - e)) / (2 * h)
    return float(np.max(np.abs(J - model.flux_jacobian(u))))


__all__ = [name for name in dir() if not name.startswith("_") and name not in ("itertools", "annotations")]
