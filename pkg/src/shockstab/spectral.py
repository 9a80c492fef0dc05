"""Linearized coefficients, endstate modes and hyperbolic-block geometry.

Along a profile the linearized operator is ``Lv = -(A v)' + (B v')'`` with
``A = dF(u) - dB(u)[.] u'``.  For partially parabolic models the
hyperbolic block ``A* = A11 - A12 B22^{-1} B21`` carries transported
modes that are damped by the effective dissipation ``D*``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import expm

from .errors import HypothesisError, NumericalError
from .models import ModelSystem, sorted_real_eigs
from .profile import ShockProfile

CLUSTER_RTOL = 1e-6


# ---------------------------------------------------------------------------
# linearization


@dataclass(frozen=True)
class LinearizedCoefficients:
    x: np.ndarray
    A: np.ndarray
    B: np.ndarray
    A_minus: np.ndarray
    A_plus: np.ndarray
    tail_rate: float


def linearized_coefficients(model: ModelSystem, profile: ShockProfile) -> LinearizedCoefficients:
    u, du = profile.values, profile.derivative
    A = model.A(u, du)
    B = model.viscosity(u)
    Am = model.flux_jacobian(profile.endstates.u_minus)
    Ap = model.flux_jacobian(profile.endstates.u_plus)
    dev = np.where(
        (profile.x < 0)[:, None, None], A - Am, A - Ap
    ).reshape(len(profile.x), -1)
    dev = np.linalg.norm(dev, axis=1)
    X = profile.half_width
    outer = (np.abs(profile.x) >= X / 3) & (dev > 1e-13)
    if np.sum(outer) >= 3:
        slope = np.polyfit(np.abs(profile.x[outer]), np.log(dev[outer]), 1)[0]
        rate = -float(slope)
    else:
        rate = float("inf")
    return LinearizedCoefficients(profile.x, A, B, Am, Ap, rate)


# ---------------------------------------------------------------------------
# endstates


@dataclass(frozen=True)
class EndstateModes:
    speeds: np.ndarray
    left: np.ndarray   # rows l_j
    right: np.ndarray  # columns r_j
    beta: np.ndarray

    @property
    def biorthogonality_residual(self):
        return float(np.max(np.abs(self.left @ self.right - np.eye(len(self.speeds)))))

    def beta_per_mode(self, B):
        return np.array([self.left[j] @ (B @ self.right[:, j]) for j in range(len(self.speeds))])


def endstate_modes(model: ModelSystem, endstate) -> EndstateModes:
    u = np.asarray(endstate, dtype=float)
    a, L, R = sorted_real_eigs(model.flux_jacobian(u), where=u.tolist())
    beta = np.diag(L @ model.viscosity(u) @ R).copy()
    return EndstateModes(a, L, R, beta)


# ---------------------------------------------------------------------------
# hyperbolic blocks


@dataclass(frozen=True)
class HyperbolicBlocks:
    x: np.ndarray
    Astar: np.ndarray          # (N, m, m)
    speeds: np.ndarray         # (N, J) one speed per eigen-group
    multiplicity: tuple
    L: list                    # per group: (N, m, m_j); L_j^T R_k = delta_jk I
    R: list                    # per group: (N, m, m_j)
    L_ext: list                # per group: (N, n, m_j)
    R_ext: list                # per group: (N, n, m_j)

    @property
    def empty(self):
        return self.Astar.shape[1] == 0

    def normalization_residual(self):
        """max |L_j^T dR_j/dx| over interior grid points."""
        if self.empty:
            return 0.0
        worst = 0.0
        for Lj, Rj in zip(self.L, self.R):
            dR = np.gradient(Rj, self.x, axis=0, edge_order=2)
            res = np.einsum("kim,kin->kmn", Lj, dR)[1:-1]
            worst = max(worst, float(np.max(np.abs(res))))
        return worst

    def at(self, xq):
        """Linear interpolation of the grid quantities to the points ``xq``."""
        xq = np.atleast_1d(np.asarray(xq, dtype=float))

        def interp(arr):
            flat = arr.reshape(len(self.x), -1)
            out = np.stack([np.interp(xq, self.x, flat[:, c]) for c in range(flat.shape[1])], axis=-1)
            return out.reshape((len(xq),) + arr.shape[1:])

        return HyperbolicBlocks(
            x=xq, Astar=interp(self.Astar), speeds=interp(self.speeds), multiplicity=self.multiplicity,
            L=[interp(a) for a in self.L], R=[interp(a) for a in self.R],
            L_ext=[interp(a) for a in self.L_ext], R_ext=[interp(a) for a in self.R_ext],
        )


def _cluster(vals):
    groups = [[0]]
    for i in range(1, len(vals)):
        if abs(vals[i] - vals[groups[-1][-1]]) <= CLUSTER_RTOL * max(1.0, abs(vals[i])):
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def _astar(model, lin):
    m = model.n - model.r
    A11, A12, _, _ = model.blocks(lin.A)
    _, _, B21, B22 = model.blocks(lin.B)
    return A11 - A12 @ np.linalg.solve(B22, B21)


def hyperbolic_blocks(model: ModelSystem, profile: ShockProfile, x=None, lin=None) -> HyperbolicBlocks:
    m = model.n - model.r
    N = len(profile.x)
    if m == 0:
        empty = np.zeros((N, 0, 0))
        hb = HyperbolicBlocks(profile.x, empty, np.zeros((N, 0)), (), [], [], [], [])
        return hb if x is None else hb.at(x)
    lin = lin or linearized_coefficients(model, profile)
    As = _astar(model, lin)
    _, _, B21, B22 = model.blocks(lin.B)
    coupling = np.linalg.solve(B22, B21)  # (N, r, m)

    eigs = []
    projectors = None
    groups = None
    for k in range(N):
        w, V = np.linalg.eig(As[k])
        if np.max(np.abs(w.imag)) > 1e-8 * max(1.0, np.max(np.abs(w))):
            raise HypothesisError(f"A* has complex eigenvalues at x={profile.x[k]:.4g}", "H1")
        order = np.argsort(w.real)
        w = w.real[order]
        V = V[:, order].real
        if np.min(np.abs(w)) <= 1e-8 * max(1.0, np.max(np.abs(w))):
            raise HypothesisError(f"eigenvalue of A* vanishes at x={profile.x[k]:.4g}", "H1")
        g = _cluster(w)
        if groups is None:
            groups = g
            projectors = [np.zeros((N, m, m)) for _ in g]
        elif [len(a) for a in g] != [len(a) for a in groups]:
            raise HypothesisError(f"multiplicity of A* eigenvalues changes at x={profile.x[k]:.4g}", "H1")
        Vi = np.linalg.inv(V)
        for j, idx in enumerate(g):
            projectors[j][k] = V[:, idx] @ Vi[idx, :]
        eigs.append([np.mean(w[idx]) for idx in g])
    speeds = np.array(eigs)
    signs = np.sign(speeds)
    if not (np.all(signs > 0) or np.all(signs < 0)):
        raise HypothesisError("eigenvalues of A* change sign along the profile", "H1")

    Ls, Rs, Lx, Rx = [], [], [], []
    for j, idx in enumerate(groups):
        P = projectors[j]
        mj = len(idx)
        # initial block at x = -X: orthonormal basis of range P
        U, _, _ = np.linalg.svd(P[0])
        Rj = np.empty((N, m, mj))
        Rj[0] = U[:, :mj]
        for k in range(1, N):
            Rj[k] = _transport_step(P[k - 1], P[k], Rj[k - 1])
        Lj = np.empty_like(Rj)
        for k in range(N):
            # L_j^T = (R_j^T R_j)^{-1} R_j^T P_j restricted so that L_j^T R_j = I, L_j^T R_i = 0
            G = np.linalg.pinv(Rj[k])
            Lj[k] = (G @ P[k]).T
        Ls.append(Lj)
        Rs.append(Rj)
        Rx.append(np.concatenate([Rj, -coupling @ Rj], axis=1))
        Lx.append(np.concatenate([Lj, np.zeros((N, model.r, mj))], axis=1))
    hb = HyperbolicBlocks(profile.x, As, speeds, tuple(len(g) for g in groups), Ls, Rs, Lx, Rx)
    return hb if x is None else hb.at(x)


def _transport_step(P0, P1, R0):
    """Second-order step of Kato's transport R' = P' R from one grid point to the next."""
    dP = P1 - P0
    Pm = 0.5 * (P0 + P1)
    # R1 = (I + dP Pm ... ) approximated by the Cayley-type map keeping R in range P1
    K = dP @ Pm - Pm @ dP
    n = P0.shape[0]
    R1 = np.linalg.solve(np.eye(n) - 0.5 * K, (np.eye(n) + 0.5 * K) @ R0)
    return P1 @ R1


# ---------------------------------------------------------------------------
# dissipation


@dataclass(frozen=True)
class DissipationData:
    x: np.ndarray
    Dstar: np.ndarray          # (N, m, m)
    eta: list                  # per group (N, m_j, m_j), literal -L^T D* R


def dissipation_data(model: ModelSystem, profile: ShockProfile, x=None, blocks=None, lin=None) -> DissipationData:
    m = model.n - model.r
    N = len(profile.x)
    if m == 0:
        dd = DissipationData(profile.x, np.zeros((N, 0, 0)), [])
        return dd if x is None else _interp_dissipation(dd, x)
    lin = lin or linearized_coefficients(model, profile)
    blocks = blocks or hyperbolic_blocks(model, profile, lin=lin)
    A11, A12, A21, A22 = model.blocks(lin.A)
    _, _, B21, B22 = model.blocks(lin.B)
    K = np.linalg.solve(B22, B21)
    dK = np.gradient(K, profile.x, axis=0, edge_order=2)
    Binv = np.linalg.inv(B22)
    # the A* term is read as B22^{-1} B21 A* (the only dimensionally consistent order)
    bracket = A21 - A22 @ K + K @ blocks.Astar + B22 @ dK
    Dstar = A12 @ Binv @ bracket
    eta = [-np.einsum("kim,kij,kjn->kmn", Lj, Dstar, Rj) for Lj, Rj in zip(blocks.L, blocks.R)]
    dd = DissipationData(profile.x, Dstar, eta)
    return dd if x is None else _interp_dissipation(dd, x)


def _interp_dissipation(dd, xq):
    xq = np.atleast_1d(np.asarray(xq, dtype=float))

    def interp(arr):
        flat = arr.reshape(len(dd.x), -1)
        out = np.stack([np.interp(xq, dd.x, flat[:, c]) for c in range(flat.shape[1])], axis=-1) if flat.shape[1] else np.zeros((len(xq), 0))
        return out.reshape((len(xq),) + arr.shape[1:])

    return DissipationData(xq, interp(dd.Dstar), [interp(e) for e in dd.eta])


# ---------------------------------------------------------------------------
# assembled data


@dataclass(frozen=True)
class SpectralData:
    minus: EndstateModes
    plus: EndstateModes
    linearized: LinearizedCoefficients
    blocks: HyperbolicBlocks
    dissipation: DissipationData
    eta_audit: Optional[dict] = None

    @property
    def n(self):
        return len(self.minus.speeds)


def spectral_data(model: ModelSystem, profile: ShockProfile, audit=True) -> SpectralData:
    ends = profile.endstates
    lin = linearized_coefficients(model, profile)
    blocks = hyperbolic_blocks(model, profile, lin=lin)
    diss = dissipation_data(model, profile, blocks=blocks, lin=lin)
    report = None
    if audit and not blocks.empty:
        report = {
            "minus": audit_eta_sign(model, ends.u_minus),
            "plus": audit_eta_sign(model, ends.u_plus),
        }
    return SpectralData(
        minus=endstate_modes(model, ends.u_minus),
        plus=endstate_modes(model, ends.u_plus),
        linearized=lin,
        blocks=blocks,
        dissipation=diss,
        eta_audit=report,
    )


def frozen_hyperbolic_data(model: ModelSystem, state):
    """(A*, literal eta*, D*) of the constant-coefficient linearization at ``state``."""
    m = model.n - model.r
    u = np.asarray(state, dtype=float)
    A = model.flux_jacobian(u)
    B = model.viscosity(u)
    A11, A12, A21, A22 = A[:m, :m], A[:m, m:], A[m:, :m], A[m:, m:]
    B21, B22 = B[m:, :m], B[m:, m:]
    K = np.linalg.solve(B22, B21)
    Astar = A11 - A12 @ K
    Dstar = A12 @ np.linalg.solve(B22, A21 - A22 @ K + K @ Astar)
    return Astar, Dstar


def audit_eta_sign(model: ModelSystem, state, frequencies=(100.0, 200.0, 400.0), horizon=4.0):
    """Measure the damping of high-frequency hyperbolic waves for frozen coefficients.

    A wave packet ``exp(i k x) r`` along each eigenvector ``r`` of ``A*`` is
    evolved exactly (``v_t + A v_x = B v_xx`` in Fourier space) and the decay
    rate of its hyperbolic component is fitted.  The report compares this
    rate with the literal ``eta* = -L D* R`` and with ``+L D* R``.
    """
    m = model.n - model.r
    u = np.asarray(state, dtype=float)
    A = model.flux_jacobian(u)
    B = model.viscosity(u)
    Astar, Dstar = frozen_hyperbolic_data(model, u)
    w, V = np.linalg.eig(Astar)
    Vi = np.linalg.inv(V)
    K = np.linalg.solve(B[m:, m:], B[m:, :m])
    times = np.linspace(0.5, horizon, 8)
    rows = []
    for j in range(m):
        r = V[:, j].real
        l = Vi[j].real
        eta_literal = float(-(l @ Dstar @ r))
        rates = []
        for k in frequencies:
            symbol = -(1j * k * A + k * k * B)
            v0 = np.concatenate([r, -K @ r]).astype(complex)
            amps = []
            for t in times:
                vt = expm(t * symbol) @ v0
                amps.append(abs(l @ vt[:m]))
            slope = np.polyfit(times, np.log(amps), 1)[0]
            rates.append(-float(slope))
        rows.append({
            "speed": float(w[j].real),
            "eta_literal": eta_literal,
            "measured_decay_rate": rates[-1],
            "decay_rates_by_frequency": dict(zip(map(float, frequencies), rates)),
            "literal_sign_consistent": bool(np.sign(rates[-1]) == np.sign(eta_literal)),
            "resolved_rate": -eta_literal,
            "resolved_rel_error": abs(rates[-1] + eta_literal) / max(abs(eta_literal), 1e-300),
        })
    return rows


# ---------------------------------------------------------------------------
# characteristic transport


class CharacteristicFlow:
    """Backward characteristics ``dz/ds = a*(z)`` and dissipative flow along them.

    ``eta_sign='resolved'`` damps with rate ``+L D* R`` (the rate measured by
    :func:`audit_eta_sign`); ``'literal'`` uses ``-eta*`` as transcribed
    (``dzeta/ds = -eta* zeta``), which amplifies for the shipped testbed.
    """

    def __init__(self, spectral: SpectralData, eta_sign="resolved", steps_per_unit=20):
        if eta_sign not in ("resolved", "literal"):
            raise ValueError("eta_sign must be 'resolved' or 'literal'")
        self.spectral = spectral
        self.blocks = spectral.blocks
        self.x = self.blocks.x
        self.eta_sign = eta_sign
        self.steps_per_unit = steps_per_unit
        sign = -1.0 if eta_sign == "resolved" else 1.0
        # rate matrices entering dzeta/ds = -rate zeta
        self.rates = [sign * e for e in spectral.dissipation.eta]

    @property
    def modes(self):
        return len(self.rates)

    def _speed(self, j, z):
        return np.interp(z, self.x, self.blocks.speeds[:, j])

    def _rate(self, j, z):
        arr = self.rates[j]
        flat = arr.reshape(len(self.x), -1)
        out = np.stack([np.interp(z, self.x, flat[:, c]) for c in range(flat.shape[1])], axis=-1)
        return out.reshape(z.shape + arr.shape[1:])

    def trace(self, j, x, t):
        """Return foot points ``y = z(0)``, ``zeta(t)`` and the average speed for mode j."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        mj = self.rates[j].shape[1]
        zeta = np.broadcast_to(np.eye(mj), x.shape + (mj, mj)).copy()
        if t <= 0:
            return x.copy(), zeta, self._speed(j, x), np.zeros(x.shape, bool)
        nsteps = max(4, int(np.ceil(t * self.steps_per_unit)))
        h = t / nsteps
        z = x.copy()
        # integrate backward in s from t to 0; collect rates along the path
        path = [z.copy()]
        for _ in range(nsteps):
            k1 = self._speed(j, z)
            k2 = self._speed(j, z - 0.5 * h * k1)
            k3 = self._speed(j, z - 0.5 * h * k2)
            k4 = self._speed(j, z - h * k3)
            z = z - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            path.append(z.copy())
        path = path[::-1]  # path[i] = z(i h), forward in time
        # dzeta/ds = -rate(z(s)) zeta, forward from s = 0 (zeta = I) to s = t
        for i in range(nsteps):
            za, zb = path[i], path[i + 1]
            zm = 0.5 * (za + zb)
            ra, rm, rb = self._rate(j, za), self._rate(j, zm), self._rate(j, zb)
            k1 = -ra @ zeta
            k2 = -rm @ (zeta + 0.5 * h * k1)
            k3 = -rm @ (zeta + 0.5 * h * k2)
            k4 = -rb @ (zeta + h * k3)
            zeta = zeta + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        y = path[0]
        truncated = (y < self.x[0]) | (y > self.x[-1])
        abar = (x - y) / t
        return y, zeta, abar, truncated

    def fit_decay(self, j=0, x0=0.0, horizon=20.0, samples=21):
        """Fitted rate eta0 with |zeta(t)| ~ exp(-eta0 t) along the characteristic through x0."""
        ts = np.linspace(horizon / samples, horizon, samples)
        mags = [np.linalg.norm(self.trace(j, [x0], t)[1][0], 2) for t in ts]
        slope = np.polyfit(ts, np.log(mags), 1)[0]
        return -float(slope)


def hyperbolic_green_action(flow: CharacteristicFlow, spectral: SpectralData, v0: Union[np.ndarray, Callable], t):
    """Transport-and-damp action of the hyperbolic Green kernel on ``v0``.

    ``v0`` is either an ``(N, n)`` array sampled on the profile grid
    (linearly interpolated) or a callable ``x -> (len(x), n)``.  Returns a
    callable of ``x`` with a boolean attribute ``truncated`` set when a foot
    point leaves the grid (values there are clamped to the end samples).
    """
    blocks = spectral.blocks
    grid = blocks.x
    if callable(v0):
        v0_eval = v0
    else:
        arr = np.asarray(v0, dtype=float)

        def v0_eval(y):
            return np.stack([np.interp(y, grid, arr[:, c]) for c in range(arr.shape[1])], axis=-1)

    n = spectral.n
    state = {"truncated": False}

    def action(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.zeros(x.shape + (n,))
        if blocks.empty:
            return out
        for j in range(flow.modes):
            y, zeta, _, trunc = flow.trace(j, x, t)
            state["truncated"] |= bool(np.any(trunc))
            yc = np.clip(y, grid[0], grid[-1])
            Rx = _interp_blocks(grid, blocks.R_ext[j], x)
            Ly = _interp_blocks(grid, blocks.L_ext[j], yc)
            ax = np.interp(x, grid, blocks.speeds[:, j])
            ay = np.interp(yc, grid, blocks.speeds[:, j])
            coeff = np.einsum("kim,ki->km", Ly, v0_eval(y))
            coeff = np.einsum("kmp,kp->km", zeta, coeff)
            out += (ay / ax)[:, None] * np.einsum("kim,km->ki", Rx, coeff)
        return out

    class _Action:
        def __call__(self, x):
            return action(x)

        @property
        def truncated(self):
            return state["truncated"]

    return _Action()


def _interp_blocks(grid, arr, xq):
    flat = arr.reshape(len(grid), -1)
    out = np.stack([np.interp(xq, grid, flat[:, c]) for c in range(flat.shape[1])], axis=-1)
    return out.reshape(np.shape(xq) + arr.shape[1:])


# ---------------------------------------------------------------------------
# export


def spectral_summary(spectral: SpectralData, samples=9):
    def modes(e):
        return {"speeds": e.speeds.tolist(), "beta": e.beta.tolist(),
                "biorthogonality_residual": e.biorthogonality_residual}

    out = {"minus": modes(spectral.minus), "plus": modes(spectral.plus),
           "tail_rate": spectral.linearized.tail_rate}
    b = spectral.blocks
    if not b.empty:
        idx = np.linspace(0, len(b.x) - 1, samples).astype(int)
        out["hyperbolic"] = {
            "multiplicity": list(b.multiplicity),
            "x": b.x[idx].tolist(),
            "speeds": b.speeds[idx].tolist(),
            "eta_literal": [e[idx].reshape(len(idx), -1).tolist() for e in spectral.dissipation.eta],
            "normalization_residual": b.normalization_residual(),
        }
        out["eta_sign_audit"] = spectral.eta_audit
    return out


def spectral_to_json(spectral: SpectralData, path=None, samples=9):
    text = json.dumps(spectral_summary(spectral, samples), indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
