import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import sech
from shockstab import evolution as ev, models, profile
from shockstab.errors import BlowUpError, ConfigError, IterationAbort


@pytest.fixture(scope="module")
def burgers_grid(burgers):
    m, prof = burgers
    g = ev.make_grid(30, 0.1)
    base = ev.discrete_profile(m, prof, g)
    solver = ev.FVSolver(m, g, base.endstates.u_minus, base.endstates.u_plus)
    return m, prof, g, base, solver


@pytest.fixture(scope="module")
def short_burgers_trace(burgers, burgers_bundle):
    m, prof = burgers
    return ev.simulate(m, prof, lambda x: 0.01 * sech(x), 20.0, 0.05, dx=0.1, record_every=0.5,
                       snapshot_times=(5.0, 20.0), bundle=burgers_bundle)


def test_grid_has_edge_at_origin():
    g = ev.make_grid(10, 0.1)
    assert g.cells % 2 == 0
    assert np.min(np.abs(g.edges)) == 0.0
    np.testing.assert_allclose(g.x, 0.5 * (g.edges[1:] + g.edges[:-1]))


def test_discrete_steady_state(burgers_grid):
    m, prof, g, base, solver = burgers_grid
    assert base.diagnostics["residual"] < 1e-10
    assert np.max(np.abs(solver.residual(base.values))) < 1e-10
    assert np.max(np.abs(solver.step(base.values, 0.0, 0.05) - base.values)) < 1e-12
    # the discrete state is close to the continuous one
    assert np.max(np.abs(base.values - prof(g.x))) < 1e-2


def test_discrete_family_translates(burgers_grid):
    m, prof, g, base, solver = burgers_grid
    shifted = base(g.x, 0.3)
    assert np.max(np.abs(solver.residual(shifted))) < 1e-8


def test_mass_balance_per_step(burgers_grid):
    m, prof, g, base, solver = burgers_grid
    U = base.values + 0.01 * sech(g.x)[:, None]
    for k in range(50):
        Un = solver.step(U, k * 0.05, 0.05)
        defect = np.sum(Un - U) * g.dx - np.sum(solver.last_boundary_flux)
        assert abs(defect) < 1e-12
        U = Un


def test_cfl_and_blowup(burgers_grid):
    m, prof, g, base, solver = burgers_grid
    with pytest.raises(ConfigError):
        solver.check_cfl(base.values, 1.0)
    with pytest.raises(BlowUpError):
        solver.step(np.full_like(base.values, np.nan), 0.0, 0.05)


def test_functional_step(burgers_grid):
    m, prof, g, base, solver = burgers_grid
    state = ev.SolverState(0.0, base.values.copy())
    new = ev.step(m, state, 0.05, grid=g, u_minus=base.endstates.u_minus, u_plus=base.endstates.u_plus)
    assert new.t == pytest.approx(0.05)
    np.testing.assert_allclose(new.U, base.values, atol=1e-12)


def test_phase_fit_recovers_translate(burgers_grid):
    m, prof, g, base, solver = burgers_grid
    fit = ev.fit_phase(base, g.x, base(g.x, 0.3), scan=True)
    assert fit.converged and abs(fit.delta - 0.3) < 1e-10


def test_phase_fit_flags_flat_data(burgers_grid):
    m, prof, g, base, solver = burgers_grid
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = ev.fit_phase(base, g.x, np.full((g.cells, 1), -1.0), scan=True)
    assert fit.ambiguous
    assert any(issubclass(w.category, ev.AmbiguousPhaseWarning) for w in caught)


@settings(max_examples=20, deadline=None)
@given(d=st.floats(-2.0, 2.0))
def test_mass_shift_of_translate(burgers_grid, d):
    # translating the Burgers front by d adds mass 2 d, the adjoint row is 1/2
    m, prof, g, base, solver = burgers_grid
    from shockstab import templates
    einf = templates.e_infinity(m, prof)
    u0 = base(g.x, d) - base(g.x)
    assert abs(ev.mass_shift(base, g.x, g.dx, u0, einf(g.x)) - d) < 1e-8


def test_residuals_vanish_for_zero_perturbation(burgers_grid):
    m, prof, g, base, solver = burgers_grid
    z = np.zeros((g.cells, 1))
    Q, R, S = ev.nonlinear_residuals(m, prof, g.x, z, z, 0.1, 0.2, 0.0)
    assert np.abs(Q).max() == 0 and np.abs(R).max() == 0


def test_quadratic_residual_scaling(burgers_grid):
    # Burgers: Q = u^2 / 2 exactly
    m, prof, g, base, solver = burgers_grid
    u = sech(g.x)[:, None]
    ux = ev._diff(u, g.dx)
    for eps in (1e-1, 1e-3):
        Q, R, S = ev.nonlinear_residuals(m, prof, g.x, eps * u, eps * ux, 0.0, 0.0, 0.0)
        np.testing.assert_allclose(np.abs(Q).max() / eps ** 2, 0.5 * np.max(u) ** 2, rtol=1e-6)


def test_norm_helpers():
    x = np.linspace(-5, 5, 101)
    dx = x[1] - x[0]
    u = np.ones((101, 1))
    n = ev.lp_norms(u, dx)
    assert n["L1"] == pytest.approx(101 * dx)
    assert n["L2"] == pytest.approx(math.sqrt(101 * dx))
    assert n["Linf"] == 1.0
    t = np.array([0.0, 3.0])
    assert ev.b1_norm(t, np.array([1.0, 1.0]), np.array([0.0, 1.0])) == pytest.approx(2.0 + 4.0)
    assert ev.h2_energy(u, dx) == pytest.approx(101 * dx)


def test_simulation_trace(short_burgers_trace):
    tr = short_burgers_trace
    # conserved mass 0.01 pi moves the Burgers front by half of it
    assert abs(tr.delta_star - 0.005 * math.pi) < 1e-10
    assert tr.mass_defect < 1e-11
    assert tr.times[-1] == pytest.approx(20.0)
    assert abs(tr.delta[-1]) < 1e-6
    assert tr.norms["Linf"][-1] < 1e-3 * tr.norms["Linf"][0]
    assert set(tr.snapshots) == {5.0, 20.0}
    fit = ev.extract_phase(tr, ev.discrete_profile(models.burgers(), profile.solve_profile(models.burgers()),
                                                   ev.make_grid(tr.meta["half_width"], tr.dx)), 20.0)
    assert abs(fit.delta - tr.shift[-1]) < 1e-8


def test_decay_and_energy_reports(short_burgers_trace, burgers_bundle):
    rep = ev.verify_decay(short_burgers_trace, burgers_bundle, ratio_times=(5.0, 20.0))
    d = rep.to_dict()
    assert set(d) >= {"lp_slope_check", "pointwise_template_check", "phase_rate_check", "asymptotic_shift_check"}
    assert not d["lp_slope_check"]["sharp_rates_expected"]
    assert rep.late_growth_ok
    en = ev.energy_monitor(short_burgers_trace)
    assert en.feasible and not en.damping_failure
    assert math.isfinite(en.C) and en.theta2 > 0


def test_write_trace(tmp_path, short_burgers_trace):
    paths = ev.write_trace(short_burgers_trace, tmp_path, prefix="b")
    lines = open(paths["timeseries"]).read().splitlines()
    assert lines[0].split(",")[:3] == ["t", "delta", "delta_dot"]
    assert len(lines) == len(short_burgers_trace.times) + 1
    man = json.load(open(paths["manifest"]))
    assert man["snapshots"] == ["b_snapshot_t5.csv", "b_snapshot_t20.csv"]


def test_horizon_warning(quadratic, quadratic_bundle):
    m, prof = quadratic
    with pytest.warns(ev.HorizonWarning):
        tr = ev.simulate(m, prof, lambda x: 0.001 * sech(x)[:, None] * np.ones(2), 5.0, 0.025,
                         half_width=8.0, record_every=1.0, bundle=quadratic_bundle)
    assert tr.notes


def test_bad_perturbation_shape(burgers, burgers_bundle):
    m, prof = burgers
    with pytest.raises(ConfigError):
        ev.simulate(m, prof, lambda x: np.zeros((len(x), 3)), 1.0, 0.05, bundle=burgers_bundle)


def test_phase_history_arithmetic():
    t = np.linspace(0, 10, 11)
    a = ev.PhaseHistory.from_function(t, lambda s: s ** 2)
    np.testing.assert_allclose(a.rates, 2 * a.t_mid)
    z = a - a
    assert z.b1() == 0.0
    assert ev.star_norm(z, 0.5, weight=2.0) == 1.0


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_tail_extrapolation(p):
    t = np.linspace(0, 200, 4001)
    g = (1 + t) ** -p
    tail, est = ev._tail(t, g)
    assert abs(est - p) < 0.05
    assert abs(tail - 201 ** (1 - p) / (p - 1)) < 0.05 * 201 ** (1 - p) / (p - 1)


def test_tail_rejects_slow_decay():
    t = np.linspace(0, 100, 1001)
    tail, p = ev._tail(t, (1 + t) ** -0.5)
    assert math.isnan(tail) and p < 1


def test_phase_tables_against_direct_integrals(burgers_bundle):
    from shockstab import templates
    g = ev.make_grid(6, 0.5)
    tab = ev.PhaseKernelTables(burgers_bundle, g, 0.1, 5)
    y0, y1 = g.edges[:-1], g.edges[1:]
    np.testing.assert_allclose(tab.value[3], templates.e_cell_integral(burgers_bundle, y0, y1, 0.3)[:, 0, 0])
    # time integral over the fourth step against adaptive quadrature
    from scipy.integrate import quad
    i = 7
    val = quad(lambda s: templates.e_cell_integral(burgers_bundle, y0[i:i + 1], y1[i:i + 1], s)[0, 0, 0],
               0.3, 0.4, epsabs=1e-14)[0]
    assert abs(tab.cell[4, i] - val) < 1e-10
    # limits: 1/2 per unit length, no jumps except none for Burgers
    np.testing.assert_allclose(tab.cell_limit, 0.5 * g.dx)
    np.testing.assert_allclose(tab.edge_limit, 0.0, atol=1e-15)


def test_phase_integrals_of_pure_initial_data(burgers_bundle):
    g = ev.make_grid(20, 0.1)
    K = 20
    tab = ev.PhaseKernelTables(burgers_bundle, g, 0.05, K)
    u0 = (0.01 * sech(g.x))[:, None]
    z = np.zeros((K, g.cells, 1))
    ints = ev.phase_integrals(tab, u0, z, z)
    assert ints.phi[0] == 0.0
    l_inf = float(burgers_bundle.l_minus[0, 0, 0])
    assert abs(ints.phi_inf - l_inf * float(np.sum(u0)) * g.dx) < 1e-15
    assert ints.tail == 0.0


def test_contraction_ratio_floor():
    t = np.linspace(0, 1, 3)

    class R:
        def __init__(self, v, s):
            self.delta = ev.PhaseHistory(t, np.full(3, v), np.zeros(2))
            self.delta_star = s

    a = [R(1.0, 0.0), R(1.5, 0.0), R(1.6, 0.0)]
    b = [R(0.0, 0.0), R(1.0, 0.0), R(1.6, 0.0)]
    ratios, pairs, floor = ev.contraction_ratios(a, b)
    assert ratios[0] == pytest.approx(0.5)
    assert ratios[1] == pytest.approx(0.0)
    assert a[1].alpha_hat == pytest.approx(0.5)
    a.append(R(1.6, 0.0))
    b.append(R(1.6, 0.0))
    ratios, _, _ = ev.contraction_ratios(a, b)
    assert ratios[2] is None


def test_iteration_guards(burgers, burgers_bundle):
    m, prof = burgers
    it = ev.PhaseIteration(m, prof, burgers_bundle, lambda x: 0.5 * sech(x), t_max=1.0, dt=0.05,
                           half_width=10.0)
    with pytest.raises(IterationAbort):
        it.sweep(it.zero_seed())


def test_short_iteration_fixed_point(burgers, burgers_bundle):
    m, prof = burgers
    it = ev.PhaseIteration(m, prof, burgers_bundle, lambda x: 0.002 * sech(x), t_max=10.0, dt=0.05,
                           half_width=20.0)
    recs = it.run(None, n_max=3, tol=0)
    assert abs(recs[0].delta_star - 0.001 * math.pi) < 1e-6
    assert recs[-1].star_norm < recs[0].star_norm
    assert abs(recs[-1].delta_at_zero) < 1e-6
    d = recs[-1].to_dict()
    assert d["star_norm_of_difference"] == recs[-1].star_norm
