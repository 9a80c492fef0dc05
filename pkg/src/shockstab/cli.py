"""Batch command-line front end.

Subcommands ``check``, ``profile``, ``evans``, ``simulate``, ``iterate`` and
``report`` read a YAML run configuration (strict schema), write CSV/JSON
artifacts to ``--out`` and optionally SVG plots.  Exit codes: 0 success,
1 definite negative verdict, 2 configuration error, 3 inconclusive
verification, 4 runtime failure.
"""

import argparse
import dataclasses
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .errors import (ConfigError, InconclusiveError, IterationAbort, ShockStabError, StructuralError)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_INCONCLUSIVE = 3
EXIT_RUNTIME = 4

VOLATILE_KEYS = {"seconds", "runtime", "elapsed"}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelSection:
    name: str = "burgers"
    params: dict = field(default_factory=dict)


@dataclass
class EndstateSection:
    u_minus: Optional[list] = None
    u_plus: Optional[list] = None


@dataclass
class ProfileSection:
    half_width: Optional[float] = None
    grid_points: int = 2048


@dataclass
class GridSection:
    half_width: Optional[float] = None
    dx: float = 0.1


@dataclass
class TimeSection:
    t_max: float = 200.0
    dt: float = 0.05
    record_every: float = 1.0
    snapshots: list = field(default_factory=lambda: [20.0, 200.0])


@dataclass
class TemplateSection:
    L: Optional[float] = None
    M: Optional[float] = None
    eta: Optional[float] = None
    a: Optional[float] = None
    eta0: Optional[float] = None
    C: Optional[float] = None


@dataclass
class EvansSection:
    R: Optional[float] = 5.0
    rho: float = 1e-3
    samples: int = 64
    fd_check: bool = True
    fd_points: int = 400


@dataclass
class PerturbationSection:
    shape: str = "sech"
    amplitude: float = 0.005
    direction: Optional[list] = None
    width: float = 1.0
    center: float = 0.0


@dataclass
class IterationSection:
    max_n: int = 5
    tol: float = 1e-12
    t_max: float = 100.0
    seed_amplitude: float = 0.01
    e0_guard: float = 1e-2
    zeta_guard: float = 0.5
    star_weight: float = 1.0


@dataclass
class LemmaSection:
    enabled: bool = True
    coarse: int = 20
    fine: int = 80


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    endstates: EndstateSection = field(default_factory=EndstateSection)
    profile: ProfileSection = field(default_factory=ProfileSection)
    grid: GridSection = field(default_factory=GridSection)
    time: TimeSection = field(default_factory=TimeSection)
    templates: TemplateSection = field(default_factory=TemplateSection)
    evans: EvansSection = field(default_factory=EvansSection)
    perturbation: PerturbationSection = field(default_factory=PerturbationSection)
    iteration: IterationSection = field(default_factory=IterationSection)
    lemmas: LemmaSection = field(default_factory=LemmaSection)
    output: str = "out"
    seed: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)


POSITIVE = {
    ("profile", "half_width"), ("profile", "grid_points"), ("grid", "half_width"), ("grid", "dx"),
    ("time", "t_max"), ("time", "dt"), ("time", "record_every"), ("templates", "L"), ("templates", "M"),
    ("templates", "eta"), ("templates", "a"), ("templates", "eta0"), ("templates", "C"), ("evans", "R"),
    ("evans", "rho"), ("evans", "samples"), ("evans", "fd_points"), ("perturbation", "width"),
    ("iteration", "max_n"), ("iteration", "tol"), ("iteration", "t_max"), ("iteration", "e0_guard"),
    ("iteration", "zeta_guard"), ("iteration", "star_weight"), ("lemmas", "coarse"), ("lemmas", "fine"),
}
SHAPES = ("sech", "gaussian", "zero")


def _coerce(section, key, value, default):
    where = f"{section}.{key}"
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where} must be an integer")
        return int(value)
    if isinstance(default, float) or (default is None and isinstance(value, (int, float))
                                      and not isinstance(value, bool)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(f"{where} must be finite")
        return value
    if isinstance(default, (list, dict, str)) and not isinstance(value, type(default)):
        raise ConfigError(f"{where} must be a {type(default).__name__}")
    return value


def _build_section(cls, name, data):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {sorted(unknown)}")
    inst = cls()
    for key, value in data.items():
        default = getattr(inst, key)
        value = _coerce(name, key, value, default)
        if (name, key) in POSITIVE and value is not None and not value > 0:
            raise ConfigError(f"{name}.{key} must be positive, got {value}")
        setattr(inst, key, value)
    return inst


def config_from_dict(data) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    known = {f.name: f for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    cfg = RunConfig()
    for name, f in known.items():
        if name not in data:
            continue
        if name == "output":
            if not isinstance(data[name], str):
                raise ConfigError("output must be a directory path")
            cfg.output = data[name]
        elif name == "seed":
            cfg.seed = _coerce("top", "seed", data[name], 0)
        else:
            setattr(cfg, name, _build_section(type(getattr(cfg, name)), name, data[name]))
    if cfg.perturbation.shape not in SHAPES:
        raise ConfigError(f"perturbation.shape must be one of {SHAPES}")
    return cfg


def apply_overrides(data, overrides):
    """Apply ``KEY=VALUE`` overrides with dotted keys; values are parsed as YAML scalars."""
    data = json.loads(json.dumps(data or {}))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from None
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
            node = nxt
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
    return config_from_dict(apply_overrides(data, overrides))


# ---------------------------------------------------------------------------
# shared pipeline pieces


def _model(cfg):
    from .models import builtin
    try:
        return builtin(cfg.model.name, **cfg.model.params)
    except StructuralError as exc:
        raise ConfigError(str(exc)) from None
    except TypeError as exc:
        raise ConfigError(f"bad model parameters: {exc}") from None


def _endstates(cfg, model):
    from .models import classify_shock
    um, up = cfg.endstates.u_minus, cfg.endstates.u_plus
    if (um is None) != (up is None):
        raise ConfigError("give both endstates.u_minus and endstates.u_plus or neither")
    if um is None:
        um, up = model.default_endstates
    try:
        return classify_shock(model, um, up)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _profile(cfg, model, ends):
    from .profile import solve_profile
    return solve_profile(model, ends, domain_half_width=cfg.profile.half_width,
                         grid_points=cfg.profile.grid_points)


def _bundle(cfg, model, prof):
    from .templates import template_bundle
    over = {k: v for k, v in dataclasses.asdict(cfg.templates).items() if v is not None}
    return template_bundle(model, prof, **over)


def perturbation_function(cfg, n):
    p = cfg.perturbation
    direction = np.ones(n) if p.direction is None else np.asarray(p.direction, dtype=float)
    if direction.shape != (n,):
        raise ConfigError(f"perturbation.direction needs {n} entries")

    def f(x):
        z = (np.asarray(x, dtype=float) - p.center) / p.width
        if p.shape == "sech":
            e = np.exp(-np.abs(z))
            shape = 2 * e / (1 + e * e)
        elif p.shape == "gaussian":
            shape = np.exp(-z * z)
        else:
            shape = np.zeros_like(z)
        return p.amplitude * shape[:, None] * direction[None, :]

    return f


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items() if k not in VOLATILE_KEYS}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return _clean(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_clean(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(cfg, command):
    import scipy
    from ._accel import backend_name
    return {"command": command, "config": cfg.to_dict(), "seed": cfg.seed,
            "versions": {"shockstab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": ".".join(map(str, sys.version_info[:3]))},
            "backend": backend_name()}


def _plot(path, series, xlabel, ylabel, loglog=False, title=None):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    matplotlib.rcParams["svg.hashsalt"] = "shockstab"
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, y) in series.items():
        x = np.asarray(x)
        y = np.asarray(y)
        if loglog:
            m = (x > 0) & (y > 0)
            ax.loglog(x[m], y[m], label=label)
        else:
            ax.plot(x, y, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _heat_strip(path, trace, bundle):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    from .evolution import _diff, pointwise_ratio
    matplotlib.rcParams["svg.hashsalt"] = "shockstab"
    ts = sorted(trace.snapshots)
    if not ts:
        return None
    rows = []
    for t in ts:
        _, u = trace.snapshots[t]
        rows.append(pointwise_ratio(bundle, trace.x, t, u, _diff(u, trace.dx)) / max(trace.E0, 1e-300))
    fig, ax = plt.subplots(figsize=(6, 1 + 0.4 * len(ts)))
    im = ax.imshow(np.log10(np.maximum(np.array(rows), 1e-16)), aspect="auto",
                   extent=[trace.x[0], trace.x[-1], len(ts), 0])
    ax.set_yticks(np.arange(len(ts)) + 0.5)
    ax.set_yticklabels([f"t={t:g}" for t in ts])
    ax.set_xlabel("x")
    fig.colorbar(im, ax=ax, label="log10 pointwise ratio")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_check(cfg, out, plots=False):
    from .models import check_hypotheses
    model = _model(cfg)
    ends = _endstates(cfg, model)
    rep = check_hypotheses(model, ends)
    payload = {"model": model.name, "shock_class": ends.shock_class, "i_minus": ends.i_minus,
               "i_plus": ends.i_plus, "degree_of_compression": ends.i - ends.n,
               "rh_residual": ends.rh_residual, "hypotheses": rep.to_dict()}
    write_json(os.path.join(out, "check_report.json"), payload)
    print(f"shock class: {ends.shock_class} (i - n = {ends.i - ends.n})")
    for line in rep.summary_lines():
        print(line)
    return EXIT_OK if rep.ok else EXIT_FAIL


def cmd_profile(cfg, out, plots=False):
    from .profile import decay_rate, ode_residual, profile_to_csv
    model = _model(cfg)
    ends = _endstates(cfg, model)
    prof = _profile(cfg, model, ends)
    alpha, C, sides = decay_rate(prof, return_sides=True)
    profile_to_csv(prof, os.path.join(out, "profile.csv"))
    payload = {"model": model.name, "shock_class": ends.shock_class, "ell": prof.ell,
               "decay_rate": alpha, "decay_constant": C, "decay_rate_sides": list(sides),
               "ode_residual": ode_residual(prof, model), "half_width": prof.half_width,
               "grid_points": int(len(prof.x))}
    write_json(os.path.join(out, "profile_report.json"), payload)
    if plots:
        _plot(os.path.join(out, "profile.svg"),
              {f"u{i + 1}": (prof.x, prof.values[:, i]) for i in range(prof.n)}, "x", "profile")
    print(f"profile: ell={prof.ell}, decay rate {alpha:.6g}")
    return EXIT_OK


def cmd_evans(cfg, out, plots=False):
    from .evans import evans_to_csv, evans_to_json, fd_oracle, verify_criterion_D
    model = _model(cfg)
    ends = _endstates(cfg, model)
    prof = _profile(cfg, model, ends)
    data = verify_criterion_D(model, prof, R=cfg.evans.R, rho=cfg.evans.rho, samples=cfg.evans.samples)
    extra = {}
    if cfg.evans.fd_check:
        extra["finite_difference_spectrum_check"] = fd_oracle(model, prof, points=cfg.evans.fd_points)
    evans_to_csv(data, os.path.join(out, "evans_contour.csv"))
    payload = json.loads(evans_to_json(data, extra=_clean(extra)))
    write_json(os.path.join(out, "evans.json"), {"stability_criterion_check": payload})
    if plots:
        _plot(os.path.join(out, "evans_image.svg"), {"D(contour)": (data.D.real, data.D.imag)},
              "Re D", "Im D")
    print(f"evans verdict: {data.verdict} (winding {data.winding_number:.3f}, "
          f"origin multiplicity {data.origin_multiplicity:.3f})")
    if data.verdict == "inconclusive":
        return EXIT_INCONCLUSIVE
    ok = data.passed and extra.get("finite_difference_spectrum_check", {"passed": True})["passed"]
    return EXIT_OK if ok else EXIT_FAIL


def cmd_simulate(cfg, out, plots=False):
    from .evolution import energy_monitor, simulate, verify_decay, write_trace
    model = _model(cfg)
    ends = _endstates(cfg, model)
    prof = _profile(cfg, model, ends)
    bundle = _bundle(cfg, model, prof)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        trace = simulate(model, prof, perturbation_function(cfg, model.n), cfg.time.t_max, cfg.time.dt,
                         dx=cfg.grid.dx, half_width=cfg.grid.half_width, record_every=cfg.time.record_every,
                         snapshot_times=cfg.time.snapshots, bundle=bundle)
    decay = verify_decay(trace, bundle)
    energy = energy_monitor(trace)
    man = _manifest(cfg, "simulate")
    man["warnings"] = sorted({str(w.message) for w in caught if not issubclass(w.category, RuntimeWarning)})
    man["templates"] = bundle.to_dict()
    write_trace(trace, out, manifest_extra=man)
    write_json(os.path.join(out, "decay_report.json"), decay.to_dict())
    write_json(os.path.join(out, "energy_report.json"), energy.to_dict())
    if plots:
        t = trace.times
        _plot(os.path.join(out, "norm_decay.svg"), {k: (t, v) for k, v in trace.norms.items()},
              "t", "norm of u", loglog=True)
        _plot(os.path.join(out, "phase.svg"), {"delta(t)": (t, trace.delta)}, "t", "phase")
        _heat_strip(os.path.join(out, "pointwise_ratio.svg"), trace, bundle)
    print(f"E0 = {trace.E0:.4e}, asymptotic shift {trace.delta_star:.6g}")
    print("L^p slopes: " + ", ".join(f"{k} {v:.3f}" for k, v in decay.slopes.items()))
    print(f"energy fit feasible: {energy.feasible}")
    return EXIT_OK


def cmd_iterate(cfg, out, plots=False):
    from .evolution import PhaseHistory, PhaseIteration, contraction_ratios
    model = _model(cfg)
    ends = _endstates(cfg, model)
    prof = _profile(cfg, model, ends)
    bundle = _bundle(cfg, model, prof)
    it_cfg = cfg.iteration
    setup = PhaseIteration(model, prof, bundle, perturbation_function(cfg, model.n), t_max=it_cfg.t_max,
                           dt=cfg.time.dt, dx=cfg.grid.dx, half_width=cfg.grid.half_width,
                           record_every=cfg.time.record_every, e0_guard=it_cfg.e0_guard,
                           zeta_guard=it_cfg.zeta_guard, star_weight=it_cfg.star_weight)
    zero = setup.zero_seed()
    amp = it_cfg.seed_amplitude
    seed = (PhaseHistory.from_function(setup.t, lambda t: amp * (1 + t) ** -0.5), 0.0)
    ra = setup.run(zero, n_max=it_cfg.max_n, tol=0.0)
    rb = setup.run(seed, n_max=it_cfg.max_n, tol=0.0)
    ratios, pairs, floor = contraction_ratios(ra, rb, it_cfg.star_weight, seeds=(zero, seed))
    rows = ["n,delta_star_zero_seed,delta_star_perturbed_seed,delta0_zero_seed,delta0_perturbed_seed,"
            "pair_difference,alpha_hat"]
    for k, (a, b) in enumerate(zip(ra, rb)):
        r = ratios[k]
        rows.append(",".join([str(a.n)] + [f"{v:.17g}" for v in (a.delta_star, b.delta_star, a.delta_at_zero,
                                                                 b.delta_at_zero, pairs[k + 1])]
                             + ["" if r is None else f"{r:.17g}"]))
    with open(os.path.join(out, "iterations.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    final = ra[-1]
    measured = [r for r in ratios if r is not None]
    summary = {"contraction_check": {"alpha_hat": ratios, "pair_differences": pairs, "rounding_floor": floor,
                                     "max_alpha_hat": max(measured) if measured else None,
                                     "converged": final.star_norm <= it_cfg.tol,
                                     "final_delta_at_zero": final.delta_at_zero,
                                     "final_delta_star": final.delta_star},
               "zero_seed_records": [r.to_dict() for r in ra],
               "perturbed_seed_records": [r.to_dict() for r in rb],
               "manifest": _manifest(cfg, "iterate")}
    write_json(os.path.join(out, "iteration_records.json"), summary)
    if plots:
        _plot(os.path.join(out, "iterate_phase.svg"),
              {f"n={r.n}": (r.delta.t, r.delta.values) for r in ra}, "t", "delta^n")
    print("alpha_hat: " + ", ".join("rounding" if r is None else f"{r:.3g}" for r in ratios))
    print(f"final delta(0) = {final.delta_at_zero:.3e}, delta* = {final.delta_star:.10g}")
    return EXIT_OK


def cmd_report(cfg, out, plots=False):
    """Template/lemma verification plus a roll-up of any reports already in ``out``."""
    from .templates import kernel_bound_constants, lemma_report_to_json, refinement_check, \
        templates_to_csv, verify_convolution_lemmas, lemma_samples
    model = _model(cfg)
    ends = _endstates(cfg, model)
    prof = _profile(cfg, model, ends)
    bundle = _bundle(cfg, model, prof)
    payload = {"templates": bundle.to_dict()}
    xs = np.linspace(-40, 40, 81)
    templates_to_csv(bundle, xs, [1.0, 10.0, 100.0], os.path.join(out, "templates.csv"))
    payload["kernel_bound_constants"] = kernel_bound_constants(bundle, np.linspace(-30, 30, 61),
                                                               np.geomspace(0.1, 100, 13))
    verdict = EXIT_OK
    if cfg.lemmas.enabled:
        rep = verify_convolution_lemmas(bundle, lemma_samples(bundle, cfg.lemmas.coarse))
        ref = refinement_check(bundle, cfg.lemmas.coarse, cfg.lemmas.fine)
        lemma_report_to_json(rep, os.path.join(out, "lemma_report.json"), ref)
        payload["convolution_refinement_check"] = ref
        if not all(v["ok"] for v in ref.values()):
            verdict = EXIT_INCONCLUSIVE
    rollup = {}
    for name in ("check_report.json", "profile_report.json", "evans.json", "decay_report.json",
                 "energy_report.json", "iteration_records.json"):
        p = os.path.join(out, name)
        if os.path.exists(p):
            with open(p) as fh:
                data = json.load(fh)
            if name == "iteration_records.json":
                data = data.get("contraction_check", {})
            rollup[name[:-5]] = data
    payload["collected_reports"] = rollup
    payload["manifest"] = _manifest(cfg, "report")
    write_json(os.path.join(out, "report.json"), payload)
    print(f"report written with {len(rollup)} collected sections")
    return verdict


COMMANDS = {"check": cmd_check, "profile": cmd_profile, "evans": cmd_evans, "simulate": cmd_simulate,
            "iterate": cmd_iterate, "report": cmd_report}


def build_parser():
    parser = argparse.ArgumentParser(prog="shockstab", description="Viscous shock stability toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0] if fn.__doc__ else name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, repeatable")
        p.add_argument("--plots", action="store_true", help="write SVG plots")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args.config, args.override)
        out = args.out or cfg.output
        os.makedirs(out, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args.plots)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InconclusiveError as exc:
        print(f"inconclusive: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE
    except IterationAbort as exc:
        print(f"iteration aborted: {exc} {json.dumps(_clean(exc.diagnostics), sort_keys=True)}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ShockStabError, NotImplementedError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
