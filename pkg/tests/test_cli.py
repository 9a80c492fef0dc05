import json
import os
import subprocess
import sys

import pytest

from shockstab import cli
from shockstab.errors import ConfigError

FAST_SIM = ["--override", "time.t_max=4", "--override", "time.snapshots=[2, 4]", "--override", "grid.half_width=20"]


def run(tmp_path, *args):
    return cli.main(list(args) + ["--out", str(tmp_path)])


def test_defaults_and_overrides():
    cfg = cli.load_config(None, ["model.name=quadratic_gradient", "time.dt=0.025", "evans.fd_check=false"])
    assert cfg.model.name == "quadratic_gradient"
    assert cfg.time.dt == 0.025
    assert cfg.evans.fd_check is False
    assert cfg.iteration.max_n == 5


@pytest.mark.parametrize("override", ["time.bogus=1", "nosuch.key=1", "time.dt=-1", "time.dt=abc",
                                      "perturbation.shape=square", "time.dt"])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        cli.load_config(None, [override])


def test_yaml_config(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("model:\n  name: p_system\n  params:\n    mu: 2.0\ntime:\n  t_max: 10\n")
    cfg = cli.load_config(str(p))
    assert cfg.model.params == {"mu": 2.0}
    assert cfg.time.t_max == 10.0


def test_malformed_yaml_exit_code(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("model: [unclosed\n")
    assert cli.main(["check", "--config", str(p), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_unknown_subcommand():
    assert cli.main(["frobnicate"]) == cli.EXIT_CONFIG


def test_check_pass_and_fail(tmp_path, capsys):
    assert run(tmp_path, "check") == cli.EXIT_OK
    data = json.load(open(tmp_path / "check_report.json"))
    assert data["shock_class"] == "Lax"
    code = run(tmp_path, "check", "--override", "model.name=p_system", "--override", "model.params={frame_speed: 0.0}")
    assert code == cli.EXIT_FAIL
    assert "FAIL" in capsys.readouterr().out


def test_quadratic_check_reports_undercompressive(tmp_path):
    assert run(tmp_path, "check", "--override", "model.name=quadratic_gradient") == cli.EXIT_OK
    data = json.load(open(tmp_path / "check_report.json"))
    assert data["shock_class"] == "undercompressive"
    assert data["degree_of_compression"] == 0


def test_profile_command(tmp_path):
    assert run(tmp_path, "profile", "--plots") == cli.EXIT_OK
    rep = json.load(open(tmp_path / "profile_report.json"))
    assert abs(rep["decay_rate"] - 1.0) < 1e-2
    assert (tmp_path / "profile.csv").exists()
    assert (tmp_path / "profile.svg").exists()


def test_profile_runtime_failure(tmp_path):
    code = run(tmp_path, "profile", "--override", "endstates.u_minus=[1.0]", "--override", "endstates.u_plus=[-0.5]")
    assert code == cli.EXIT_RUNTIME


def test_evans_command(tmp_path):
    code = run(tmp_path, "evans", "--override", "evans.samples=32", "--override", "evans.fd_points=200")
    assert code == cli.EXIT_OK
    data = json.load(open(tmp_path / "evans.json"))["stability_criterion_check"]
    assert data["verdict"] == "pass"
    assert data["finite_difference_spectrum_check"]["passed"]
    assert (tmp_path / "evans_contour.csv").exists()


def test_simulate_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["simulate", "--out", str(a)] + FAST_SIM) == cli.EXIT_OK
    assert cli.main(["simulate", "--out", str(b)] + FAST_SIM) == cli.EXIT_OK
    names = sorted(os.listdir(a))
    assert "trace_timeseries.csv" in names and "decay_report.json" in names
    assert "trace_snapshot_t4.csv" in names
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_simulate_plots(tmp_path):
    assert run(tmp_path, "simulate", "--plots", *FAST_SIM) == cli.EXIT_OK
    for n in ("norm_decay.svg", "phase.svg", "pointwise_ratio.svg"):
        assert (tmp_path / n).stat().st_size > 0


def test_iterate_command(tmp_path):
    code = run(tmp_path, "iterate", "--override", "iteration.t_max=20", "--override", "iteration.max_n=2",
               "--override", "grid.half_width=15", "--override", "perturbation.amplitude=0.002")
    assert code == cli.EXIT_OK
    rows = (tmp_path / "iterations.csv").read_text().splitlines()
    assert rows[0].startswith("n,") and len(rows) == 3
    data = json.load(open(tmp_path / "iteration_records.json"))
    assert len(data["contraction_check"]["alpha_hat"]) == 2


def test_iterate_large_data_aborts(tmp_path):
    code = run(tmp_path, "iterate", "--override", "iteration.t_max=2", "--override", "perturbation.amplitude=0.5",
               "--override", "grid.half_width=15")
    assert code == cli.EXIT_RUNTIME


def test_report_rollup(tmp_path):
    assert run(tmp_path, "check") == cli.EXIT_OK
    code = run(tmp_path, "report", "--override", "lemmas.coarse=4", "--override", "lemmas.fine=8")
    assert code in (cli.EXIT_OK, cli.EXIT_INCONCLUSIVE)
    rep = json.load(open(tmp_path / "report.json"))
    assert "check_report" in rep["collected_reports"]
    assert "convolution_refinement_check" in rep
    assert (tmp_path / "templates.csv").exists()
    assert (tmp_path / "lemma_report.json").exists()


def test_console_script(tmp_path):
    exe = os.path.join(os.path.dirname(sys.executable), "shockstab")
    cmd = [exe] if os.path.exists(exe) else [sys.executable, "-m", "shockstab.cli"]
    res = subprocess.run(cmd + ["check", "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0
    assert "shock class: Lax" in res.stdout


def test_numpy_backend_subprocess(tmp_path):
    env = dict(os.environ, SHOCKSTAB_NO_NUMBA="1")
    res = subprocess.run([sys.executable, "-m", "shockstab.cli", "simulate", "--out", str(tmp_path)] + FAST_SIM,
                         capture_output=True, text=True, env=env)
    assert res.returncode == 0, res.stderr
    man = json.load(open(tmp_path / "trace_manifest.json"))
    assert man["summary"]["backend"] == "numpy"
