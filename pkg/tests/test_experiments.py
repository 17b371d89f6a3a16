import csv

import numpy as np
import pytest

from probcert.cli import main
from probcert.errors import ConfigurationError
from probcert.experiments import (
    CONTROLLERS,
    RUN_HEADER,
    SUMMARY_HEADER,
    build_field,
    build_id,
    check_rl,
    emit_outputs,
    fmt,
    run_closed_loop,
    run_rl,
)
from probcert.field import SafeProbField
from probcert.scenario import load_scenario


def _coarse(name="system1", **system):
    sc = load_scenario(name)
    sc.name = f"{name}_coarse"
    sc.estimation.grid = {"x0": {"start": -1.0, "stop": 12.0, "step": 0.5}}
    sc.estimation.samples = 300
    sc.run.T_max = 1.0
    sc.run.n_traj = 6
    for k, v in system.items():
        setattr(sc.system, k, v)
    return sc


@pytest.fixture(scope="module")
def coarse():
    sc = _coarse()
    return sc, build_field(sc, jobs=2)


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_empty_run_gives_header_only(coarse, tmp_path):
    sc, field = coarse
    r = run_closed_loop(sc, "proposed", "worst-case", n_traj=0, field=field)
    assert r.n_traj == 0
    paths = emit_outputs([r], tmp_path, seed=0, build="b0")
    rows = _read(tmp_path / "system1_coarse_worst-case.csv")
    assert rows == [RUN_HEADER]
    summary = _read(tmp_path / "summary.csv")
    assert summary[0] == SUMMARY_HEADER
    assert len(paths) == 2


def test_no_results_header_only_summary(tmp_path):
    emit_outputs([], tmp_path, seed=0, build="b0")
    assert _read(tmp_path / "summary.csv") == [SUMMARY_HEADER]


def _all_runs(sc, field, mode, seed=3):
    return [run_closed_loop(sc, c, mode, seed=seed, field=field) for c in CONTROLLERS + ("nominal",)]


def test_rerun_is_byte_identical(coarse, tmp_path):
    sc, field = coarse
    for out in ("a", "b"):
        emit_outputs(_all_runs(sc, field, "switching"), tmp_path / out, seed=3, build="b0")
    for name in ("system1_coarse_switching.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_csv_format_and_provenance(coarse, tmp_path):
    sc, field = coarse
    results = _all_runs(sc, field, "worst-case", seed=11)
    emit_outputs(results, tmp_path, seed=11, build="abc123")
    raw = (tmp_path / "system1_coarse_worst-case.csv").read_bytes()
    assert raw.count(b"\r\n") == raw.count(b"\n")
    rows = _read(tmp_path / "system1_coarse_worst-case.csv")
    assert rows[0] == RUN_HEADER
    body = rows[1:]
    assert len(body) == len(results) * 11
    i_seed, i_build = RUN_HEADER.index("master_seed"), RUN_HEADER.index("build_id")
    assert all(r[i_seed] == "11" and r[i_build] == "abc123" for r in body)
    summary = _read(tmp_path / "summary.csv")
    h = summary[0]
    for row in summary[1:]:
        rec = dict(zip(h, row))
        assert (rec["alpha"], rec["epsilon"], rec["H"]) == ("1", "0.1", "10")
        assert (rec["stocbf_eta"], rec["prsbc_eta"], rec["prsbc_epsilon"]) == ("1", "1", "0.1")
        assert (rec["cvar_gamma"], rec["cvar_beta"]) == ("0.65", "0.1")
        assert rec["master_seed"] == "11" and rec["build_id"] == "abc123"


def test_fmt():
    assert fmt(1 / 3) == "0.333333333"
    assert fmt(123456789.123) == "123456789"
    assert fmt(np.float64(2.5e-12)) == "2.5e-12"
    assert fmt(7) == "7" and fmt(True) == "1" and fmt("x") == "x"
    assert fmt(np.nan) == "nan"


def test_build_id():
    b = build_id()
    assert isinstance(b, str) and b and "\n" not in b


def test_quiet_system_makes_controllers_agree(tmp_path):
    """Without noise and with a nominal that never violates, every filter stays idle."""
    sc = _coarse(sigma=[["0"]])
    sc.nominal.kind = "zero"
    sc.nominal.gain = None
    field = build_field(sc)
    runs = {c: run_closed_loop(sc, c, "switching", field=field) for c in CONTROLLERS + ("nominal",)}
    ref = runs["nominal"].states
    for c, r in runs.items():
        assert np.array_equal(r.states, ref), c
        assert not r.active.any(), c
        assert r.safe[-1] == 1.0


def test_diverged_rows_count_as_unsafe(coarse):
    sc, field = coarse
    with np.errstate(over="ignore"):
        r = run_closed_loop(sc, "nominal", "switching", field=field, nominal=lambda X: 1e300 * X)
    assert r.safe[-1] == 0.0
    assert np.all(r.F[-1] == 0.0)


def test_proposed_worst_case_tracks_level(coarse):
    sc, field = coarse
    r = run_closed_loop(sc, "proposed", "worst-case", field=field, n_traj=40)
    assert r.d_f.shape == (10, 40)
    assert np.all(np.abs(r.expected_F - 0.9) < 0.1)


def test_run_closed_loop_validation(coarse):
    sc, field = coarse
    with pytest.raises(ConfigurationError):
        run_closed_loop(sc, "pid", "switching", field=field)
    with pytest.raises(ConfigurationError):
        run_closed_loop(sc, "proposed", "sideways", field=field)
    with pytest.raises(ConfigurationError):
        run_closed_loop(sc, "proposed", "switching", field=None)


def test_plots(coarse, tmp_path):
    pytest.importorskip("matplotlib")
    sc, field = coarse
    paths = emit_outputs(_all_runs(sc, field, "worst-case"), tmp_path, seed=0, build="b0", plots=True)
    svg = [p for p in paths if p.suffix == ".svg"]
    assert svg and svg[0].read_text().lstrip().startswith("<?xml")


def test_rl_outputs(tmp_path):
    sc = load_scenario("chain")
    sc.rl.pg_iterations = 20
    sc.rl.q_iterations = 30
    runs = [run_rl(sc, k, f, seed=2) for k in ("pg", "qlearn") for f in (False, True)]
    paths = emit_outputs([], tmp_path, seed=2, build="b0", rl_runs=runs)
    names = sorted(p.name for p in paths)
    assert names == ["rl_pg_filtered.csv", "rl_pg_filtered_paths.csv", "rl_pg_unfiltered.csv",
                     "rl_pg_unfiltered_paths.csv", "rl_q_filtered.csv", "rl_q_unfiltered.csv"]
    pg = _read(tmp_path / "rl_pg_unfiltered.csv")
    assert len(pg) == 21 and pg[1][-2:] == ["2", "b0"]
    q = _read(tmp_path / "rl_q_filtered.csv")
    assert len(q) == 32
    with pytest.raises(ConfigurationError):
        run_rl(sc, "sarsa", False)
    assert {c.name for c in check_rl(runs)} >= {"pg filtered states stay <= 7"}


# -- command line ---------------------------------------------------------------------------------

def test_cli_rl_q_passes(tmp_path, capsys):
    assert main(["rl-q", "--out", str(tmp_path), "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 4


def test_cli_failing_threshold_exits_one(tmp_path, capsys):
    sc = load_scenario("chain")
    sc.rl.pg_iterations = 20
    path = sc.save(tmp_path / "short.yaml")
    code = main(["rl-pg", "--scenario", str(path), "--out", str(tmp_path / "o")])
    out = capsys.readouterr().out
    assert code == 1
    assert "FAIL  pg unfiltered" in out


def test_cli_errors_exit_two(tmp_path, capsys):
    assert main(["estimate", "--scenario", "system9", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\nsystem: {f: ['__import__(1)']}\n")
    assert main(["worst-case", "--scenario", str(bad), "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_estimate_and_reuse(tmp_path, capsys):
    sc = _coarse()
    path = sc.save(tmp_path / "coarse.yaml")
    assert main(["estimate", "--scenario", str(path), "--out", str(tmp_path), "--samples", "200", "--jobs", "2"]) == 0
    field_path = tmp_path / "system1_coarse.field"
    field = SafeProbField.load(field_path)
    assert field.values.shape == (27,)
    code = main(["switching", "--scenario", str(path), "--field", str(field_path), "--controller", "stocbf",
                 "--out", str(tmp_path / "run")])
    assert code == 0
    assert (tmp_path / "run" / "system1_coarse_switching.csv").exists()


def test_initial_precondition_is_reported(coarse, caplog):
    sc, field = coarse
    ok = run_closed_loop(sc, "proposed", "switching", field=field, n_traj=2)
    assert ok.params["initial_F_above_level"]
    with caplog.at_level("WARNING", logger="probcert"):
        low = run_closed_loop(sc, "proposed", "switching", field=field, n_traj=2, x0=[1.2])
    assert not low.params["initial_F_above_level"]
    assert "not above" in caplog.text
