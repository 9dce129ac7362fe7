import csv
import json
import textwrap

import pytest

from residual_tuner import cli, pipeline
from residual_tuner.config import ConfigError, parse_config
from residual_tuner.experiment import OUT_ROOT_ENV
from residual_tuner.report import IncompleteRun, compare_runs, convergence_time
from residual_tuner.ukf_tuner import TunerError

SMALL = textwrap.dedent("""\
    name: small
    robot: diff-drive
    seed: 3
    plant:
      wheel_radius: 0.05
      wheel_base: 0.05
      wheel_speed_scale: 6.0
    sim:
      residuals:
        - {kind: constant, bias: [0.0, 0.0, 0.2]}
      noise: {kind: gaussian, sigma: 0.01}
    trajectory: {kind: spin-in-place, amplitude: 2.0, period: 4.0, duration: 1.0}
    stages:
      - kind: sim-to-kin
    """)

STAGED = textwrap.dedent("""\
    name: staged
    robot: diff-drive
    seed: 1
    plant: {wheel_radius: 0.05, wheel_base: 0.05, wheel_speed_scale: 6.0}
    sim:
      residuals: [{kind: constant, bias: [0.0, 0.0, 0.2]}]
      noise: {sigma: 0.01}
    real:
      residuals: [{kind: constant, bias: [0.0, 0.0, 0.25]}]
      noise: {kind: mixture, sigma: 0.01}
    trajectory: {kind: spin-in-place, amplitude: 2.0, period: 4.0, duration: 1.0}
    stages:
      - {kind: sim-to-kin}
      - {kind: real-to-kin}
      - {kind: real-to-sim}
    """)


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def _run(cfg, out, *extra):
    return cli.main(["run", str(cfg), "--out", str(out), "--single-thread", *extra])


def test_run_happy_path(tmp_path, small_cfg, capsys):
    out = tmp_path / "run"
    assert _run(small_cfg, out) == 0
    for name in ("config.yaml", "metrics.csv", "manifest.json", "diagnostics_sim-to-kin.csv",
                 "chain_0_sim-to-kin.json", "stream_sim-to-kin.csv"):
        assert (out / name).is_file(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and len(manifest["config_hash"]) == 64
    assert manifest["stages"][0]["updates"] == 5
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 100
    assert "sim-to-kin" in capsys.readouterr().out


def test_run_dir_is_self_describing(tmp_path, small_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(small_cfg, a) == 0
    # re-running from the copied config reproduces the metrics
    assert _run(a / "config.yaml", b) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_negative_radius_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(SMALL.replace("wheel_radius: 0.05", "wheel_radius: -0.05"))
    assert _run(p, tmp_path / "out") == 2
    err = capsys.readouterr().err
    assert f"{p}:5:" in err and "wheel_radius" in err
    assert not (tmp_path / "out").exists()


def test_unknown_key_rejected(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(SMALL + "colour: blue\n")
    assert _run(p, tmp_path / "out") == 2
    assert ":15:" in capsys.readouterr().err


def test_infeasible_trajectory_rejected(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(SMALL.replace("wheel_base: 0.05", "wheel_base: 0.5"))
    assert _run(p, tmp_path / "out") == 2
    err = capsys.readouterr().err
    assert ":12:" in err and "turn rate" in err


def test_config_schema_errors():
    with pytest.raises(ConfigError, match="invalid YAML"):
        parse_config("robot: [", "x.yaml")
    with pytest.raises(ConfigError, match="mapping"):
        parse_config("- 1", "x.yaml")
    with pytest.raises(ConfigError, match="order"):
        parse_config(STAGED.replace("- {kind: sim-to-kin}", "- {kind: later}").replace(
            "- {kind: real-to-sim}", "- {kind: sim-to-kin}").replace("later", "real-to-sim"))
    with pytest.raises(ConfigError, match="costs"):
        parse_config(SMALL.replace("- kind: sim-to-kin", "- {kind: sim-to-kin, costs: [1, 0, 1]}"))


def test_config_hash_stable():
    a, b = parse_config(SMALL), parse_config(SMALL + "\n# trailing comment\n")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != parse_config(SMALL.replace("seed: 3", "seed: 4")).config_hash()


def test_existing_directory_refused(tmp_path, small_cfg, capsys):
    out = tmp_path / "run"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert _run(small_cfg, out) == 2
    assert "already exists" in capsys.readouterr().err
    assert [p.name for p in out.iterdir()] == ["keep.txt"]


def test_default_out_root_from_environment(tmp_path, small_cfg, monkeypatch):
    monkeypatch.setenv(OUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["run", str(small_cfg), "--single-thread"]) == 0
    (run,) = (tmp_path / "root").iterdir()
    assert run.name.startswith("small-")


def test_overrides_change_the_run(tmp_path, small_cfg):
    assert _run(small_cfg, tmp_path / "a") == 0
    assert _run(small_cfg, tmp_path / "b", "--stride", "10", "--filter-alpha", "1.0", "--seed", "8") == 0
    m = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert m["stages"][0]["updates"] == 9
    cfg_copy = (tmp_path / "b" / "config.yaml").read_text()
    assert "stride: 10" in cfg_copy and "seed: 8" in cfg_copy


def test_deterministic_metrics(tmp_path):
    p = tmp_path / "staged.yaml"
    p.write_text(STAGED)
    assert _run(p, tmp_path / "a") == 0
    assert _run(p, tmp_path / "b") == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert [s["kind"] for s in m["stages"]] == ["sim-to-kin", "real-to-kin", "real-to-sim"]
    assert m["stages"][0]["warm_start"] is None
    assert isinstance(m["stages"][1]["warm_start"], bool)


def test_threaded_run(tmp_path, small_cfg):
    assert cli.main(["run", str(small_cfg), "--out", str(tmp_path / "t")]) == 0
    m = json.loads((tmp_path / "t" / "manifest.json").read_text())
    assert m["single_thread"] is False
    assert m["stages"][0]["updates"] + m["stages"][0]["skipped_updates"] == 5


def test_compare_with_itself(tmp_path, small_cfg, capsys):
    run = tmp_path / "run"
    assert _run(small_cfg, run) == 0
    report = tmp_path / "cmp.csv"
    assert cli.main(["compare", str(run), str(run), "--out", str(report)]) == 0
    rows = list(csv.DictReader(open(report)))
    assert {r["metric"] for r in rows} == {"mean_h2", "trailing_mean_h2", "convergence_time"}
    assert all(float(r["delta"]) == 0.0 for r in rows)
    assert "trailing_mean_h2" in capsys.readouterr().out


def test_compare_incomplete_run(tmp_path, small_cfg, capsys):
    run = tmp_path / "run"
    assert _run(small_cfg, run) == 0
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "metrics.csv").write_text((run / "metrics.csv").read_text())
    assert cli.main(["compare", str(run), str(broken), "--out", str(tmp_path / "c.csv")]) == 2
    assert "manifest.json" in capsys.readouterr().err
    (run / "metrics.csv").unlink()
    with pytest.raises(IncompleteRun, match="metrics.csv"):
        compare_runs(run, run)


def test_plot_outputs(tmp_path, small_cfg):
    run = tmp_path / "run"
    assert _run(small_cfg, run) == 0
    assert cli.main(["plot", str(run), "--max-points", "37"]) == 0
    assert (run / "h2_sim-to-kin.svg").stat().st_size > 0
    assert (run / "channels_sim-to-kin.svg").stat().st_size > 0
    rows = list(csv.DictReader(open(run / "plot_data.csv")))
    assert 0 < len(rows) <= 37


def test_plot_single_record_and_empty(tmp_path, small_cfg):
    run = tmp_path / "run"
    assert _run(small_cfg, run) == 0
    lines = (run / "metrics.csv").read_text().splitlines()
    (run / "metrics.csv").write_text("\n".join(lines[:2]) + "\n")
    assert cli.main(["plot", str(run)]) == 0
    assert len(list(csv.DictReader(open(run / "plot_data.csv")))) == 1
    (run / "metrics.csv").write_text(lines[0] + "\n")
    assert cli.main(["plot", str(run)]) == 2


def test_replay_recorded_stream(tmp_path, small_cfg):
    run = tmp_path / "run"
    assert _run(small_cfg, run) == 0
    out = tmp_path / "replay"
    stream = run / "stream_sim-to-kin.csv"
    assert cli.main(["replay", str(stream), "--config", str(small_cfg), "--out", str(out), "--single-thread"]) == 0
    # same stream, plant and stage settings: the replayed metrics match the original run
    assert (out / "metrics.csv").read_bytes() == (run / "metrics.csv").read_bytes()


def test_replay_picks_named_stage(tmp_path, capsys):
    p = tmp_path / "staged.yaml"
    p.write_text(STAGED)
    run = tmp_path / "run"
    assert _run(p, run) == 0
    stream = run / "stream_real-to-kin.csv"
    out = tmp_path / "replay"
    args = ["replay", str(stream), "--config", str(p), "--stage", "real-to-kin", "--single-thread"]
    assert cli.main(args + ["--out", str(out)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert [s["kind"] for s in m["stages"]] == ["real-to-kin"]
    assert {r["stage"] for r in csv.DictReader((out / "metrics.csv").open())} == {"real-to-kin"}


def test_replay_stage_missing_from_config(tmp_path, small_cfg, capsys):
    run = tmp_path / "run"
    assert _run(small_cfg, run) == 0
    args = ["replay", str(run / "stream_sim-to-kin.csv"), "--config", str(small_cfg),
            "--stage", "real-to-sim", "--out", str(tmp_path / "o")]
    assert cli.main(args) == 2
    assert "no real-to-sim stage" in capsys.readouterr().err


def test_replay_bad_stream(tmp_path, capsys):
    bad = tmp_path / "s.csv"
    bad.write_text("a,b\n1,2\n")
    assert cli.main(["replay", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_convergence_time_of_step():
    t = [0.01 * k for k in range(200)]
    h2 = [1.0] * 50 + [0.0] * 150
    # causal window of 10 samples: the average reaches 0.1 once 9 zeros are in
    assert convergence_time(t, h2) == pytest.approx(0.58)
    assert convergence_time(t, [0.2] * 200) == 0.0


def test_stage_failure_exits_1_with_partial_logs(tmp_path, small_cfg, monkeypatch, capsys):
    real_update = pipeline.ukf_update
    calls = []

    def flaky(*args, **kw):
        calls.append(1)
        if len(calls) == 3:
            raise TunerError("rollout produced non-finite predictions")
        return real_update(*args, **kw)

    monkeypatch.setattr(pipeline, "ukf_update", flaky)
    out = tmp_path / "run"
    assert _run(small_cfg, out) == 1
    assert "partial logs" in capsys.readouterr().err
    m = json.loads((out / "manifest.json").read_text())
    assert m["status"] == "failed" and m["stages"][0]["updates"] == 2
    assert "non-finite" in m["stages"][0]["error"]
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert 0 < len(rows) < 100
    with pytest.raises(IncompleteRun, match="did not complete"):
        compare_runs(out, out)
