"""Config schema, result tables, summaries, the runner, and the CLI."""

import json
import os

import pytest

from fedloc.cli import main as cli_main
from fedloc.experiments import (
    CONFIG_SNAPSHOT,
    ConfigError,
    MetricRow,
    RESULTS_CSV,
    ResultTable,
    SUMMARY_CSV,
    load_config,
    read_results_csv,
    resolve_dataset_path,
    run_experiment,
    summarize,
    validate_config,
    write_results_csv,
)


@pytest.fixture()
def base_cfg(corpus_paths):
    def make(experiment="baseline_2d", **overrides):
        raw = {
            "experiment": experiment,
            "dataset": {
                "training_csv": corpus_paths.training_csv,
                "validation_csv": corpus_paths.validation_csv,
            },
        }
        if experiment in ("floor3d_a", "floor3d_b"):
            raw["dataset"]["floor"] = None
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key].update(value)
            else:
                raw[key] = value
        return raw

    return make


# -------------------------------------------------------------- validation


def test_defaults_applied(base_cfg):
    cfg = validate_config(base_cfg())
    assert cfg.experiment == "baseline_2d"
    assert cfg.building == 1 and cfg.floor == 1
    assert cfg.hidden_widths == (128, 64)
    assert cfg.n_clients == 8
    assert cfg.rounds == 400
    assert cfg.participation_fraction == 1.0
    assert cfg.learning_rate == 0.6
    assert cfg.batch_size == 32
    assert cfg.local_epochs == 1
    assert cfg.seeds == (1, 2, 3)
    assert cfg.rho_grid == (1.0,)
    assert cfg.output_dir == "runs/baseline_2d"


def test_floor_kind_defaults_differ(base_cfg):
    cfg = validate_config(base_cfg("floor3d_b"))
    assert cfg.floor is None
    assert cfg.n_clients == 16
    assert cfg.participation_fraction == 0.5
    time_cfg = validate_config(base_cfg("transfer_time"))
    assert time_cfg.rho_grid == (0.25, 0.5, 1.0)
    assert time_cfg.transfer_round == 200


def test_unknown_key_named_by_dotted_path(base_cfg):
    raw = base_cfg()
    raw["federation"] = {"nclients": 4}
    with pytest.raises(ConfigError, match="federation.nclients"):
        validate_config(raw)
    raw = base_cfg()
    raw["bogus_section"] = 1
    with pytest.raises(ConfigError, match="bogus_section"):
        validate_config(raw)


def test_rho_out_of_range(base_cfg):
    raw = base_cfg("transfer_time", transfer={"rho_grid": [1.5]})
    with pytest.raises(ConfigError, match=r"transfer.rho_grid\[0\].*<= 1"):
        validate_config(raw)
    with pytest.raises(ConfigError, match=r"rho_grid"):
        validate_config(base_cfg("transfer_time", transfer={"rho_grid": [0.5, 0.5]}))
    with pytest.raises(ConfigError, match=r"rho_grid\[0\].*> 0"):
        validate_config(base_cfg("transfer_time", transfer={"rho_grid": [0.0]}))


def test_floor_field_per_kind(base_cfg):
    with pytest.raises(ConfigError, match="every floor"):
        validate_config(base_cfg("floor3d_a", dataset={"floor": 1}))
    with pytest.raises(ConfigError, match="single floor"):
        validate_config(base_cfg("transfer_device", dataset={"floor": None}))


def test_required_keys_and_files(base_cfg, tmp_path):
    raw = base_cfg()
    del raw["dataset"]["training_csv"]
    with pytest.raises(ConfigError, match="dataset.training_csv"):
        validate_config(raw)
    raw = base_cfg(dataset={"training_csv": str(tmp_path / "missing.csv")})
    with pytest.raises(ConfigError, match="does not exist"):
        validate_config(raw)
    with pytest.raises(ConfigError, match="experiment"):
        validate_config({"dataset": {}})
    with pytest.raises(ConfigError, match="not valid JSON"):
        validate_config("{nope")
    with pytest.raises(ConfigError, match="one of"):
        validate_config(base_cfg("warp_drive"))


def test_scalar_type_checks(base_cfg):
    with pytest.raises(ConfigError, match="training.learning_rate"):
        validate_config(base_cfg(training={"learning_rate": True}))
    with pytest.raises(ConfigError, match="federation.rounds"):
        validate_config(base_cfg(federation={"rounds": 2.5}))
    with pytest.raises(ConfigError, match="federation.rounds"):
        validate_config(base_cfg(federation={"rounds": 0}))
    with pytest.raises(ConfigError, match="participation_fraction"):
        validate_config(base_cfg(federation={"participation_fraction": 0.0}))
    with pytest.raises(ConfigError, match="seeds"):
        validate_config(base_cfg(seeds=[1, 1]))
    with pytest.raises(ConfigError, match="seeds"):
        validate_config(base_cfg(seeds=[]))
    with pytest.raises(ConfigError, match="transfer.transfer_round"):
        validate_config(base_cfg(federation={"rounds": 10}, transfer={"transfer_round": 11}))
    with pytest.raises(ConfigError, match="hidden_widths"):
        validate_config(base_cfg(model={"hidden_widths": []}))
    with pytest.raises(ConfigError, match="with_2d_stage"):
        validate_config(base_cfg("floor3d_b", floor3d={"with_2d_stage": "yes"}))


def test_resolved_round_trip_is_identity(base_cfg):
    cfg = validate_config(
        base_cfg(
            "transfer_time",
            federation={"rounds": 40},
            transfer={"transfer_round": 20, "rho_grid": [0.5, 1.0]},
            seeds=[7],
            meta={"note": "round trip"},
        )
    )
    again = validate_config(cfg.resolved())
    assert again == cfg
    assert again.resolved() == cfg.resolved()


def test_dataset_root_env_resolution(base_cfg, corpus_paths, monkeypatch, tmp_path):
    root = os.path.dirname(corpus_paths.training_csv)
    rel_train = os.path.basename(corpus_paths.training_csv)
    rel_val = os.path.basename(corpus_paths.validation_csv)

    monkeypatch.setenv("FEDLOC_DATASET_ROOT", root)
    cfg = validate_config(base_cfg(dataset={"training_csv": rel_train, "validation_csv": rel_val}))
    assert cfg.training_csv == os.path.join(root, rel_train)

    # without the env var, relative paths resolve against the config dir
    monkeypatch.delenv("FEDLOC_DATASET_ROOT")
    cfg_path = tmp_path / "cfg.json"
    raw = base_cfg(dataset={"training_csv": rel_train, "validation_csv": rel_val})
    cfg_path.write_text(json.dumps(raw))
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(str(cfg_path))
    assert resolve_dataset_path("/abs/x.csv") == "/abs/x.csv"
    assert resolve_dataset_path("x.csv", base_dir=str(tmp_path)) == str(tmp_path / "x.csv")


# -------------------------------------------------------------- result rows


def test_metric_row_validation():
    with pytest.raises(ValueError, match="units"):
        MetricRow("e", "m", 1, 1, "holdout_mae", 1.0, "furlongs")
    with pytest.raises(ValueError, match="finite"):
        MetricRow("e", "m", 1, 1, "holdout_mae", float("nan"), "meters")


def test_result_table_rejects_duplicate_keys():
    table = ResultTable()
    row = MetricRow("e", "m", 1, 10, "holdout_mae", 3.5, "meters")
    table.append(row)
    with pytest.raises(ValueError, match="duplicate"):
        table.append(MetricRow("e", "m", 1, 10, "holdout_mae", 9.9, "meters"))
    # same round, different metric name: legal (the 3D stage does this)
    table.append(MetricRow("e", "m", 1, 10, "3d_floor_accuracy", 0.9, "fraction"))
    assert len(table.rows) == 2


def test_results_csv_round_trip(tmp_path):
    rows = [
        MetricRow("exp[rho=0.5]", "H-FedTLoc", 1, 10, "holdout_mae", 0.1 + 0.2, "meters"),
        MetricRow("exp[rho=0.5]", "FedLoc", 2, 400, "holdout_mae", 7.7, "meters"),
        MetricRow("f", "fedova", 3, 400, "holdout_accuracy", 2.0 / 3.0, "fraction"),
    ]
    path = str(tmp_path / "results.csv")
    write_results_csv(rows, path)
    back = read_results_csv(path)
    assert back == rows  # repr floats survive the text round trip exactly
    with open(path) as fh:
        assert fh.readline().strip() == "experiment_id,method_tag,seed,round,metric,value,units"


def test_read_results_rejects_missing_columns(tmp_path):
    path = str(tmp_path / "bad.csv")
    with open(path, "w") as fh:
        fh.write("experiment_id,method_tag\n")
    with pytest.raises(ConfigError, match="missing result columns"):
        read_results_csv(path)


# -------------------------------------------------------------- summaries


def _row(method, seed, value, *, exp="e", rnd=100, metric="holdout_mae", units="meters"):
    return MetricRow(exp, method, seed, rnd, metric, value, units)


def test_summarize_final_means_and_std():
    rows = [_row("FedLoc", 1, 4.0), _row("FedLoc", 2, 6.0)]
    out = summarize(rows)
    finals = [r for r in out if r["kind"] == "final"]
    assert len(finals) == 1
    assert finals[0]["mean"] == 5.0
    assert finals[0]["std"] == 1.0
    assert finals[0]["n_seeds"] == 2
    assert finals[0]["final_round"] == 100

    single = summarize([_row("FedLoc", 1, 4.0)])
    assert [r["std"] for r in single if r["kind"] == "final"] == [0.0]


def test_summarize_uses_last_round_per_seed():
    rows = [
        _row("FedLoc", 1, 9.0, rnd=10),
        _row("FedLoc", 1, 4.0, rnd=100),
    ]
    out = summarize(rows)
    assert [r["mean"] for r in out if r["kind"] == "final"] == [4.0]


def test_summarize_relative_improvement_hand_check():
    rows = [_row("H-FedTLoc", 1, 4.0), _row("FedLoc", 1, 5.0), _row("N-FedLoc", 1, 8.0)]
    out = summarize(rows)
    comps = {(r["method_tag"], r["reference"]): r for r in out if r["kind"] == "relative_improvement"}
    assert comps[("H-FedTLoc", "FedLoc")]["value"] == pytest.approx((5.0 - 4.0) / 5.0)
    assert comps[("H-FedTLoc", "N-FedLoc")]["value"] == pytest.approx(0.5)
    # positive iff the method's error is lower than the reference's
    worse = summarize([_row("H-FedTLoc", 1, 6.0), _row("FedLoc", 1, 5.0)])
    val = [r["value"] for r in worse if r["kind"] == "relative_improvement"]
    assert val and val[0] < 0


def test_summarize_point_gap_hand_check():
    rows = [
        _row("fedova", 1, 0.9, metric="holdout_accuracy", units="fraction"),
        _row("multiclass-fl", 1, 0.7, metric="holdout_accuracy", units="fraction"),
    ]
    out = summarize(rows)
    gaps = [r for r in out if r["kind"] == "point_gap"]
    assert len(gaps) == 1
    assert gaps[0]["value"] == pytest.approx(20.0)
    assert gaps[0]["method_tag"] == "fedova"


def test_summarize_skips_mismatched_units():
    # accuracy-style comparisons never fire on meter metrics and vice versa
    rows = [
        _row("fedova", 1, 3.0, metric="holdout_mae", units="meters"),
        _row("multiclass-fl", 1, 4.0, metric="holdout_mae", units="meters"),
        _row("H-FedTLoc", 1, 0.5, metric="holdout_accuracy", units="fraction"),
        _row("FedLoc", 1, 0.6, metric="holdout_accuracy", units="fraction"),
    ]
    out = summarize(rows)
    assert [r for r in out if r["kind"] in ("relative_improvement", "point_gap")] == []
    with pytest.raises(ValueError):
        summarize([])


# -------------------------------------------------------------- runner


@pytest.fixture()
def tiny_baseline(base_cfg, tmp_path):
    return base_cfg(
        model={"hidden_widths": [16]},
        federation={"n_clients": 3, "rounds": 3, "eval_every": 1},
        seeds=[1],
        output_dir=str(tmp_path / "out"),
    )


def test_run_experiment_artifacts(tiny_baseline):
    cfg = validate_config(tiny_baseline)
    artifacts = run_experiment(cfg)
    assert artifacts.failures == []
    out = artifacts.output_dir
    assert os.path.isfile(os.path.join(out, CONFIG_SNAPSHOT))
    assert os.path.isfile(os.path.join(out, RESULTS_CSV))
    assert os.path.isfile(os.path.join(out, SUMMARY_CSV))
    with open(os.path.join(out, CONFIG_SNAPSHOT)) as fh:
        snapshot = json.load(fh)
    assert snapshot == cfg.resolved()
    rows = read_results_csv(os.path.join(out, RESULTS_CSV))
    assert [r.round for r in rows] == [1, 2, 3]
    assert {r.method_tag for r in rows} == {"fedloc"}
    assert artifacts.checkpoints
    for rel in artifacts.checkpoints:
        assert os.path.exists(os.path.join(out, rel))
    traces = os.listdir(os.path.join(out, "traces"))
    assert any(name.endswith(".csv") for name in traces)


def test_rerun_from_snapshot_is_byte_identical(tiny_baseline, tmp_path):
    cfg = validate_config(tiny_baseline)
    first = run_experiment(cfg)
    results_path = os.path.join(first.output_dir, RESULTS_CSV)
    with open(results_path, "rb") as fh:
        first_bytes = fh.read()

    with open(os.path.join(first.output_dir, CONFIG_SNAPSHOT)) as fh:
        snapshot = json.load(fh)
    snapshot["output_dir"] = str(tmp_path / "rerun")
    second = run_experiment(validate_config(snapshot))
    with open(os.path.join(second.output_dir, RESULTS_CSV), "rb") as fh:
        second_bytes = fh.read()
    assert first_bytes == second_bytes


def test_run_experiment_records_cell_failures(base_cfg, tmp_path):
    raw = base_cfg(
        model={"hidden_widths": [8]},
        federation={"n_clients": 3, "rounds": 2},
        transfer={"target_phone": 99},
        seeds=[1],
        output_dir=str(tmp_path / "fail_out"),
    )
    raw["experiment"] = "transfer_device"
    raw["transfer"]["transfer_round"] = 1
    artifacts = run_experiment(validate_config(raw))
    assert artifacts.failures
    assert all("target phone" in f or "99" in f for f in artifacts.failures)
    # artifacts still exist even though every cell failed
    assert os.path.isfile(os.path.join(artifacts.output_dir, RESULTS_CSV))


# -------------------------------------------------------------- CLI


@pytest.fixture()
def cfg_file(tiny_baseline, tmp_path):
    path = tmp_path / "baseline.json"
    path.write_text(json.dumps(tiny_baseline))
    return str(path)


def test_cli_validate_ok(cfg_file, capsys):
    assert cli_main(["validate", cfg_file]) == 0
    out = capsys.readouterr().out
    assert out.startswith("OK: baseline_2d")
    json.loads(out.split("\n", 1)[1])  # the resolved form is valid JSON


def test_cli_validate_rejects_bad_config(tmp_path, capsys):
    assert cli_main(["validate", str(tmp_path / "nope.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"experiment": "baseline_2d", "dataset": {}, "oops": 1}))
    assert cli_main(["validate", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_run_and_summarize_round_trip(cfg_file, tmp_path, capsys):
    out_dir = str(tmp_path / "cli_out")
    assert cli_main(["run", cfg_file, "--out", out_dir]) == 0
    printed = capsys.readouterr().out
    assert "metric rows" in printed
    assert os.path.isfile(os.path.join(out_dir, RESULTS_CSV))

    with open(os.path.join(out_dir, SUMMARY_CSV), "rb") as fh:
        from_run = fh.read()
    sum_dir = str(tmp_path / "resummarized")
    assert cli_main(["summarize", out_dir, "--out", sum_dir]) == 0
    with open(os.path.join(sum_dir, SUMMARY_CSV), "rb") as fh:
        recomputed = fh.read()
    assert recomputed == from_run


def test_cli_summarize_requires_results(tmp_path, capsys):
    assert cli_main(["summarize", str(tmp_path)]) == 2
    assert "results.csv" in capsys.readouterr().err


def test_cli_overrides(base_cfg, tmp_path, capsys):
    raw = base_cfg("transfer_device", model={"hidden_widths": [8]}, federation={"n_clients": 3})
    path = tmp_path / "device.json"
    path.write_text(json.dumps(raw))
    out_dir = str(tmp_path / "device_out")
    code = cli_main(
        ["run", str(path), "--rounds-override", "4", "--seed-override", "5", "--out", out_dir]
    )
    captured = capsys.readouterr()
    assert code == 0
    # the default hand-over round (200) cannot sit past round 4
    assert "transfer_round clamped to 2" in captured.err
    with open(os.path.join(out_dir, CONFIG_SNAPSHOT)) as fh:
        snapshot = json.load(fh)
    assert snapshot["federation"]["rounds"] == 4
    assert snapshot["transfer"]["transfer_round"] == 2
    assert snapshot["seeds"] == [5]
    rows = read_results_csv(os.path.join(out_dir, RESULTS_CSV))
    assert {r.method_tag for r in rows} == {"H-FedTLoc", "FedLoc", "N-FedLoc"}
    assert {r.seed for r in rows} == {5}
    assert max(r.round for r in rows) == 4


def test_cli_run_reports_failed_cells(base_cfg, tmp_path, capsys):
    raw = base_cfg(
        "transfer_device",
        model={"hidden_widths": [8]},
        federation={"n_clients": 3, "rounds": 2},
        transfer={"transfer_round": 1, "target_phone": 99},
        seeds=[1],
    )
    path = tmp_path / "bad_phone.json"
    path.write_text(json.dumps(raw))
    assert cli_main(["run", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "failed cell" in capsys.readouterr().err


def test_cli_seed_override_must_be_integers(cfg_file, tmp_path, capsys):
    assert cli_main(["run", cfg_file, "--seed-override", "1,a", "--out", str(tmp_path / "x")]) == 2
    assert "comma-separated integers" in capsys.readouterr().err
