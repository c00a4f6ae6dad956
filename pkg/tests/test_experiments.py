import json
import math
from dataclasses import replace

import numpy as np
import pytest

from isda_lab.covariance import CovarianceTracker
from isda_lab.errors import ConfigError
from isda_lab.experiments import (
    ABLATION_SETTINGS,
    BoundRow,
    ablate,
    build_datasets,
    export_features,
    flop_tally,
    format_timing_report,
    report_timing,
    run_training,
    sweep_lambda,
    sweep_m,
    verify_bound,
)
from isda_lab.reporting import METRICS_COLUMNS, SWEEP_COLUMNS, read_csv, read_summary
from isda_lab.training import load_checkpoint


def test_flop_tally_counts():
    tally = flop_tally(10, [20], 8, 4, "full")
    assert tally.baseline == 3 * 2 * (10 * 20 + 20 * 8 + 8 * 4)
    assert tally.tracker == 64
    assert tally.quadratic == 4 * 64
    assert tally.ratio == pytest.approx(tally.extra / tally.baseline)
    diag = flop_tally(10, [20], 8, 4, "diagonal")
    assert (diag.tracker, diag.quadratic) == (8, 32)
    assert flop_tally(10, [20], 8, 4, "shared").extra == tally.extra


def test_flop_overhead_scales_quadratically_in_feature_dim():
    small = flop_tally(4, [], 8, 10)
    large = flop_tally(4, [], 16, 10)
    assert large.quadratic == 4 * small.quadratic
    assert large.tracker == 4 * small.tracker


def test_build_datasets_synthetic(tiny_config):
    train, test = build_datasets(tiny_config)
    assert (len(train), len(test)) == (60, 30)
    assert train.input_dim == 4
    again, _ = build_datasets(tiny_config)
    np.testing.assert_array_equal(train.inputs, again.inputs)


def test_build_datasets_records(tiny_config, tmp_path):
    path = tmp_path / "train.bin"
    path.write_bytes(bytes([1] + [0] * 12 + [2] + [255] * 12))
    cfg = replace(
        tiny_config,
        data=replace(
            tiny_config.data,
            kind="records",
            train_files=[str(path)],
            height=2,
            width=2,
            channels=3,
        ),
    )
    train, test = build_datasets(cfg)
    assert test is None
    np.testing.assert_array_equal(train.labels, [1, 2])


def test_run_training_writes_artifacts(tiny_config, tmp_path):
    outcome = run_training(tiny_config, tmp_path, progress=False)
    rows = read_csv(tmp_path / "metrics.csv")
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
    assert tuple(rows[0]) == METRICS_COLUMNS
    assert float(rows[-1]["test_error"]) == outcome.result.final_error

    summary = read_summary(tmp_path)
    assert summary["command"] == "train"
    assert summary["config"] == tiny_config.to_dict()
    assert summary["timing"]["epochs"] == 3
    assert set(summary["artifacts"]) == {"metrics", "resolved_config", "tracker", "checkpoint"}

    tracker = CovarianceTracker.load(tmp_path / "tracker.snap")
    np.testing.assert_array_equal(tracker.counts, outcome.result.tracker.counts)
    state = load_checkpoint(tmp_path / "checkpoint.npz")
    assert state.epoch == 3


def test_metrics_are_reproducible(tiny_config, tmp_path):
    run_training(tiny_config, tmp_path / "a", progress=False)
    run_training(tiny_config, tmp_path / "b", progress=False)
    a, b = read_csv(tmp_path / "a" / "metrics.csv"), read_csv(tmp_path / "b" / "metrics.csv")
    for row_a, row_b in zip(a, b):
        for column in ("iteration", "lambda", "train_loss", "test_error"):
            assert row_a[column] == row_b[column]


def test_semi_run_reports_validation(tiny_config, tmp_path):
    outcome = run_training(tiny_config, tmp_path, semi=True, command="train-semi", progress=False)
    assert outcome.validation_error is not None
    assert 0.0 <= outcome.validation_error <= 1.0
    assert read_summary(tmp_path)["validation_error"] == outcome.validation_error


def test_merged_validation_has_no_validation_error(tiny_config):
    cfg = replace(tiny_config, semi=replace(tiny_config.semi, merge_validation=True))
    assert run_training(cfg, None, semi=True, progress=False).validation_error is None


def test_bound_row():
    row = BoundRow(3, surrogate=1.0, mc_estimate=1.2, mc_stderr=0.05)
    assert row.gap == pytest.approx(-0.2)
    assert row.violates(3.0)
    assert not row.violates(5.0)


def test_verify_bound_holds(tiny_config, tmp_path):
    summary = verify_bound(tiny_config, tmp_path, progress=False)
    rows = read_csv(tmp_path / "bound.csv")
    assert len(rows) == tiny_config.train.epochs
    for row in rows:
        surrogate, mc, se = (float(row[c]) for c in ("surrogate", "mc_estimate", "mc_stderr"))
        assert surrogate >= mc - 3.0 * se
    assert summary["bound_violations"] == 0
    assert len(summary["bound_gaps"]) == len(rows)
    assert json.loads((tmp_path / "summary.json").read_text())["artifacts"]["bound"] == "bound.csv"


def test_sweep_lambda_rows(tiny_config, tmp_path):
    cfg = replace(tiny_config, train=replace(tiny_config.train, epochs=1))
    summary = sweep_lambda(cfg, tmp_path)
    rows = read_csv(tmp_path / "sweep.csv")
    assert tuple(rows[0]) == SWEEP_COLUMNS
    assert [float(r["lambda0"]) for r in rows] == [0.0, 0.5]
    assert len(summary["settings"]) == 2


def test_sweep_m_ends_with_implicit(tiny_config, tmp_path):
    cfg = replace(tiny_config, train=replace(tiny_config.train, epochs=1))
    sweep_m(cfg, tmp_path)
    rows = read_csv(tmp_path / "sweep.csv")
    assert [r["m"] for r in rows] == ["1", "2", "inf"]
    assert rows[-1]["setting"] == "implicit"


def test_sweep_repeats_seeds(tiny_config, tmp_path):
    cfg = replace(
        tiny_config,
        train=replace(tiny_config.train, epochs=1),
        sweep=replace(tiny_config.sweep, lambdas=[0.5], seeds=[0, 1]),
    )
    sweep_lambda(cfg, tmp_path)
    assert [r["seed"] for r in read_csv(tmp_path / "sweep.csv")] == ["0", "1"]


def test_ablation_settings(tiny_config, tmp_path):
    cfg = replace(tiny_config, train=replace(tiny_config.train, epochs=1))
    ablate(cfg, tmp_path, ["basic", "diagonal"])
    rows = read_csv(tmp_path / "sweep.csv")
    settings = [(r["setting"], r["cov_mode"]) for r in rows]
    assert settings == [("basic", "full"), ("diagonal", "diagonal")]
    assert float(rows[0]["lambda0"]) == 0.0
    assert set(ABLATION_SETTINGS) == {"basic", "identity", "diagonal", "shared", "constant", "isda"}


def test_ablation_rejects_unknown(tiny_config, tmp_path):
    with pytest.raises(ConfigError):
        ablate(tiny_config, tmp_path, ["banded"])


def _paired_runs(tiny_config, tmp_path, **isda_train):
    ce_cfg = replace(tiny_config, train=replace(tiny_config.train, objective="ce", epochs=1))
    isda_cfg = replace(tiny_config, train=replace(tiny_config.train, epochs=1, **isda_train))
    run_training(ce_cfg, tmp_path / "ce", progress=False)
    run_training(isda_cfg, tmp_path / "isda", progress=False)
    return tmp_path / "ce", tmp_path / "isda"


def test_report_timing(tiny_config, tmp_path):
    ce_dir, isda_dir = _paired_runs(tiny_config, tmp_path, seed=7)
    report = report_timing(ce_dir, isda_dir)
    assert report.flops == flop_tally(4, [8], 4, 3, "full")
    assert math.isfinite(report.wall_overhead)
    assert "Analytic overhead" in format_timing_report(report)


def test_report_timing_rejects_different_configs(tiny_config, tmp_path):
    ce_dir, isda_dir = _paired_runs(tiny_config, tmp_path, batch_size=8)
    with pytest.raises(ConfigError):
        report_timing(ce_dir, isda_dir)


def test_report_timing_needs_run_directories(tmp_path):
    with pytest.raises(ConfigError):
        report_timing(tmp_path, tmp_path)


def test_export_features_matches_evaluation(tiny_config, tmp_path):
    outcome = run_training(tiny_config, tmp_path, progress=False)
    export = export_features(tmp_path)
    assert export.path == tmp_path / "features.npz"
    with np.load(export.path) as archive:
        features, labels = archive["features"], archive["labels"]
        predictions = archive["predictions"]
    _, test = build_datasets(tiny_config)
    assert features.shape == (len(test), 4) == (export.count, export.feature_dim)
    np.testing.assert_array_equal(labels, test.labels)
    assert export.error == outcome.result.final_error
    assert float(np.mean(predictions != labels)) == export.error


def test_export_train_split_to_other_directory(tiny_config, tmp_path):
    run_training(tiny_config, tmp_path / "run", progress=False)
    export = export_features(tmp_path / "run", tmp_path / "emb", split="train")
    assert export.path == tmp_path / "emb" / "features.npz"
    assert export.count == 60


def test_export_features_errors(tiny_config, tmp_path):
    with pytest.raises(ConfigError):
        export_features(tmp_path)
    cfg = replace(tiny_config, train=replace(tiny_config.train, epochs=1))
    run_training(cfg, tmp_path, progress=False)
    with pytest.raises(ConfigError):
        export_features(tmp_path, split="validation")
