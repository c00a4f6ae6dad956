import math

import pytest

from isda_lab.analyzer import analyze_run, format_stats_report
from isda_lab.experiments import run_training, verify_bound
from isda_lab.reporting import CsvLog, read_csv, read_summary, write_summary


def test_csv_log_appends_complete_rows(tmp_path):
    path = tmp_path / "log.csv"
    with CsvLog(path, ("a", "b")) as log:
        log.append({"a": 1, "b": 0.1})
        log.append({"a": 2, "b": math.nan, "extra": "ignored"})
        # Rows are on disk before the log is closed.
        assert len(read_csv(path)) == 2
    rows = read_csv(path)
    assert rows == [{"a": "1", "b": "0.1"}, {"a": "2", "b": "nan"}]


def test_csv_log_rejects_missing_columns(tmp_path):
    with CsvLog(tmp_path / "log.csv", ("a", "b")) as log, pytest.raises(KeyError):
        log.append({"a": 1})


def test_floats_are_written_exactly(tmp_path):
    value = 0.1 + 0.2
    with CsvLog(tmp_path / "log.csv", ("x",)) as log:
        log.append({"x": value})
    assert float(read_csv(tmp_path / "log.csv")[0]["x"]) == value


def test_summary_nan_becomes_null(tmp_path):
    write_summary(tmp_path, {"final_error": math.nan, "nested": [1.0, math.inf]})
    assert read_summary(tmp_path) == {"final_error": None, "nested": [1.0, None]}


def test_analyze_training_run(tiny_config, tmp_path):
    outcome = run_training(tiny_config, tmp_path, progress=False)
    result = analyze_run(tmp_path)
    assert result["command"] == "train"
    assert result["missing"] == []
    stats = result["stats"]
    assert stats["epochs"] == 3
    assert stats["final_error"] == outcome.result.final_error
    assert stats["last_k"] == 2
    assert stats["last_k_error"] == pytest.approx(outcome.result.last_k_error, abs=1e-6)
    report = format_stats_report(result, tmp_path)
    assert "## Training" in report
    assert "Last-2 average error" in report


def test_analyze_bound_run(tiny_config, tmp_path):
    verify_bound(tiny_config, tmp_path, progress=False)
    result = analyze_run(tmp_path)
    assert result["bound"]["rows"] == 3
    assert result["bound"]["violations"] == 0
    assert "## Bound gap" in format_stats_report(result, tmp_path)


def test_analyze_missing_directory(tmp_path):
    result = analyze_run(tmp_path / "absent")
    assert result["missing"] == [str(tmp_path / "absent")]
    assert "No metrics" in format_stats_report(result, tmp_path / "absent")


def test_analyze_sweep_groups_settings(tmp_path):
    with CsvLog(tmp_path / "sweep.csv", ("setting", "last_k_error")) as log:
        for setting, error in [("a", 0.2), ("a", 0.4), ("b", 0.1), ("b", math.nan)]:
            log.append({"setting": setting, "last_k_error": error})
    sweep = analyze_run(tmp_path)["sweep"]
    assert sweep["a"] == {"runs": 2, "mean": 0.3, "std_dev": pytest.approx(0.141421, abs=1e-6)}
    assert sweep["b"]["runs"] == 1
