"""Analyze a run directory and compute summary statistics."""

import math
from pathlib import Path
from statistics import mean, stdev

from isda_lab.reporting import read_csv, read_summary

DEFAULT_LAST_K = 10


def _floats(rows: list[dict[str, str]], column: str) -> list[float]:
    values = []
    for row in rows:
        try:
            values.append(float(row[column]))
        except (KeyError, ValueError):
            continue
    return values


def _finite(values: list[float]) -> list[float]:
    return [v for v in values if math.isfinite(v)]


def _metrics_stats(rows: list[dict[str, str]], last_k: int) -> dict:
    errors = _finite(_floats(rows, "test_error"))
    losses = _floats(rows, "train_loss")
    lambdas = _floats(rows, "lambda")
    stats: dict = {"epochs": len(rows)}
    if losses:
        stats["final_train_loss"] = round(losses[-1], 6)
    if lambdas:
        stats["final_lambda"] = round(lambdas[-1], 6)
    wall = _floats(rows, "wall_ms")
    if wall:
        stats["train_ms"] = round(sum(wall), 1)
    if errors:
        best = min(errors)
        stats["final_error"] = errors[-1]
        stats["best_error"] = best
        stats["best_epoch"] = errors.index(best)
        stats["last_k"] = min(last_k, len(errors))
        stats["last_k_error"] = round(mean(errors[-last_k:]), 6)
    return stats


def _bound_stats(rows: list[dict[str, str]], z: float) -> dict:
    surrogate = _floats(rows, "surrogate")
    mc = _floats(rows, "mc_estimate")
    se = _floats(rows, "mc_stderr")
    if not surrogate or len(surrogate) != len(mc) or len(mc) != len(se):
        return {}
    gaps = [s - m for s, m in zip(surrogate, mc)]
    relative = [g / s for g, s in zip(gaps, surrogate) if s]
    return {
        "rows": len(gaps),
        "mean_gap": round(mean(gaps), 6),
        "min_gap": round(min(gaps), 6),
        "max_relative_gap": round(max(relative), 6) if relative else None,
        "final_relative_gap": round(relative[-1], 6) if relative else None,
        "violations": sum(1 for g, e in zip(gaps, se) if g < -z * e),
    }


def _sweep_stats(rows: list[dict[str, str]]) -> dict[str, dict]:
    grouped: dict[str, list[float]] = {}
    for row in rows:
        try:
            value = float(row["last_k_error"])
        except (KeyError, ValueError):
            continue
        if math.isfinite(value):
            grouped.setdefault(row["setting"], []).append(value)
    return {
        name: {
            "runs": len(values),
            "mean": round(mean(values), 6),
            "std_dev": round(stdev(values), 6) if len(values) > 1 else 0,
        }
        for name, values in grouped.items()
    }


def analyze_run(run_dir: Path) -> dict:
    """
    Read ``metrics.csv``, ``bound.csv``, ``sweep.csv`` and ``summary.json`` when present.

    Returns:
        Dict with keys: command, stats, bound, sweep, missing
    """
    run_path = Path(run_dir)
    result: dict = {"command": None, "stats": {}, "bound": {}, "sweep": {}, "missing": []}
    if not run_path.is_dir():
        result["missing"].append(str(run_path))
        return result

    last_k, z = DEFAULT_LAST_K, 3.0
    if (run_path / "summary.json").is_file():
        summary = read_summary(run_path)
        result["command"] = summary.get("command")
        config = summary.get("config") or {}
        last_k = int(config.get("train", {}).get("last_k", DEFAULT_LAST_K))
        z = float(config.get("oracle", {}).get("stderr_z", z))
    else:
        result["missing"].append("summary.json")

    if (run_path / "metrics.csv").is_file():
        result["stats"] = _metrics_stats(read_csv(run_path / "metrics.csv"), last_k)
    if (run_path / "bound.csv").is_file():
        result["bound"] = _bound_stats(read_csv(run_path / "bound.csv"), z)
    if (run_path / "sweep.csv").is_file():
        result["sweep"] = _sweep_stats(read_csv(run_path / "sweep.csv"))
    return result


def format_stats_report(result: dict, run_dir: Path) -> str:
    """Format analysis result as a readable report."""
    lines: list[str] = []
    lines.append("# Run Statistics")
    lines.append("")
    lines.append(f"**Run directory:** `{run_dir}`")
    if result.get("command"):
        lines.append(f"**Command:** `{result['command']}`")
    lines.append("")

    stats, bound, sweep = result.get("stats", {}), result.get("bound", {}), result.get("sweep", {})
    if not (stats or bound or sweep):
        lines.append("No metrics, bound or sweep files found.")
        return "\n".join(lines)

    if stats:
        s = stats
        lines.append("## Training")
        lines.append("")
        lines.append("| Metric | Value |")
        lines.append("|--------|-------|")
        lines.append(f"| Epochs | {s.get('epochs', 0)} |")
        if "final_error" in s:
            lines.append(f"| Final test error | {s['final_error']:.4f} |")
            lines.append(f"| Best test error | {s['best_error']:.4f} (epoch {s['best_epoch']}) |")
            lines.append(f"| Last-{s['last_k']} average error | {s['last_k_error']:.4f} |")
        if "final_train_loss" in s:
            lines.append(f"| Final train loss | {s['final_train_loss']} |")
        if "final_lambda" in s:
            lines.append(f"| Lambda at end | {s['final_lambda']} |")
        if "train_ms" in s:
            lines.append(f"| Training time | {s['train_ms']} ms |")
        lines.append("")

    if bound:
        b = bound
        lines.append("## Bound gap")
        lines.append("")
        lines.append("| Metric | Value |")
        lines.append("|--------|-------|")
        lines.append(f"| Checks | {b['rows']} |")
        lines.append(f"| Mean gap | {b['mean_gap']} |")
        lines.append(f"| Min gap | {b['min_gap']} |")
        lines.append(f"| Max relative gap | {b['max_relative_gap']} |")
        lines.append(f"| Final relative gap | {b['final_relative_gap']} |")
        lines.append(f"| Violations | {b['violations']} |")
        lines.append("")

    if sweep:
        lines.append("## Settings")
        lines.append("")
        lines.append("| Setting | Runs | Mean last-k error | Std dev |")
        lines.append("|---------|------|-------------------|---------|")
        for name, row in sweep.items():
            lines.append(f"| {name} | {row['runs']} | {row['mean']:.4f} | {row['std_dev']} |")
        lines.append("")

    return "\n".join(lines)
