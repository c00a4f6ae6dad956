"""ISDA lab - Main entry point."""

from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import typer
from dotenv import load_dotenv
from loguru import logger

from isda_lab.analyzer import analyze_run, format_stats_report
from isda_lab.config import ExperimentConfig, load_config
from isda_lab.errors import IsdaError
from isda_lab.experiments import (
    ablate,
    export_features,
    format_timing_report,
    report_timing,
    run_training,
    sweep_lambda,
    sweep_m,
    verify_bound,
)
from isda_lab.logging_config import add_run_log, configure_logging
from isda_lab.properties import (
    PROPERTIES,
    SuiteScale,
    format_property_report,
    run_properties,
)

app = typer.Typer(help="Implicit semantic data augmentation experiments")


@dataclass
class CliState:
    config_path: Path | None = None
    seed: int | None = None
    out: Path | None = None
    overrides: list[str] = field(default_factory=list)


def _state(ctx: typer.Context) -> CliState:
    return ctx.obj if isinstance(ctx.obj, CliState) else CliState()


def _config(ctx: typer.Context) -> ExperimentConfig:
    state = _state(ctx)
    try:
        return load_config(state.config_path, state.overrides, seed=state.seed)
    except IsdaError as e:
        logger.error("Invalid configuration: {}", e)
        raise typer.Exit(1) from e


def _out_dir(ctx: typer.Context, command: str) -> Path:
    out = _state(ctx).out
    if out is not None:
        return out
    return Path(__file__).resolve().parent / "output" / command


@app.callback()
def main(
    ctx: typer.Context,
    config: Path = typer.Option(
        None,
        "--config",
        "-c",
        path_type=Path,
        help="YAML experiment config (schema_version: 1)",
    ),
    seed: int = typer.Option(
        None,
        "--seed",
        help="Training seed; overrides train.seed",
        min=0,
    ),
    out: Path = typer.Option(
        None,
        "--out",
        "-o",
        path_type=Path,
        help="Output directory for run artifacts",
    ),
    override: list[str] = typer.Option(
        [],
        "--override",
        "-O",
        help="Config override as key.path=value (can repeat)",
    ),
    log_level: str = typer.Option(
        "INFO",
        "--log-level",
        "-l",
        help="Logging level (DEBUG, INFO, WARNING, ERROR)",
    ),
) -> None:
    """Implicit semantic data augmentation experiments."""
    load_dotenv()
    configure_logging(level=log_level.upper())
    ctx.obj = CliState(config, seed, out, list(override))


@contextmanager
def _run_log(out_dir: Path, command: str) -> Iterator[None]:
    sink_id = add_run_log(out_dir, command)
    try:
        yield
    finally:
        logger.remove(sink_id)


def _run(action, *args, **kwargs):
    try:
        return action(*args, **kwargs)
    except IsdaError as e:
        logger.error("{}: {}", type(e).__name__, e)
        raise typer.Exit(1) from e


def _report_run(summary: dict, out_dir: Path) -> None:
    logger.info(
        "Final test error {} (last-k {}); artifacts in {}",
        summary.get("final_error"),
        summary.get("last_k_error"),
        out_dir,
    )


@app.command()
def train(ctx: typer.Context) -> None:
    """Supervised training with the ISDA surrogate (or ce / explicit objectives)."""
    cfg = _config(ctx)
    out_dir = _out_dir(ctx, "train")
    with _run_log(out_dir, "train"):
        outcome = _run(run_training, cfg, out_dir, command="train")
    _report_run(outcome.summary, out_dir)


@app.command("train-semi")
def train_semi(ctx: typer.Context) -> None:
    """Semi-supervised training: labeled surrogate plus consistency on unlabeled data."""
    cfg = _config(ctx)
    out_dir = _out_dir(ctx, "train-semi")
    with _run_log(out_dir, "train-semi"):
        outcome = _run(run_training, cfg, out_dir, semi=True, command="train-semi")
    if outcome.validation_error is not None:
        logger.info("Validation error {:.4f}", outcome.validation_error)
    _report_run(outcome.summary, out_dir)


@app.command("verify-bound")
def verify_bound_command(ctx: typer.Context) -> None:
    """Train and compare the surrogate with a Monte-Carlo estimate after every epoch."""
    cfg = _config(ctx)
    out_dir = _out_dir(ctx, "verify-bound")
    with _run_log(out_dir, "verify-bound"):
        summary = _run(verify_bound, cfg, out_dir)
    gaps = summary.get("bound_gaps") or []
    if gaps:
        logger.info(
            "Final bound gap {:.6f} (relative {:.4%}), {} violation(s)",
            gaps[-1]["gap"],
            gaps[-1]["relative_gap"],
            summary["bound_violations"],
        )
    _report_run(summary, out_dir)


@app.command("sweep-m")
def sweep_m_command(ctx: typer.Context) -> None:
    """Explicit augmentation for each M in sweep.m_values, then the implicit surrogate."""
    cfg = _config(ctx)
    out_dir = _out_dir(ctx, "sweep-m")
    with _run_log(out_dir, "sweep-m"):
        _run(sweep_m, cfg, out_dir)
    logger.info("Sweep written to {}", out_dir / "sweep.csv")


@app.command("sweep-lambda")
def sweep_lambda_command(ctx: typer.Context) -> None:
    """One run per lambda0 in sweep.lambdas."""
    cfg = _config(ctx)
    out_dir = _out_dir(ctx, "sweep-lambda")
    with _run_log(out_dir, "sweep-lambda"):
        _run(sweep_lambda, cfg, out_dir)
    logger.info("Sweep written to {}", out_dir / "sweep.csv")


@app.command("ablate")
def ablate_command(
    ctx: typer.Context,
    mode: list[str] = typer.Option(
        [],
        "--mode",
        "-m",
        help="Ablation setting to run (basic, identity, diagonal, shared, constant, isda)",
    ),
) -> None:
    """Run the ablation settings on the same data and seeds."""
    cfg = _config(ctx)
    out_dir = _out_dir(ctx, "ablate")
    with _run_log(out_dir, "ablate"):
        _run(ablate, cfg, out_dir, mode or None)
    logger.info("Ablation written to {}", out_dir / "sweep.csv")


@app.command("test-props")
def test_props(
    ctx: typer.Context,
    prop: list[str] = typer.Option(
        [],
        "--property",
        "-p",
        help=f"Property to run (can repeat): {', '.join(PROPERTIES)}",
    ),
    quick: bool = typer.Option(
        False,
        "--quick",
        "-q",
        help="Reduced instance counts and sample sizes",
    ),
    save: bool = typer.Option(
        False,
        "--save",
        "-s",
        help="Save the report to <out>/properties.md",
    ),
) -> None:
    """Run the randomized property suite; exits 1 if any property fails."""
    unknown = [p for p in prop if p not in PROPERTIES]
    if unknown:
        logger.error("Unknown property {!r}", unknown[0])
        raise typer.Exit(1)
    scale = SuiteScale.quick() if quick else SuiteScale.full()
    seed = _state(ctx).seed or 0
    results = run_properties(prop or None, scale, seed)
    report = format_property_report(results)
    typer.echo(report)
    if save:
        out_dir = _out_dir(ctx, "test-props")
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "properties.md"
        path.write_text(report, encoding="utf-8")
        typer.echo(f"\nReport saved to {path}")
    if not all(r.passed for r in results):
        raise typer.Exit(1)


@app.command("report-timing")
def report_timing_command(
    ce_run: Path = typer.Argument(..., path_type=Path, help="Run directory of the CE baseline"),
    isda_run: Path = typer.Argument(..., path_type=Path, help="Run directory of the ISDA run"),
) -> None:
    """Compare wall time of a CE run and an ISDA run with the analytic FLOP overhead."""
    report = _run(report_timing, ce_run, isda_run)
    typer.echo(format_timing_report(report))


@app.command("export-features")
def export_features_command(
    ctx: typer.Context,
    run_dir: Path = typer.Argument(..., path_type=Path, help="Training run with a checkpoint"),
    split: str = typer.Option("test", "--split", help="Dataset split to embed: train or test"),
) -> None:
    """Write penultimate-layer features, labels and predictions of a trained run."""
    export = _run(export_features, run_dir, _state(ctx).out, split=split)
    typer.echo(f"Exported {export.count} x {export.feature_dim} features to {export.path}")


@app.command()
def analyze(
    run_dir: Path = typer.Argument(..., path_type=Path, help="Run directory to analyze"),
    save: bool = typer.Option(
        False,
        "--save",
        "-s",
        help="Save stats report to <run_dir>/stats.md",
    ),
) -> None:
    """Analyze a run directory and display statistics."""
    if not run_dir.exists():
        typer.echo(f"Run directory not found: {run_dir}", err=True)
        raise typer.Exit(1)

    result = analyze_run(run_dir)
    report = format_stats_report(result, run_dir)

    typer.echo(report)

    if save:
        stats_path = run_dir / "stats.md"
        stats_path.write_text(report, encoding="utf-8")
        typer.echo(f"\nStats saved to {stats_path}")


if __name__ == "__main__":
    app()
