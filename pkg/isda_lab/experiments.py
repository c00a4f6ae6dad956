"""Experiment drivers behind the CLI subcommands.

Each driver builds data and models from an ``ExperimentConfig``, runs one or more
training jobs and writes its artifacts (CSV tables, tracker snapshot, checkpoint,
resolved config and ``summary.json``) into an output directory.
"""

import math
from collections.abc import Callable
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np
from loguru import logger
from tqdm import tqdm

from isda_lab.config import ExperimentConfig, load_config, write_resolved
from isda_lab.covariance import CovMode
from isda_lab.data import (
    Dataset,
    SemiSplit,
    anisotropic_covariances,
    generate_synthetic,
    load_binary_records,
    split_semi,
)
from isda_lab.errors import ConfigError
from isda_lab.losses import ClassifierHead, LabeledBatch, lambda_at, surrogate_loss
from isda_lab.numeric import Rng
from isda_lab.oracle import mc_expected_ce
from isda_lab.reporting import (
    BOUND_COLUMNS,
    METRICS_COLUMNS,
    SWEEP_COLUMNS,
    CsvLog,
    metrics_row,
    read_summary,
    write_summary,
)
from isda_lab.training import (
    EpochHook,
    EpochRecord,
    Mlp,
    TrainResult,
    build_model,
    evaluate,
    forward,
    load_checkpoint,
    save_checkpoint,
    train_semi,
    train_supervised,
)

# Stream key for bound checks, disjoint from the trainer's keys.
BOUND_STREAM = 16
FEATURES_FILE = "features.npz"
EXPORT_CHUNK = 4096

ABLATION_SETTINGS: dict[str, dict[str, Any]] = {
    "basic": {"lambda0": 0.0},
    "identity": {"cov_mode": "identity"},
    "diagonal": {"cov_mode": "diagonal"},
    "shared": {"cov_mode": "shared"},
    "constant": {"schedule": "constant"},
    "isda": {},
}

# Keys allowed to differ between the runs paired by report_timing.
TIMING_FREE_KEYS = {("train", "objective"), ("augmentation", "lambda0")}


@dataclass(frozen=True)
class RunOutcome:
    result: TrainResult
    summary: dict[str, Any]
    validation_error: float | None = None


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    """Training and test sets described by the ``data`` section."""
    d = cfg.data
    if d.kind == "records":
        train = load_binary_records(
            [Path(p) for p in d.train_files],
            d.height,
            d.width,
            d.channels,
            num_classes=d.num_classes,
        )
        test = None
        if d.test_files:
            test = load_binary_records(
                [Path(p) for p in d.test_files],
                d.height,
                d.width,
                d.channels,
                num_classes=d.num_classes,
                normalization=train.normalization,
            )
        return train, test

    if d.covariance == "anisotropic":
        covs: Any = anisotropic_covariances(
            d.num_classes,
            d.input_dim,
            Rng(d.data_seed).split(0),
            dominant=d.dominant,
            floor=d.floor,
        )
    else:
        covs = d.variance
    train = generate_synthetic(
        d.num_classes, d.input_dim, d.train_per_class, covs, d.data_seed, separation=d.separation
    )
    test = generate_synthetic(
        d.num_classes,
        d.input_dim,
        d.test_per_class,
        covs,
        d.data_seed + 1,
        separation=d.separation,
    )
    return train, test


def _model_for(cfg: ExperimentConfig, input_dim: int) -> tuple[Mlp, ClassifierHead]:
    return build_model(
        input_dim,
        cfg.model.hidden,
        cfg.model.feature_dim,
        cfg.data.num_classes,
        cfg.train.seed,
        slope=cfg.model.slope,
        activate_features=cfg.model.activate_features,
    )


def semi_split_for(cfg: ExperimentConfig, train: Dataset) -> SemiSplit:
    return split_semi(
        train,
        cfg.semi.num_labeled,
        cfg.train.seed,
        validation_fraction=cfg.semi.validation_fraction,
    )


def _chain(*hooks: EpochHook | None) -> EpochHook:
    def run(record, state, aug) -> None:
        for hook in hooks:
            if hook is not None:
                hook(record, state, aug)

    return run


def run_training(
    cfg: ExperimentConfig,
    out_dir: Path | None,
    *,
    semi: bool = False,
    command: str = "train",
    data: tuple[Dataset, Dataset | None] | None = None,
    on_epoch: EpochHook | None = None,
    progress: bool = True,
) -> RunOutcome:
    """
    One supervised or semi-supervised training run.

    With ``out_dir`` set, writes ``metrics.csv`` (one fsync'd row per epoch),
    ``tracker.snap``, ``checkpoint.npz`` (when enabled), ``resolved_config.yaml`` and
    ``summary.json``.
    """
    train, test = data or build_datasets(cfg)
    tcfg = cfg.train_config()
    model, head = _model_for(cfg, train.input_dim)

    metrics = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, out_dir)
        metrics = CsvLog(out_dir / "metrics.csv", METRICS_COLUMNS)

    def log_metrics(record: EpochRecord, state, aug) -> None:
        if metrics is not None:
            metrics.append(metrics_row(record))

    hook = _chain(log_metrics, on_epoch)
    split = None
    try:
        if semi:
            split = semi_split_for(cfg, train)
            labeled = split.merged_labeled() if cfg.semi.merge_validation else split.labeled
            result = train_semi(
                labeled,
                split.unlabeled,
                model,
                head,
                tcfg,
                test=test,
                on_epoch=hook,
                progress=progress,
            )
        else:
            result = train_supervised(
                train, model, head, tcfg, test=test, on_epoch=hook, progress=progress
            )
    finally:
        if metrics is not None:
            metrics.close()

    validation_error = None
    if split is not None and len(split.validation) and not cfg.semi.merge_validation:
        validation_error = evaluate(result.model, result.head, split.validation)

    summary: dict[str, Any] = {
        "command": command,
        "config": cfg.to_dict(),
        "input_dim": train.input_dim,
        "final_error": result.final_error,
        "last_k_error": result.last_k_error,
        "timing": {
            "wall_ms": result.wall_ms,
            "train_ms": sum(r.wall_ms for r in result.history),
            "epochs": len(result.history),
        },
    }
    if validation_error is not None:
        summary["validation_error"] = validation_error
    if out_dir is not None:
        artifacts = {
            "metrics": "metrics.csv",
            "resolved_config": "resolved_config.yaml",
            "tracker": result.tracker.save(out_dir / "tracker.snap").name,
        }
        if cfg.train.save_checkpoint:
            artifacts["checkpoint"] = save_checkpoint(out_dir / "checkpoint.npz", result.state).name
        summary["artifacts"] = artifacts
        write_summary(out_dir, summary)
    return RunOutcome(result, summary, validation_error)


@dataclass(frozen=True)
class BoundRow:
    iteration: int
    surrogate: float
    mc_estimate: float
    mc_stderr: float

    @property
    def gap(self) -> float:
        return self.surrogate - self.mc_estimate

    def violates(self, z: float) -> bool:
        return self.surrogate < self.mc_estimate - z * self.mc_stderr


def bound_check(
    cfg: ExperimentConfig, train: Dataset, sink: Callable[[BoundRow], None]
) -> EpochHook:
    """Epoch hook comparing the surrogate with a Monte-Carlo estimate on a fixed batch."""
    rng = Rng(cfg.train.seed).split(BOUND_STREAM)
    size = min(cfg.oracle.bound_batch, len(train))
    idx = np.sort(rng.split(0).permutation(len(train))[:size])
    inputs, labels = train.inputs[idx], train.labels[idx]

    def check(record: EpochRecord, state, aug) -> None:
        feats, _ = forward(state.model, inputs)
        batch = LabeledBatch(feats, labels)
        surrogate = surrogate_loss(batch, state.head, state.tracker, aug).loss
        mc = mc_expected_ce(
            batch,
            state.head,
            state.tracker,
            lambda_at(aug),
            cfg.oracle.mc_samples,
            rng.split(1, record.epoch),
            aug.cov_mode,
        )
        sink(BoundRow(record.iteration, surrogate, mc.estimate, mc.std_error))

    return check


def verify_bound(cfg: ExperimentConfig, out_dir: Path, *, progress: bool = True) -> dict[str, Any]:
    """
    Train on the configured data and, after every epoch, write surrogate vs a
    Monte-Carlo estimate of the expected cross-entropy to ``bound.csv``.
    """
    data = build_datasets(cfg)
    rows: list[BoundRow] = []
    out_dir.mkdir(parents=True, exist_ok=True)
    z = cfg.oracle.stderr_z
    with CsvLog(out_dir / "bound.csv", BOUND_COLUMNS) as bound_log:

        def sink(row: BoundRow) -> None:
            rows.append(row)
            bound_log.append(
                {
                    "iteration": row.iteration,
                    "surrogate": row.surrogate,
                    "mc_estimate": row.mc_estimate,
                    "mc_stderr": row.mc_stderr,
                }
            )
            if row.violates(z):
                logger.warning(
                    "Bound violated at iteration {}: surrogate {:.6f} < mc {:.6f} - {} se",
                    row.iteration,
                    row.surrogate,
                    row.mc_estimate,
                    z,
                )

        outcome = run_training(
            cfg,
            out_dir,
            command="verify-bound",
            data=data,
            on_epoch=bound_check(cfg, data[0], sink),
            progress=progress,
        )

    gaps = [
        {
            "iteration": r.iteration,
            "gap": r.gap,
            "relative_gap": r.gap / r.surrogate if r.surrogate else math.nan,
            "mc_stderr": r.mc_stderr,
        }
        for r in rows
    ]
    summary = dict(outcome.summary)
    summary["bound_gaps"] = gaps
    summary["bound_violations"] = sum(r.violates(z) for r in rows)
    summary["artifacts"] = {**summary.get("artifacts", {}), "bound": "bound.csv"}
    write_summary(out_dir, summary)
    return summary


def _sweep_row(
    setting: str, cfg: ExperimentConfig, m: int | str, outcome: RunOutcome
) -> dict[str, Any]:
    return {
        "setting": setting,
        "lambda0": cfg.augmentation.lambda0,
        "m": m,
        "cov_mode": cfg.augmentation.cov_mode,
        "schedule": cfg.augmentation.schedule,
        "seed": cfg.train.seed,
        "final_error": outcome.result.final_error,
        "last_k_error": outcome.result.last_k_error,
        "wall_ms": outcome.result.wall_ms,
    }


def _run_grid(
    cfg: ExperimentConfig,
    out_dir: Path,
    command: str,
    settings: list[tuple[str, ExperimentConfig, int | str]],
) -> dict[str, Any]:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out_dir)
    data = build_datasets(cfg)
    rows: list[dict[str, Any]] = []
    with CsvLog(out_dir / "sweep.csv", SWEEP_COLUMNS) as sweep_log:
        for name, setting_cfg, m in tqdm(settings, desc=command, unit="run"):
            for seed in cfg.sweep.seeds:
                run_cfg = replace(setting_cfg, train=replace(setting_cfg.train, seed=seed))
                outcome = run_training(run_cfg, None, command=command, data=data, progress=False)
                row = _sweep_row(name, run_cfg, m, outcome)
                sweep_log.append(row)
                rows.append(row)
                logger.info(
                    "{} seed {}: last-k error {:.4f}", name, seed, outcome.result.last_k_error
                )
    summary = {
        "command": command,
        "config": cfg.to_dict(),
        "settings": rows,
        "artifacts": {"sweep": "sweep.csv", "resolved_config": "resolved_config.yaml"},
    }
    write_summary(out_dir, summary)
    return summary


def _with_augmentation(cfg: ExperimentConfig, **changes: Any) -> ExperimentConfig:
    return replace(cfg, augmentation=replace(cfg.augmentation, **changes))


def sweep_lambda(cfg: ExperimentConfig, out_dir: Path) -> dict[str, Any]:
    """One ISDA run per lambda0 in ``sweep.lambdas`` (and per seed in ``sweep.seeds``)."""
    base = replace(cfg, train=replace(cfg.train, objective="isda"))
    settings: list[tuple[str, ExperimentConfig, int | str]] = [
        (f"lambda0={lam:g}", _with_augmentation(base, lambda0=float(lam)), "inf")
        for lam in cfg.sweep.lambdas
    ]
    return _run_grid(cfg, out_dir, "sweep-lambda", settings)


def sweep_m(cfg: ExperimentConfig, out_dir: Path) -> dict[str, Any]:
    """
    Explicit augmentation with M draws per sample for each M in ``sweep.m_values``,
    followed by the implicit surrogate (the M -> infinity limit).
    """
    settings: list[tuple[str, ExperimentConfig, int | str]] = []
    for m in cfg.sweep.m_values:
        explicit = replace(
            cfg,
            train=replace(cfg.train, objective="explicit"),
            oracle=replace(cfg.oracle, explicit_m=int(m)),
        )
        settings.append((f"explicit M={m}", explicit, int(m)))
    settings.append(("implicit", replace(cfg, train=replace(cfg.train, objective="isda")), "inf"))
    return _run_grid(cfg, out_dir, "sweep-m", settings)


def ablate(
    cfg: ExperimentConfig, out_dir: Path, modes: list[str] | None = None
) -> dict[str, Any]:
    """Basic, Identity, Diagonal, Shared, Constant-lambda and full ISDA settings."""
    names = modes or list(ABLATION_SETTINGS)
    unknown = [n for n in names if n not in ABLATION_SETTINGS]
    if unknown:
        raise ConfigError(f"unknown ablation setting {unknown[0]!r}")
    base = replace(cfg, train=replace(cfg.train, objective="isda"))
    settings = [(n, _with_augmentation(base, **ABLATION_SETTINGS[n]), "inf") for n in names]
    return _run_grid(cfg, out_dir, "ablate", settings)


@dataclass(frozen=True)
class FlopTally:
    """
    Analytic per-sample training FLOPs of the CE baseline and the extra cost of the
    surrogate: tracker update plus C quadratic forms in the feature dimension A.
    """

    feature_dim: int
    num_classes: int
    cov_mode: str
    baseline: int
    tracker: int
    quadratic: int

    @property
    def extra(self) -> int:
        return self.tracker + self.quadratic

    @property
    def ratio(self) -> float:
        return self.extra / self.baseline


def flop_tally(
    input_dim: int,
    hidden: list[int],
    feature_dim: int,
    num_classes: int,
    cov_mode: CovMode | str = CovMode.FULL,
) -> FlopTally:
    """
    Baseline counts 2 FLOPs per multiply-add over every layer and the head, times 3
    for forward plus backward. Full and Shared cost A^2 + C*A^2 extra; Diagonal and
    Identity cost A + C*A. The tally depends on the mode only, not on lambda.
    """
    mode = CovMode(cov_mode)
    dims = [input_dim, *hidden, feature_dim, num_classes]
    forward_flops = sum(2 * a * b for a, b in zip(dims[:-1], dims[1:]))
    A, C = feature_dim, num_classes
    if mode in (CovMode.FULL, CovMode.SHARED):
        tracker, quadratic = A * A, C * A * A
    else:
        tracker, quadratic = A, C * A
    return FlopTally(A, C, mode.value, 3 * forward_flops, tracker, quadratic)


@dataclass(frozen=True)
class TimingReport:
    ce_wall_ms: float
    isda_wall_ms: float
    flops: FlopTally

    @property
    def wall_overhead(self) -> float:
        return self.isda_wall_ms / self.ce_wall_ms - 1.0


def _config_differences(a: dict, b: dict, prefix: tuple[str, ...] = ()) -> list[tuple[str, ...]]:
    diffs = []
    for key in sorted(set(a) | set(b)):
        path = prefix + (key,)
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            diffs.extend(_config_differences(va, vb, path))
        elif va != vb:
            diffs.append(path)
    return diffs


def report_timing(ce_dir: Path, isda_dir: Path) -> TimingReport:
    """
    Pair a cross-entropy run with an ISDA run and report wall-time and FLOP overhead.

    Raises:
        ConfigError: The runs differ in anything but objective, lambda0 or seed.
    """
    ce = _load_run_summary(Path(ce_dir))
    isda = _load_run_summary(Path(isda_dir))
    diffs = [
        d for d in _config_differences(ce["config"], isda["config"]) if d not in TIMING_FREE_KEYS
    ]
    if ("train", "seed") in diffs:
        logger.warning("Timing runs used different seeds")
        diffs.remove(("train", "seed"))
    if diffs:
        raise ConfigError(f"runs differ in {'.'.join(diffs[0])}; timing needs equal configs")
    if ce["config"]["train"]["objective"] != "ce":
        logger.warning("Baseline run {} was not trained with the ce objective", ce_dir)

    cfg = isda["config"]
    flops = flop_tally(
        int(isda["input_dim"]),
        cfg["model"]["hidden"],
        cfg["model"]["feature_dim"],
        cfg["data"]["num_classes"],
        cfg["augmentation"]["cov_mode"],
    )
    return TimingReport(ce["timing"]["train_ms"], isda["timing"]["train_ms"], flops)


def _load_run_summary(run_dir: Path) -> dict[str, Any]:
    if not (run_dir / "summary.json").is_file():
        raise ConfigError(f"no summary.json in {run_dir}")
    summary = read_summary(run_dir)
    if "config" not in summary or "input_dim" not in summary or "timing" not in summary:
        raise ConfigError(f"{run_dir} is not a training run directory")
    return summary


def format_timing_report(report: TimingReport) -> str:
    f = report.flops
    lines = [
        "# Timing",
        "",
        "| Metric | Value |",
        "|--------|-------|",
        f"| CE train time | {report.ce_wall_ms:.1f} ms |",
        f"| ISDA train time | {report.isda_wall_ms:.1f} ms |",
        f"| Wall-time overhead | {100 * report.wall_overhead:.2f}% |",
        f"| Covariance mode | {f.cov_mode} |",
        f"| Baseline FLOPs / sample | {f.baseline} |",
        f"| Tracker FLOPs / sample | {f.tracker} |",
        f"| Quadratic-term FLOPs / sample | {f.quadratic} |",
        f"| Analytic overhead | {100 * f.ratio:.2f}% |",
        "",
    ]
    return "\n".join(lines)


@dataclass(frozen=True)
class FeatureExport:
    path: Path
    count: int
    feature_dim: int
    error: float | None


def export_features(
    run_dir: Path, out_dir: Path | None = None, *, split: str = "test"
) -> FeatureExport:
    """
    Penultimate-layer features of a trained run, for embedding plots.

    Reads ``checkpoint.npz`` and ``resolved_config.yaml`` from ``run_dir``, rebuilds
    the ``split`` dataset and writes ``features.npz`` holding ``features`` (N, A),
    ``labels`` and ``predictions`` into ``out_dir`` (default ``run_dir``).

    Raises:
        ConfigError: Missing run files, or an unknown or absent split.
        SnapshotError: Unreadable checkpoint.
    """
    run_dir = Path(run_dir)
    if split not in ("train", "test"):
        raise ConfigError(f"split must be train or test, got {split!r}")
    checkpoint, resolved = run_dir / "checkpoint.npz", run_dir / "resolved_config.yaml"
    for path in (checkpoint, resolved):
        if not path.is_file():
            raise ConfigError(f"no {path.name} in {run_dir}")

    cfg = load_config(resolved)
    state = load_checkpoint(checkpoint)
    train, test = build_datasets(cfg)
    dataset = train if split == "train" else test
    if dataset is None:
        raise ConfigError(f"{run_dir} has no test set; export the train split instead")
    if dataset.input_dim != state.model.input_dim:
        raise ConfigError(
            f"checkpoint expects {state.model.input_dim} inputs, data has {dataset.input_dim}"
        )

    chunks = [
        forward(state.model, dataset.inputs[start : start + EXPORT_CHUNK])[0]
        for start in range(0, len(dataset), EXPORT_CHUNK)
    ]
    features = np.concatenate(chunks)
    predictions = np.argmax(state.head.logits(features), axis=1)
    target = Path(out_dir) if out_dir is not None else run_dir
    target.mkdir(parents=True, exist_ok=True)
    path = target / FEATURES_FILE
    with path.open("wb") as fh:
        np.savez(fh, features=features, labels=dataset.labels, predictions=predictions)

    error = float(np.mean(predictions != dataset.labels)) if dataset.labels is not None else None
    logger.info(
        "Exported {} {} features of width {} to {}", len(dataset), split, features.shape[1], path
    )
    return FeatureExport(path, len(dataset), int(features.shape[1]), error)
