"""Supervised and semi-supervised training loops, evaluation and checkpoints.

Every iteration samples a mini-batch, computes deep features, updates the covariance
tracker from labeled features, evaluates the objective at the scheduled lambda and
takes one Nesterov step on (extractor, W, b). All randomness comes from streams keyed
on (seed, purpose, epoch or iteration), so identical seeds give identical runs and a
resumed checkpoint continues exactly where it stopped.
"""

import json
import math
import time
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import partial
from pathlib import Path

import numpy as np
from loguru import logger
from tqdm import tqdm

from isda_lab.covariance import CovarianceTracker
from isda_lab.data import Dataset, pad_crop_flip
from isda_lab.errors import DivergenceError, DomainError, NumericError, SnapshotError
from isda_lab.losses import (
    AugmentationConfig,
    ClassifierHead,
    LabeledBatch,
    LossReport,
    PiModelRegularizer,
    SemiWeights,
    UnlabeledBatch,
    combined_loss,
    cross_entropy_loss,
    lambda_at,
    surrogate_loss,
)
from isda_lab.numeric import Rng
from isda_lab.oracle import explicit_loss_with_grad
from isda_lab.training.mlp import DEFAULT_SLOPE, Mlp, backward, forward
from isda_lab.training.sgd import NesterovSGD, SgdConfig

CHECKPOINT_VERSION = 1
EVAL_CHUNK = 4096

# Stream keys under the run seed.
INIT_STREAM = 0
SHUFFLE_STREAM = 1
UNLABELED_STREAM = 2
REGULARIZER_STREAM = 3
AUGMENT_STREAM = 4
EXPLICIT_STREAM = 5


class Objective(str, Enum):
    ISDA = "isda"
    CE = "ce"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class TrainConfig:
    """
    Training run settings.

    ``augmentation.t``/``T`` are ignored on input: the loop sets T to
    epochs x batches per epoch and advances t once per iteration.
    """

    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    semi: SemiWeights = field(default_factory=SemiWeights)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    objective: Objective = Objective.ISDA
    explicit_m: int = 10
    last_k: int = 10
    unlabeled_batch_size: int | None = None
    confidence_threshold: float | None = None
    pi_noise_std: float = 0.15
    geometric_augment: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise DomainError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.last_k < 1:
            raise DomainError(f"last_k must be >= 1, got {self.last_k}")
        if self.explicit_m < 1:
            raise DomainError(f"explicit_m must be >= 1, got {self.explicit_m}")
        if self.unlabeled_batch_size is not None and self.unlabeled_batch_size < 1:
            raise DomainError("unlabeled_batch_size must be >= 1")
        if self.confidence_threshold is not None and not 0.0 <= self.confidence_threshold <= 1.0:
            raise DomainError("confidence_threshold must lie in [0, 1]")
        object.__setattr__(self, "objective", Objective(self.objective))


@dataclass(frozen=True)
class EpochRecord:
    """One row of the metrics history; ``test_error`` is NaN without a test set."""

    epoch: int
    iteration: int
    lam: float
    train_loss: float
    test_error: float
    wall_ms: float


@dataclass
class TrainingState:
    """Everything a checkpoint restores: parameters, tracker, optimizer and counters."""

    model: Mlp
    head: ClassifierHead
    tracker: CovarianceTracker
    optimizer: NesterovSGD
    seed: int
    epoch: int = 0
    iteration: int = 0


@dataclass
class TrainResult:
    state: TrainingState
    history: list[EpochRecord]
    last_k_error: float
    wall_ms: float

    @property
    def model(self) -> Mlp:
        return self.state.model

    @property
    def head(self) -> ClassifierHead:
        return self.state.head

    @property
    def tracker(self) -> CovarianceTracker:
        return self.state.tracker

    @property
    def final_error(self) -> float:
        return self.history[-1].test_error if self.history else math.nan


# Called after every epoch with the record, the live state and the augmentation config
# in effect for the next iteration.
EpochHook = Callable[[EpochRecord, TrainingState, AugmentationConfig], None]


def build_model(
    input_dim: int,
    hidden: Sequence[int],
    feature_dim: int,
    num_classes: int,
    seed: int,
    *,
    slope: float = DEFAULT_SLOPE,
    activate_features: bool = True,
) -> tuple[Mlp, ClassifierHead]:
    """Seeded extractor ``input_dim -> hidden... -> feature_dim`` and classifier head."""
    init = Rng(seed).split(INIT_STREAM)
    model = Mlp.initialize(
        [input_dim, *hidden, feature_dim],
        init.split(0),
        slope=slope,
        activate_features=activate_features,
    )
    head = ClassifierHead.initialize(num_classes, feature_dim, init.split(1))
    return model, head


def parameters(model: Mlp, head: ClassifierHead) -> dict[str, np.ndarray]:
    params = model.parameters()
    params["head.weight"] = head.W
    params["head.bias"] = head.b
    return params


def new_state(model: Mlp, head: ClassifierHead, config: TrainConfig) -> TrainingState:
    if model.feature_dim != head.feature_dim:
        raise DomainError(
            f"model emits {model.feature_dim} features but head expects {head.feature_dim}"
        )
    tracker = CovarianceTracker(head.num_classes, head.feature_dim, config.augmentation.cov_mode)
    optimizer = NesterovSGD(parameters(model, head), config.sgd)
    return TrainingState(model, head, tracker, optimizer, config.seed)


def evaluate(model: Mlp, head: ClassifierHead, dataset: Dataset) -> float:
    """Fraction of samples whose arg-max prediction differs from the label."""
    if dataset.labels is None:
        raise DomainError("evaluation needs a labeled dataset")
    if len(dataset) == 0:
        raise DomainError("cannot evaluate on an empty test set")
    wrong = 0
    for start in range(0, len(dataset), EVAL_CHUNK):
        feats, _ = forward(model, dataset.inputs[start : start + EVAL_CHUNK])
        pred = np.argmax(head.logits(feats), axis=1)
        wrong += int(np.sum(pred != dataset.labels[start : start + EVAL_CHUNK]))
    return wrong / len(dataset)


def last_k_average(errors: Sequence[float], k: int = 10) -> float:
    """Mean of the last ``k`` recorded errors (all of them if fewer)."""
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if len(errors) == 0:
        raise DomainError("no recorded errors to average")
    return float(np.mean(np.asarray(errors[-k:], dtype=np.float64)))


class _UnlabeledSampler:
    """
    Unlabeled batch for iteration i covers positions [i*size, (i+1)*size) of an endless
    sequence of seeded permutations, so batches depend on the iteration index only.
    """

    def __init__(self, count: int, size: int, rng: Rng):
        self.count = count
        self.size = size
        self._rng = rng
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, cycle: int) -> np.ndarray:
        if cycle not in self._perms:
            self._perms = {k: v for k, v in self._perms.items() if k >= cycle - 1}
            self._perms[cycle] = self._rng.split(cycle).permutation(self.count)
        return self._perms[cycle]

    def indices(self, iteration: int) -> np.ndarray:
        pos = iteration * self.size + np.arange(self.size)
        cycles = pos // self.count
        within = pos % self.count
        return np.array([self._perm(int(c))[w] for c, w in zip(cycles, within)], dtype=np.int64)


def _batches(n: int, size: int, order: np.ndarray) -> Iterator[np.ndarray]:
    for start in range(0, n, size):
        yield order[start : start + size]


def _accumulate(total: dict[str, np.ndarray], extra: dict[str, np.ndarray]) -> None:
    for name, g in extra.items():
        total[name] = total[name] + g


def _unpack(report: LossReport) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    return report.loss, report.grad_W, report.grad_b, report.grad_features


def _supervised_step(
    state: TrainingState,
    x: np.ndarray,
    y: np.ndarray,
    current: AugmentationConfig,
    config: TrainConfig,
    root: Rng,
) -> tuple[float, dict[str, np.ndarray]]:
    model, head, tracker = state.model, state.head, state.tracker
    feats, cache = forward(model, x)
    batch = LabeledBatch(feats, y)
    if config.objective is Objective.CE:
        loss, grad_W, grad_b, grad_feats = _unpack(cross_entropy_loss(batch, head))
    elif config.objective is Objective.ISDA:
        tracker.update(feats, y)
        loss, grad_W, grad_b, grad_feats = _unpack(surrogate_loss(batch, head, tracker, current))
    else:
        tracker.update(feats, y)
        loss, grad_W, grad_b, grad_feats = explicit_loss_with_grad(
            batch,
            head,
            tracker,
            lambda_at(current),
            config.explicit_m,
            root.split(EXPLICIT_STREAM, state.iteration),
            current.cov_mode,
        )
    grads, _ = backward(model, cache, grad_feats)
    grads["head.weight"] = grad_W
    grads["head.bias"] = grad_b
    return loss, grads


def _semi_step(
    state: TrainingState,
    x: np.ndarray,
    y: np.ndarray,
    u: np.ndarray,
    current: AugmentationConfig,
    config: TrainConfig,
    root: Rng,
) -> tuple[float, dict[str, np.ndarray]]:
    model, head, tracker = state.model, state.head, state.tracker
    feats_l, cache_l = forward(model, x)
    tracker.update(feats_l, y)
    feats_u, cache_u = forward(model, u)
    # Soft targets come from the current model and are treated as constants.
    unlabeled = UnlabeledBatch.from_head(feats_u, head)
    reg = PiModelRegularizer(config.pi_noise_std) if config.semi.eta2 > 0 else None
    report = combined_loss(
        LabeledBatch(feats_l, y),
        unlabeled,
        head,
        tracker,
        current,
        config.semi,
        reg,
        forward=partial(forward, model),
        unlabeled_inputs=u,
        rng=root.split(REGULARIZER_STREAM, state.iteration),
        confidence_threshold=config.confidence_threshold,
    )
    grads, _ = backward(model, cache_l, report.grad_labeled_features)
    if report.grad_unlabeled_features is not None:
        _accumulate(grads, backward(model, cache_u, report.grad_unlabeled_features)[0])
    if report.regularization is not None:
        for cache, grad_feats in report.regularization.branch_grads:
            _accumulate(grads, backward(model, cache, grad_feats)[0])
    grads["head.weight"] = report.grad_W
    grads["head.bias"] = report.grad_b
    return report.loss, grads


def _run(
    train: Dataset,
    unlabeled: Dataset | None,
    state: TrainingState,
    config: TrainConfig,
    *,
    test: Dataset | None,
    on_epoch: EpochHook | None,
    progress: bool,
) -> TrainResult:
    if train.labels is None or len(train) == 0:
        raise DomainError("training needs a non-empty labeled dataset")
    if train.input_dim != state.model.input_dim:
        raise DomainError(
            f"dataset has {train.input_dim} inputs but the model expects {state.model.input_dim}"
        )
    n = len(train)
    per_epoch = math.ceil(n / config.batch_size)
    aug = replace(config.augmentation, t=0, T=config.epochs * per_epoch)
    root = Rng(config.seed)
    sampler = None
    if unlabeled is not None and len(unlabeled):
        size = config.unlabeled_batch_size or config.batch_size
        sampler = _UnlabeledSampler(len(unlabeled), size, root.split(UNLABELED_STREAM))
    augment = config.geometric_augment and train.image_shape is not None

    history: list[EpochRecord] = []
    run_start = time.perf_counter()
    epochs = tqdm(
        range(state.epoch, config.epochs), desc="Training", unit="epoch", disable=not progress
    )
    for epoch in epochs:
        epoch_start = time.perf_counter()
        order = root.split(SHUFFLE_STREAM, epoch).permutation(n)
        losses: list[float] = []
        for idx in _batches(n, config.batch_size, order):
            it = state.iteration
            current = aug.at(it)
            x = train.inputs[idx]
            y = train.labels[idx]
            if augment:
                x = pad_crop_flip(x, train.image_shape, root.split(AUGMENT_STREAM, it))
            try:
                if sampler is not None:
                    u = unlabeled.inputs[sampler.indices(it)]
                    loss, grads = _semi_step(state, x, y, u, current, config, root)
                else:
                    loss, grads = _supervised_step(state, x, y, current, config, root)
            except DivergenceError:
                raise
            except NumericError as exc:
                raise DivergenceError(f"training diverged ({exc})", iteration=it) from exc
            if not math.isfinite(loss):
                raise DivergenceError("training loss is not finite", iteration=it)
            state.optimizer.step(grads, epoch)
            state.iteration += 1
            losses.append(loss)

        wall_ms = (time.perf_counter() - epoch_start) * 1000.0
        test_error = evaluate(state.model, state.head, test) if test is not None else math.nan
        record = EpochRecord(
            epoch=epoch,
            iteration=state.iteration,
            lam=lambda_at(aug.at(state.iteration - 1)),
            train_loss=float(np.mean(losses)),
            test_error=test_error,
            wall_ms=wall_ms,
        )
        history.append(record)
        state.epoch = epoch + 1
        epochs.set_postfix(loss=f"{record.train_loss:.4f}", err=f"{test_error:.4f}")
        logger.info(
            "Epoch {}/{}: loss={:.4f} lambda={:.3f} test_error={:.4f}",
            epoch + 1,
            config.epochs,
            record.train_loss,
            record.lam,
            test_error,
        )
        if on_epoch is not None:
            on_epoch(record, state, aug.at(state.iteration))

    errors = [r.test_error for r in history]
    last_k = last_k_average(errors, config.last_k) if errors else math.nan
    total_ms = (time.perf_counter() - run_start) * 1000.0
    return TrainResult(state, history, last_k, total_ms)


def _resolve_state(
    model: Mlp | None,
    head: ClassifierHead | None,
    config: TrainConfig,
    resume: TrainingState | None,
) -> TrainingState:
    if resume is not None:
        if resume.seed != config.seed:
            raise DomainError(f"checkpoint seed {resume.seed} differs from config seed")
        return resume
    if model is None or head is None:
        raise DomainError("model and head are required unless resuming from a checkpoint")
    return new_state(model, head, config)


def train_supervised(
    data: Dataset,
    model: Mlp | None,
    head: ClassifierHead | None,
    config: TrainConfig,
    *,
    test: Dataset | None = None,
    resume: TrainingState | None = None,
    on_epoch: EpochHook | None = None,
    progress: bool = False,
) -> TrainResult:
    """
    Train extractor and head on labeled data with the configured objective.

    ``model`` and ``head`` are updated in place. With ``resume`` the run continues from a
    checkpointed state and ``model``/``head`` are ignored.

    Raises:
        DivergenceError: The loss became non-finite; carries the iteration index.
    """
    state = _resolve_state(model, head, config, resume)
    logger.info(
        "Supervised training: {} samples, {} epochs, objective={}, lambda0={}",
        len(data),
        config.epochs,
        config.objective.value,
        config.augmentation.lambda0,
    )
    return _run(data, None, state, config, test=test, on_epoch=on_epoch, progress=progress)


def train_semi(
    labeled: Dataset,
    unlabeled: Dataset,
    model: Mlp | None,
    head: ClassifierHead | None,
    config: TrainConfig,
    *,
    test: Dataset | None = None,
    resume: TrainingState | None = None,
    on_epoch: EpochHook | None = None,
    progress: bool = False,
) -> TrainResult:
    """
    Minimize supervised surrogate + eta1 * consistency + eta2 * Pi-model term.

    Each iteration pairs one labeled and one unlabeled mini-batch; epochs are defined by
    the labeled set. The tracker sees labeled features only. An empty unlabeled set
    gives exactly the ``train_supervised`` trajectory.
    """
    if config.objective is Objective.EXPLICIT:
        raise DomainError("semi-supervised training supports the isda and ce objectives")
    if config.objective is Objective.CE:
        config = replace(config, augmentation=replace(config.augmentation, lambda0=0.0))
    if unlabeled.input_dim != labeled.input_dim:
        raise DomainError("labeled and unlabeled inputs have different widths")
    if len(unlabeled) == 0:
        logger.warning("Unlabeled set is empty; running supervised training only")
    state = _resolve_state(model, head, config, resume)
    logger.info(
        "Semi-supervised training: {} labeled, {} unlabeled, eta1={}, eta2={}",
        len(labeled),
        len(unlabeled),
        config.semi.eta1,
        config.semi.eta2,
    )
    return _run(
        labeled, unlabeled, state, config, test=test, on_epoch=on_epoch, progress=progress
    )


def stream_positions(seed: int, epoch: int, iteration: int) -> dict[str, object]:
    """
    Stream key and counter that select the next draw of every trainer stream. Streams
    are keyed, not consumed, so this is the whole random state of a run.
    """
    return {
        "seed": seed,
        "shuffle": [SHUFFLE_STREAM, epoch],
        "unlabeled": [UNLABELED_STREAM, iteration],
        "regularizer": [REGULARIZER_STREAM, iteration],
        "augment": [AUGMENT_STREAM, iteration],
        "explicit": [EXPLICIT_STREAM, iteration],
    }


def save_checkpoint(path: Path, state: TrainingState) -> Path:
    """Write parameters, tracker snapshot, SGD velocities and counters to an ``.npz``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model, head, optimizer = state.model, state.head, state.optimizer
    sgd = optimizer.config
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "seed": state.seed,
        "epoch": state.epoch,
        "iteration": state.iteration,
        "layers": len(model.weights),
        "slope": model.slope,
        "activate_features": model.activate_features,
        "sgd": {
            "lr": sgd.lr,
            "momentum": sgd.momentum,
            "weight_decay": sgd.weight_decay,
            "milestones": list(sgd.milestones),
            "gamma": sgd.gamma,
            "steps": optimizer.state.steps,
        },
        "rng": stream_positions(state.seed, state.epoch, state.iteration),
    }
    arrays: dict[str, np.ndarray] = {"meta": np.array(json.dumps(meta))}
    arrays.update(parameters(model, head))
    for name, v in optimizer.state.velocities.items():
        arrays[f"velocity.{name}"] = v
    arrays["tracker"] = np.frombuffer(state.tracker.to_bytes(), dtype=np.uint8)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    logger.debug("Saved checkpoint {} (epoch {})", path, state.epoch)
    return path


def load_checkpoint(path: Path) -> TrainingState:
    """
    Restore a ``TrainingState`` written by ``save_checkpoint``.

    Raises:
        SnapshotError: Unknown format version or missing arrays.
    """
    try:
        with np.load(Path(path), allow_pickle=False) as archive:
            data = {key: archive[key] for key in archive.files}
    except (OSError, ValueError) as exc:
        raise SnapshotError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        meta = json.loads(str(data["meta"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise SnapshotError(f"unsupported checkpoint version {meta.get('format_version')}")
        layers = range(meta["layers"])
        model = Mlp(
            [data[f"layer{i}.weight"] for i in layers],
            [data[f"layer{i}.bias"] for i in layers],
            slope=meta["slope"],
            activate_features=meta["activate_features"],
        )
        head = ClassifierHead(data["head.weight"], data["head.bias"])
        tracker = CovarianceTracker.from_bytes(data["tracker"].tobytes())
        sgd_meta = dict(meta["sgd"])
        steps = sgd_meta.pop("steps")
        optimizer = NesterovSGD(parameters(model, head), SgdConfig(**sgd_meta))
        velocities = {name: data[f"velocity.{name}"] for name in optimizer.state.velocities}
        expected = stream_positions(int(meta["seed"]), int(meta["epoch"]), int(meta["iteration"]))
        if meta["rng"] != expected:
            raise SnapshotError(f"checkpoint {path} stream positions disagree with its counters")
    except KeyError as exc:
        raise SnapshotError(f"checkpoint {path} is missing {exc}") from exc
    optimizer.load_velocities(velocities, steps)
    return TrainingState(
        model,
        head,
        tracker,
        optimizer,
        seed=int(meta["seed"]),
        epoch=int(meta["epoch"]),
        iteration=int(meta["iteration"]),
    )
