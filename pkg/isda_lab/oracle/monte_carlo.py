"""Explicit semantic augmentation and Monte-Carlo estimates of the expected losses.

Every sample i draws from its own stream ``rng.split(i)``; draw m is the m-th normal
vector of that stream. Results therefore do not depend on chunk size or on how many
worker threads evaluate samples concurrently.
"""

from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from isda_lab.covariance import CovarianceTracker, CovMode
from isda_lab.errors import DomainError
from isda_lab.guardrails import as_float_array, require_labels, require_non_negative
from isda_lab.losses import (
    ClassifierHead,
    LabeledBatch,
    UnlabeledBatch,
    consistency_from_covariances,
    cross_entropy_loss,
    pseudo_labels,
)
from isda_lab.losses.isda_loss import check_tracker_matches
from isda_lab.numeric import Rng, logsumexp_rows, psd_factor, sample_gaussian_rows
from isda_lab.settings import worker_threads

# Draws per sample beyond which values are streamed through RunningMoments in chunks.
MATERIALIZE_LIMIT = 10_000
DEFAULT_CHUNK = 65_536


class RunningMoments:
    """Streaming count/mean/sum-of-squares merged with the pooled-variance identity."""

    def __init__(self) -> None:
        self.count = 0
        self.mean = 0.0
        self._m2 = 0.0

    def push(self, values: np.ndarray) -> None:
        m = values.shape[0]
        if m == 0:
            return
        batch_mean = float(values.mean())
        batch_m2 = float(np.sum((values - batch_mean) ** 2))
        n = self.count
        total = n + m
        delta = batch_mean - self.mean
        self.mean += delta * m / total
        self._m2 += batch_m2 + delta * delta * n * m / total
        self.count = total

    @property
    def variance(self) -> float:
        """Sample variance with the m - 1 divisor."""
        return self._m2 / (self.count - 1) if self.count > 1 else 0.0


@dataclass(frozen=True)
class McEstimate:
    """Batch-mean Monte-Carlo estimate; unpacks as ``(estimate, std_error)``."""

    estimate: float
    std_error: float
    draws: int
    per_sample: np.ndarray = field(repr=False)

    def __iter__(self) -> Iterator[float]:
        yield self.estimate
        yield self.std_error


def _factor(view: np.ndarray, lam: float) -> np.ndarray:
    """Factor of lam * Sigma: a std-dev vector for diagonal views, else lower-triangular."""
    if view.ndim == 1:
        return np.sqrt(lam * np.clip(view, 0.0, None))
    return np.sqrt(lam) * psd_factor(view)


def _views(
    tracker: CovarianceTracker, labels: np.ndarray, cov_mode: CovMode | str | None
) -> dict[int, np.ndarray]:
    return {int(j): tracker.covariance_view(int(j), cov_mode) for j in np.unique(labels)}


def sample_augmented(
    a: object,
    y: int,
    lam: float,
    tracker: CovarianceTracker,
    M: int,
    rng: Rng,
    cov_mode: CovMode | str | None = None,
) -> np.ndarray:
    """M independent draws from N(a, lam * Sigma_y) as an (M, A) matrix."""
    if M < 1:
        raise DomainError(f"M must be >= 1, got {M}")
    vec = as_float_array(a, "a", ndim=1)
    require_non_negative(lam, "lambda")
    L = _factor(tracker.covariance_view(y, cov_mode), lam)
    return sample_gaussian_rows(vec, L, rng, M)


def _target_losses(logits: np.ndarray, target: int | np.ndarray) -> np.ndarray:
    """Cross-entropy of each logit row against a class index or a soft target."""
    lse = logsumexp_rows(logits)
    if isinstance(target, np.ndarray):
        return lse * target.sum() - logits @ target
    return lse - logits[:, target]


def _projection(L: np.ndarray, head: ClassifierHead) -> np.ndarray:
    """(C, A) map from standard normal draws to logit offsets: W L, or W * sd when diagonal."""
    if L.ndim == 1:
        return head.W * L[None, :]
    return head.W @ L


def _sample_moments(
    a: np.ndarray,
    L: np.ndarray,
    head: ClassifierHead,
    target: int | np.ndarray,
    M: int,
    rng: Rng,
    chunk: int,
) -> RunningMoments:
    # Logits of a + L eps are logits(a) + eps (W L)^T; the draws never materialize in A.
    base = head.logits(a)
    K = _projection(L, head).T
    moments = RunningMoments()
    step = M if M <= MATERIALIZE_LIMIT else chunk
    for start in range(0, M, step):
        eps = rng.standard_normal((min(step, M - start), a.shape[0]))
        logits = eps @ K
        logits += base
        moments.push(_target_losses(logits, target))
    return moments


def _estimate(
    features: np.ndarray,
    targets: list[int | np.ndarray],
    factors: list[np.ndarray],
    head: ClassifierHead,
    M: int,
    rng: Rng,
    chunk: int,
    threads: int | None,
) -> McEstimate:
    N = features.shape[0]

    def run(i: int) -> RunningMoments:
        return _sample_moments(features[i], factors[i], head, targets[i], M, rng.split(i), chunk)

    workers = threads or worker_threads()
    if workers > 1 and N > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            moments = list(pool.map(run, range(N)))
    else:
        moments = [run(i) for i in range(N)]

    means = np.array([m.mean for m in moments])
    variances = np.array([m.variance for m in moments])
    std_error = float(np.sqrt(np.sum(variances / M)) / N)
    return McEstimate(float(means.mean()), std_error, M, means)


def mc_expected_ce(
    batch: LabeledBatch,
    head: ClassifierHead,
    tracker: CovarianceTracker,
    lam: float,
    M: int,
    rng: Rng,
    cov_mode: CovMode | str | None = None,
    *,
    chunk: int = DEFAULT_CHUNK,
    threads: int | None = None,
) -> McEstimate:
    """
    Monte-Carlo estimate of the expected cross-entropy under augmentation.

    The standard error combines per-sample draw variances (m - 1 divisor) across the
    batch. With lam == 0 the distribution is degenerate and the exact cross-entropy is
    returned with zero standard error.
    """
    if M < 2:
        raise DomainError(f"M must be >= 2 for a standard error, got {M}")
    require_non_negative(lam, "lambda")
    check_tracker_matches(head, tracker)
    if lam == 0.0:
        ce = cross_entropy_loss(batch, head)
        return McEstimate(ce.loss, 0.0, M, ce.per_sample)

    labels = require_labels(batch.labels, head.num_classes)
    views = _views(tracker, labels, cov_mode)
    factors_by_class = {j: _factor(view, lam) for j, view in views.items()}
    factors = [factors_by_class[int(y)] for y in labels]
    targets: list[int | np.ndarray] = [int(y) for y in labels]
    return _estimate(batch.features, targets, factors, head, M, rng, chunk, threads)


def mc_expected_kl(
    batch: UnlabeledBatch,
    head: ClassifierHead,
    tracker: CovarianceTracker,
    lam: float,
    M: int,
    rng: Rng,
    cov_mode: CovMode | str | None = None,
    *,
    chunk: int = DEFAULT_CHUNK,
    threads: int | None = None,
) -> McEstimate:
    """
    Monte-Carlo estimate of the expected soft-target cross-entropy, with features
    augmented by their pseudo-label covariance. Equals the expected KL divergence up to
    the (constant) entropy of the soft targets.
    """
    if M < 2:
        raise DomainError(f"M must be >= 2 for a standard error, got {M}")
    require_non_negative(lam, "lambda")
    check_tracker_matches(head, tracker)
    if lam == 0.0:
        exact = consistency_from_covariances(batch.features, batch.probs, head, None, 0.0)
        return McEstimate(exact.loss, 0.0, M, exact.per_sample)

    labels = pseudo_labels(batch.probs)
    views = _views(tracker, labels, cov_mode)
    factors_by_class = {j: _factor(view, lam) for j, view in views.items()}
    factors = [factors_by_class[int(y)] for y in labels]
    targets: list[int | np.ndarray] = list(batch.probs)
    return _estimate(batch.features, targets, factors, head, M, rng, chunk, threads)


def explicit_loss(
    batch: LabeledBatch,
    head: ClassifierHead,
    tracker: CovarianceTracker,
    lam: float,
    M: int,
    rng: Rng,
    cov_mode: CovMode | str | None = None,
) -> float:
    """
    Cross-entropy averaged over M explicit augmented copies of every sample.

    Uses the same per-sample streams as ``mc_expected_ce``.
    """
    if M < 1:
        raise DomainError(f"M must be >= 1, got {M}")
    require_non_negative(lam, "lambda")
    check_tracker_matches(head, tracker)
    if lam == 0.0:
        return cross_entropy_loss(batch, head).loss
    labels = require_labels(batch.labels, head.num_classes)
    views = _views(tracker, labels, cov_mode)
    total = 0.0
    for i, y in enumerate(labels):
        L = _factor(views[int(y)], lam)
        draws = sample_gaussian_rows(batch.features[i], L, rng.split(i), M)
        total += float(_target_losses(head.logits(draws), int(y)).mean())
    return total / len(labels)


def explicit_loss_with_grad(
    batch: LabeledBatch,
    head: ClassifierHead,
    tracker: CovarianceTracker,
    lam: float,
    M: int,
    rng: Rng,
    cov_mode: CovMode | str | None = None,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """
    Explicit augmented loss with gradients for training by sampling.

    Draws are a + L eps, so d(draw)/da is the identity and the feature gradient is the
    sum of per-draw cross-entropy gradients. Returns (loss, grad_W, grad_b, grad_features).
    """
    if M < 1:
        raise DomainError(f"M must be >= 1, got {M}")
    labels = require_labels(batch.labels, head.num_classes)
    X = batch.features
    N = X.shape[0]
    views = _views(tracker, labels, cov_mode) if lam != 0.0 else {}
    loss = 0.0
    grad_W = np.zeros_like(head.W)
    grad_b = np.zeros_like(head.b)
    grad_features = np.zeros_like(X)
    for i, y in enumerate(labels):
        if lam == 0.0:
            draws = np.repeat(X[i][None, :], M, axis=0)
        else:
            draws = sample_gaussian_rows(X[i], _factor(views[int(y)], lam), rng.split(i), M)
        ce = cross_entropy_loss(LabeledBatch(draws, np.full(M, y)), head)
        loss += ce.loss
        grad_W += ce.grad_W
        grad_b += ce.grad_b
        grad_features[i] = ce.grad_features.sum(axis=0)
    return loss / N, grad_W / N, grad_b / N, grad_features / N
