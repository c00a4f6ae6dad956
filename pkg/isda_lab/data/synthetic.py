"""Gaussian class clusters with controllable intra-class covariance."""

import numpy as np
from loguru import logger

from isda_lab.data.dataset import Dataset
from isda_lab.errors import DomainError
from isda_lab.guardrails import as_float_array, require_finite, require_symmetric
from isda_lab.numeric import Rng

# Relative tolerance on negative eigenvalues when checking covariance specs.
PSD_TOL = 1e-10


def simplex_means(num_classes: int, input_dim: int, radius: float) -> np.ndarray:
    """
    Vertices of a regular simplex centred at the origin, each at distance ``radius``.

    Needs ``input_dim >= num_classes - 1``.
    """
    if input_dim < num_classes - 1:
        raise DomainError(
            f"a {num_classes}-class simplex needs input_dim >= {num_classes - 1}, got {input_dim}"
        )
    centered = np.eye(num_classes) - 1.0 / num_classes
    U, S, _ = np.linalg.svd(centered)
    coords = U[:, : num_classes - 1] * S[: num_classes - 1]
    coords *= radius / np.sqrt(1.0 - 1.0 / num_classes)
    means = np.zeros((num_classes, input_dim))
    means[:, : num_classes - 1] = coords
    return means


def anisotropic_covariances(
    num_classes: int,
    input_dim: int,
    rng: Rng,
    *,
    dominant: float = 4.0,
    floor: float = 0.05,
) -> np.ndarray:
    """
    One covariance per class with a single dominant eigendirection.

    Each class gets its own random unit direction u_c and Sigma_c =
    dominant * u_c u_c^T + floor * I, so class-conditional directions differ.
    """
    covs = np.empty((num_classes, input_dim, input_dim))
    for c in range(num_classes):
        u = rng.split(c).standard_normal(input_dim)
        u /= np.linalg.norm(u)
        covs[c] = dominant * np.outer(u, u) + floor * np.eye(input_dim)
    return covs


def _expand_covariances(covariances: object, num_classes: int, input_dim: int) -> np.ndarray:
    arr = as_float_array(covariances, "covariances")
    if arr.ndim == 0:
        return np.broadcast_to(float(arr) * np.eye(input_dim), (num_classes, input_dim, input_dim))
    if arr.ndim == 2:
        arr = np.broadcast_to(arr, (num_classes,) + arr.shape)
    if arr.shape != (num_classes, input_dim, input_dim):
        raise DomainError(
            f"covariances have shape {arr.shape}, expected {(num_classes, input_dim, input_dim)}"
        )
    return arr


def _factor(cov: np.ndarray, name: str) -> np.ndarray:
    require_finite(cov, name)
    require_symmetric(cov, name)
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.size and w.min() < -PSD_TOL * max(float(np.abs(w).max()), 1.0):
        raise DomainError(f"{name} is not positive semi-definite (min eigenvalue {w.min():.3e})")
    return V * np.sqrt(np.clip(w, 0.0, None))


def generate_synthetic(
    num_classes: int,
    input_dim: int,
    per_class: int,
    covariances: object,
    seed: int,
    *,
    separation: float = 3.0,
) -> Dataset:
    """
    Draw ``per_class`` samples from N(mu_c, Sigma_c) for every class.

    Args:
        num_classes: C >= 2.
        input_dim: D0; must be at least C - 1 for the simplex means.
        per_class: Samples per class.
        covariances: A scalar variance (sigma^2 I), one shared D0 x D0 matrix, or a
            (C, D0, D0) stack. Every matrix must be PSD.
        seed: Seed of the sampling stream.
        separation: Distance of every class mean from the origin.

    Returns:
        Labeled Dataset, class-major row order, keeping the true means and covariances.
    """
    if num_classes < 2:
        raise DomainError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 1:
        raise DomainError(f"per_class must be >= 1, got {per_class}")
    covs = _expand_covariances(covariances, num_classes, input_dim)
    factors = [_factor(covs[c], f"covariance of class {c}") for c in range(num_classes)]
    means = simplex_means(num_classes, input_dim, separation)

    rng = Rng(seed)
    blocks = []
    for c in range(num_classes):
        eps = rng.split(c).standard_normal((per_class, input_dim))
        blocks.append(means[c] + eps @ factors[c].T)
    labels = np.repeat(np.arange(num_classes), per_class)
    logger.debug(
        "Generated {} synthetic samples ({} classes, dim {})",
        num_classes * per_class,
        num_classes,
        input_dim,
    )
    return Dataset(
        np.concatenate(blocks),
        labels,
        num_classes,
        true_means=means,
        true_covs=np.array(covs),
    )
