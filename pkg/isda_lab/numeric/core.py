"""Dense float64 kernel: seeded counter-based RNG, stable log-sum-exp, PSD factorization
and Gaussian sampling."""

from typing import Any

import numpy as np
import scipy.linalg
import scipy.special
from loguru import logger

from isda_lab.errors import DomainError, IndefiniteMatrixError
from isda_lab.guardrails import as_float_array, require_finite, require_symmetric

# Relative jitter applied to trace(S)/A when none is given.
DEFAULT_RELATIVE_JITTER = 1e-8
MAX_JITTER_ESCALATIONS = 4
_U64_MAX = 2**64 - 1


class Rng:
    """
    Owned, seedable random stream backed by numpy's Philox (counter-based) generator.

    A stream is identified by ``(seed, path)``. ``split(*keys)`` derives a child stream
    whose values depend only on the seed and the extended key path, never on how much
    the parent has been consumed, so per-class or per-sample streams stay reproducible
    regardless of evaluation order or parallelism.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()) -> None:
        if not 0 <= int(seed) <= _U64_MAX:
            raise DomainError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        if any(int(k) < 0 for k in path):
            raise DomainError(f"stream keys must be non-negative, got {path}")
        self._seed = int(seed)
        self._path = tuple(int(k) for k in path)
        sequence = np.random.SeedSequence(self._seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(sequence))

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def path(self) -> tuple[int, ...]:
        return self._path

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def split(self, *keys: int) -> "Rng":
        """Independent child stream keyed on ``path + keys``."""
        return Rng(self._seed, self._path + tuple(keys))

    def standard_normal(self, size: int | tuple[int, ...]) -> np.ndarray:
        return self._gen.standard_normal(size)

    def permutation(self, n: int | np.ndarray) -> np.ndarray:
        return self._gen.permutation(n)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def state_dict(self) -> dict[str, Any]:
        """JSON-serializable snapshot of the stream position."""
        state = self._gen.bit_generator.state
        return {
            "seed": self._seed,
            "path": list(self._path),
            "state": _to_jsonable(state),
        }

    @classmethod
    def from_state_dict(cls, payload: dict[str, Any]) -> "Rng":
        rng = cls(payload["seed"], tuple(payload["path"]))
        rng._gen.bit_generator.state = _from_jsonable(payload["state"])
        return rng


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return {"__uint64__": [int(v) for v in value.ravel()]}
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _from_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        if set(value) == {"__uint64__"}:
            return np.array(value["__uint64__"], dtype=np.uint64)
        return {k: _from_jsonable(v) for k, v in value.items()}
    return value


def logsumexp(z: object) -> float:
    """log(sum(exp(z))) of a non-empty finite vector, evaluated with a max shift."""
    vec = as_float_array(z, "z", ndim=1)
    if vec.size == 0:
        raise DomainError("logsumexp of an empty vector")
    require_finite(vec, "z")
    return float(scipy.special.logsumexp(vec))


def logsumexp_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp over the last axis."""
    return scipy.special.logsumexp(z, axis=-1)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    return scipy.special.softmax(z, axis=-1)


def default_jitter(S: np.ndarray) -> float:
    """1e-8 * trace(S) / A, or 0 for a matrix with non-positive trace."""
    dim = S.shape[0]
    trace = float(np.trace(S))
    return DEFAULT_RELATIVE_JITTER * trace / dim if trace > 0 else 0.0


def psd_factor(
    S: object,
    jitter: float | None = None,
    *,
    max_escalations: int = MAX_JITTER_ESCALATIONS,
) -> np.ndarray:
    """
    Lower-triangular L with L @ L.T ~= S + jitter * I.

    Covariance estimates are routinely rank-deficient early in training, so a failed
    pivot retries with the jitter multiplied by 10, at most ``max_escalations`` times.
    An exactly zero matrix with zero jitter factors to the zero matrix.

    Args:
        S: Symmetric positive semi-definite matrix.
        jitter: Diagonal loading; defaults to ``default_jitter(S)``.
        max_escalations: Number of x10 retries before giving up.

    Returns:
        Lower-triangular factor.

    Raises:
        DomainError: S is not square/symmetric or jitter is negative.
        IndefiniteMatrixError: Factorization failed at the largest jitter.
    """
    mat = as_float_array(S, "S", ndim=2)
    require_finite(mat, "S")
    require_symmetric(mat, "S")
    if jitter is None:
        jitter = default_jitter(mat)
    if not np.isfinite(jitter) or jitter < 0:
        raise DomainError(f"jitter must be non-negative, got {jitter}")

    dim = mat.shape[0]
    if jitter == 0.0 and not np.any(mat):
        return np.zeros_like(mat)

    sym = 0.5 * (mat + mat.T)
    eye = np.eye(dim)
    floor = DEFAULT_RELATIVE_JITTER * max(float(np.trace(sym)) / dim, 1.0)
    current = float(jitter)
    for attempt in range(max_escalations + 1):
        try:
            return scipy.linalg.cholesky(sym + current * eye, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            if attempt == max_escalations:
                break
            nxt = current * 10.0 if current > 0 else floor
            logger.debug("Cholesky failed with jitter {:.3e}; retrying with {:.3e}", current, nxt)
            current = nxt
    raise IndefiniteMatrixError(
        f"matrix is not positive semi-definite (jitter up to {current:.3e})"
    )


def _check_factor(L: np.ndarray, dim: int) -> None:
    if L.ndim == 1:
        if L.shape[0] != dim:
            raise DomainError(f"diagonal factor has length {L.shape[0]}, expected {dim}")
        return
    if L.shape != (dim, dim):
        raise DomainError(f"factor has shape {L.shape}, expected {(dim, dim)}")
    if np.any(np.triu(L, 1)):
        raise DomainError("factor must be lower-triangular")


def sample_gaussian(mean: object, L: object, rng: Rng) -> np.ndarray:
    """
    One draw of mean + L @ eps with eps ~ N(0, I) taken from ``rng``.

    ``L`` is a lower-triangular factor, or a 1-D vector of standard deviations for a
    diagonal covariance.
    """
    mu = as_float_array(mean, "mean", ndim=1)
    factor = as_float_array(L, "L")
    _check_factor(factor, mu.shape[0])
    eps = rng.standard_normal(mu.shape[0])
    if factor.ndim == 1:
        return mu + factor * eps
    return mu + factor @ eps


def sample_gaussian_rows(mean: np.ndarray, L: np.ndarray, rng: Rng, count: int) -> np.ndarray:
    """``count`` draws stacked as rows; row m consumes the m-th normal vector of ``rng``."""
    _check_factor(L, mean.shape[0])
    eps = rng.standard_normal((count, mean.shape[0]))
    if L.ndim == 1:
        return mean[None, :] + eps * L[None, :]
    return mean[None, :] + eps @ L.T
