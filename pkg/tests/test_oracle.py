import math

import numpy as np
import pytest

from isda_lab.covariance import CovarianceTracker
from isda_lab.errors import DomainError
from isda_lab.losses import (
    AugmentationConfig,
    LabeledBatch,
    LambdaSchedule,
    UnlabeledBatch,
    cross_entropy_loss,
    surrogate_loss,
)
from isda_lab.numeric import Rng
from isda_lab.oracle import (
    RunningMoments,
    explicit_loss,
    explicit_loss_with_grad,
    mc_expected_ce,
    mc_expected_kl,
    sample_augmented,
)
from isda_lab.properties import central_difference, random_instance

UNIT_BOUND = math.log1p(math.exp(2.0))


def test_running_moments_match_numpy():
    values = Rng(0).standard_normal(1000)
    moments = RunningMoments()
    for chunk in np.array_split(values, 7):
        moments.push(chunk)
    assert moments.count == 1000
    assert moments.mean == pytest.approx(values.mean(), abs=1e-12)
    assert moments.variance == pytest.approx(values.var(ddof=1), rel=1e-10)


def test_sample_augmented_lambda_zero(unit_tracker):
    draws = sample_augmented([1.0], 0, 0.0, unit_tracker, 5, Rng(0))
    np.testing.assert_array_equal(draws, np.ones((5, 1)))


def test_sample_augmented_reproducible(unit_tracker):
    a = sample_augmented([1.0], 0, 1.0, unit_tracker, 1, Rng(4))
    b = sample_augmented([1.0], 0, 1.0, unit_tracker, 1, Rng(4))
    np.testing.assert_array_equal(a, b)


def test_sample_augmented_moments():
    tracker = CovarianceTracker(2, 2)
    S = np.array([[2.0, 0.6], [0.6, 1.0]])
    Z = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    tracker.update(Z @ np.linalg.cholesky(S).T, [1, 1, 1, 1])
    M, lam = 200_000, 0.5
    draws = sample_augmented([0.5, -1.0], 1, lam, tracker, M, Rng(2))
    se = np.sqrt(lam * np.diag(S) / M)
    assert np.all(np.abs(draws.mean(axis=0) - [0.5, -1.0]) < 4.0 * se)
    np.testing.assert_allclose(np.cov(draws.T), lam * S, atol=0.02)


def test_sample_augmented_rejects_zero_draws(unit_tracker):
    with pytest.raises(DomainError):
        sample_augmented([1.0], 0, 1.0, unit_tracker, 0, Rng(0))


def test_explicit_lambda_zero_is_cross_entropy(unit_head, unit_tracker):
    batch = LabeledBatch([[1.0], [-0.5]], [0, 1])
    value = explicit_loss(batch, unit_head, unit_tracker, 0.0, 1, Rng(0))
    assert value == cross_entropy_loss(batch, unit_head).loss


def test_mc_lambda_zero_is_exact(unit_head, unit_tracker):
    batch = LabeledBatch([[1.0]], [0])
    estimate = mc_expected_ce(batch, unit_head, unit_tracker, 0.0, 10, Rng(0))
    assert tuple(estimate) == (cross_entropy_loss(batch, unit_head).loss, 0.0)


def test_mc_below_surrogate_on_unit_instance(unit_head, unit_tracker):
    estimate, se = mc_expected_ce(
        LabeledBatch([[1.0]], [0]), unit_head, unit_tracker, 2.0, 100_000, Rng(1)
    )
    assert estimate < UNIT_BOUND
    assert se > 0


def test_mc_thousand_draws_reports_band(unit_head, unit_tracker):
    est = mc_expected_ce(LabeledBatch([[1.0]], [0]), unit_head, unit_tracker, 2.0, 1000, Rng(2))
    assert est.draws == 1000
    assert 0 < est.std_error < 0.2


def test_mc_rejects_single_draw(unit_head, unit_tracker):
    with pytest.raises(DomainError):
        mc_expected_ce(LabeledBatch([[1.0]], [0]), unit_head, unit_tracker, 1.0, 1, Rng(0))


def test_mc_deterministic_regardless_of_threads(unit_head, unit_tracker):
    batch = LabeledBatch([[1.0], [0.2], [-0.4]], [0, 0, 1])
    single = mc_expected_ce(batch, unit_head, unit_tracker, 1.0, 500, Rng(5), threads=1)
    pooled = mc_expected_ce(batch, unit_head, unit_tracker, 1.0, 500, Rng(5), threads=3)
    assert single.estimate == pooled.estimate
    np.testing.assert_array_equal(single.per_sample, pooled.per_sample)


def test_mc_chunking_does_not_change_draws(unit_head, unit_tracker):
    batch = LabeledBatch([[1.0]], [0])
    whole = mc_expected_ce(batch, unit_head, unit_tracker, 1.0, 30_000, Rng(6), chunk=30_000)
    chunked = mc_expected_ce(batch, unit_head, unit_tracker, 1.0, 30_000, Rng(6), chunk=7_000)
    assert chunked.estimate == pytest.approx(whole.estimate, abs=1e-12)


def test_one_hot_kl_matches_ce():
    head, tracker, X, y = random_instance(Rng(12))
    probs = np.eye(head.num_classes)[y]
    ce = mc_expected_ce(LabeledBatch(X, y), head, tracker, 0.7, 2000, Rng(4))
    kl = mc_expected_kl(UnlabeledBatch(X, probs), head, tracker, 0.7, 2000, Rng(4))
    assert kl.estimate == pytest.approx(ce.estimate, abs=1e-10)


def test_kl_lambda_zero_is_exact():
    head, tracker, X, _ = random_instance(Rng(13))
    probs = np.full((X.shape[0], head.num_classes), 1.0 / head.num_classes)
    est = mc_expected_kl(UnlabeledBatch(X, probs), head, tracker, 0.0, 10, Rng(0))
    assert est.std_error == 0.0


def test_explicit_converges_to_expectation(unit_head, unit_tracker):
    batch = LabeledBatch([[1.0]], [0])
    limit = mc_expected_ce(batch, unit_head, unit_tracker, 2.0, 200_000, Rng(9))
    spreads = {}
    for m in (1, 100):
        values = [
            explicit_loss(batch, unit_head, unit_tracker, 2.0, m, Rng(50, (m, s)))
            for s in range(40)
        ]
        assert abs(np.mean(values) - limit.estimate) < 4.0 * np.std(values) / np.sqrt(40) + 0.01
        spreads[m] = np.std(values)
    assert spreads[100] < spreads[1] / 5.0


def test_explicit_gradient_matches_finite_differences():
    head, tracker, X, y = random_instance(Rng(31), max_dim=3, max_classes=3, batch=2)
    batch = LabeledBatch(X, y)
    _, grad_W, grad_b, _ = explicit_loss_with_grad(batch, head, tracker, 0.6, 4, Rng(8))

    def loss() -> float:
        return explicit_loss(batch, head, tracker, 0.6, 4, Rng(8))

    np.testing.assert_allclose(grad_W, central_difference(loss, head.W), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(grad_b, central_difference(loss, head.b), rtol=1e-5, atol=1e-8)


def test_bound_gap_grows_with_lambda(unit_head, unit_tracker):
    cases = [(unit_head, unit_tracker, np.array([[1.0]]), np.array([0]))]
    rng = Rng(71)
    cases += [random_instance(rng.split(i), max_dim=4, max_classes=4) for i in range(3)]
    for head, tracker, X, y in cases:
        batch = LabeledBatch(X, y)
        gaps, errors = [], []
        for lam in (0.0, 0.25, 0.5, 1.0):
            config = AugmentationConfig(lambda0=lam, schedule=LambdaSchedule.CONSTANT)
            surrogate = surrogate_loss(batch, head, tracker, config).loss
            # Same stream for every lambda, so draws differ only by the sqrt(lambda) scale.
            mc = mc_expected_ce(batch, head, tracker, lam, 100_000, Rng(72))
            gaps.append(surrogate - mc.estimate)
            errors.append(mc.std_error)
        assert gaps[0] == pytest.approx(0.0, abs=1e-12)
        for k in range(3):
            assert gaps[k + 1] >= gaps[k] - 3.0 * (errors[k] + errors[k + 1]), gaps


def test_standard_error_halves_when_draws_quadruple(unit_head, unit_tracker):
    batch = LabeledBatch([[1.0], [0.3]], [0, 0])
    small = mc_expected_ce(batch, unit_head, unit_tracker, 1.5, 20_000, Rng(73))
    large = mc_expected_ce(batch, unit_head, unit_tracker, 1.5, 80_000, Rng(74))
    assert large.std_error / small.std_error == pytest.approx(0.5, abs=0.05)


def test_projected_draws_match_explicit_samples():
    head, tracker, X, y = random_instance(Rng(75), max_dim=5, max_classes=5)
    rng = Rng(76)
    est = mc_expected_ce(LabeledBatch(X, y), head, tracker, 0.9, 3000, rng, threads=1)
    for i in range(X.shape[0]):
        draws = sample_augmented(X[i], int(y[i]), 0.9, tracker, 3000, rng.split(i))
        batch = LabeledBatch(draws, np.full(3000, y[i]))
        assert est.per_sample[i] == pytest.approx(cross_entropy_loss(batch, head).loss, rel=1e-12)
