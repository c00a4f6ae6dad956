import math

import numpy as np
import pytest
import scipy.special

from isda_lab.covariance import CovarianceTracker, CovMode
from isda_lab.errors import DomainError, NumericError
from isda_lab.losses import (
    AugmentationConfig,
    ClassifierHead,
    LabeledBatch,
    LambdaSchedule,
    adjusted_logits,
    cross_entropy_loss,
    lambda_at,
    surrogate_from_covariances,
    surrogate_loss,
)
from isda_lab.numeric import Rng
from isda_lab.properties import gradient_errors, random_instance


def constant(lam: float, mode: CovMode = CovMode.FULL) -> AugmentationConfig:
    return AugmentationConfig(lambda0=lam, schedule=LambdaSchedule.CONSTANT, cov_mode=mode)


def test_lambda_schedule():
    ramp = AugmentationConfig(lambda0=0.5, T=100)
    assert lambda_at(ramp) == 0.0
    assert lambda_at(ramp.at(100)) == pytest.approx(0.5)
    assert lambda_at(ramp.at(50)) == pytest.approx(0.25)
    assert lambda_at(ramp.at(500)) == pytest.approx(0.5)
    for t in (0, 3, 10):
        assert lambda_at(constant(7.5).at(t)) == 7.5


def test_augmentation_config_validation():
    with pytest.raises(DomainError):
        AugmentationConfig(lambda0=-0.1)
    with pytest.raises(DomainError):
        AugmentationConfig(T=0)
    with pytest.raises(ValueError):
        AugmentationConfig(cov_mode="banded")


def test_adjusted_logits_hand_example(unit_head, unit_tracker):
    np.testing.assert_allclose(adjusted_logits([1.0], 0, unit_head, unit_tracker, 2.0), [1, 3])
    np.testing.assert_allclose(adjusted_logits([1.0], 0, unit_head, unit_tracker, 0.0), [1, -1])


def test_adjusted_logits_zero_covariance(unit_head):
    tracker = CovarianceTracker(2, 1)
    tracker.update(np.array([[4.0]]), [0])
    np.testing.assert_allclose(adjusted_logits([1.0], 0, unit_head, tracker, 5.0), [1, -1])


def test_adjusted_logits_dimension_mismatch(unit_head, unit_tracker):
    with pytest.raises(DomainError):
        adjusted_logits([1.0, 2.0], 0, unit_head, unit_tracker, 1.0)


def test_surrogate_hand_example(unit_head, unit_tracker):
    report = surrogate_loss(LabeledBatch([[1.0]], [0]), unit_head, unit_tracker, constant(2.0))
    assert report.loss == pytest.approx(math.log1p(math.exp(2.0)), abs=1e-12)
    assert report.loss == pytest.approx(2.126928, abs=1e-6)


def test_surrogate_lambda_zero_is_cross_entropy(unit_head, unit_tracker):
    batch = LabeledBatch([[1.0]], [0])
    report = surrogate_loss(batch, unit_head, unit_tracker, constant(0.0))
    assert report.loss == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-15)
    assert report.loss == cross_entropy_loss(batch, unit_head).loss


def test_uniform_logits():
    head = ClassifierHead.zeros(2, 3)
    tracker = CovarianceTracker(2, 3)
    rng = Rng(4)
    tracker.update(rng.standard_normal((10, 3)), rng.integers(0, 2, 10))
    report = surrogate_loss(LabeledBatch([[0.3, -1.0, 2.0]], [1]), head, tracker, constant(3.0))
    assert report.loss == pytest.approx(math.log(2.0))
    np.testing.assert_allclose(report.grad_b, [0.5, -0.5])


def test_lambda_zero_matches_scipy_on_random_instances():
    rng = Rng(21)
    for i in range(50):
        head, tracker, X, y = random_instance(rng.split(i))
        z = head.logits(X)
        ce = np.mean(scipy.special.logsumexp(z, axis=1) - z[np.arange(len(y)), y])
        loss = surrogate_loss(LabeledBatch(X, y), head, tracker, constant(0.0)).loss
        assert abs(loss - ce) < 1e-12


def test_surrogate_dominates_cross_entropy():
    rng = Rng(8)
    for i in range(20):
        head, tracker, X, y = random_instance(rng.split(i))
        batch = LabeledBatch(X, y)
        assert (
            surrogate_loss(batch, head, tracker, constant(1.0)).loss
            >= cross_entropy_loss(batch, head).loss - 1e-12
        )


@pytest.mark.parametrize("mode", list(CovMode))
def test_gradients_match_finite_differences(mode):
    rng = Rng(13)
    for i in range(4):
        inst = rng.split(i)
        head, tracker, X, y = random_instance(inst, max_dim=5, max_classes=5, batch=3)
        covs = tracker.covariance_views(y, mode)
        errors = gradient_errors(head, X.copy(), y, covs, 1.3, soft=False)
        assert max(errors.values()) < 1e-5, errors


def test_per_sample_losses_average_to_loss():
    head, tracker, X, y = random_instance(Rng(3))
    report = surrogate_loss(LabeledBatch(X, y), head, tracker, constant(0.7))
    assert report.per_sample.shape == (X.shape[0],)
    assert report.loss == pytest.approx(report.per_sample.mean())


def test_empty_batch_rejected(unit_head):
    with pytest.raises(DomainError):
        surrogate_from_covariances(np.zeros((0, 1)), np.zeros(0, dtype=int), unit_head, None, 0.0)


def test_non_finite_loss_reports_sample(unit_head, unit_tracker):
    covs = np.array([[[1.0]], [[1e308]]])
    with pytest.raises(NumericError) as info:
        surrogate_from_covariances(np.array([[1.0], [1.0]]), [0, 0], unit_head, covs, 2.0)
    assert info.value.index == 1


def test_tracker_head_mismatch(unit_head):
    with pytest.raises(DomainError):
        surrogate_loss(LabeledBatch([[1.0]], [0]), unit_head, CovarianceTracker(2, 3), constant(1))


@pytest.mark.parametrize("mode", list(CovMode))
def test_class_grouped_loss_matches_per_sample_views(mode):
    rng = Rng(17)
    for i in range(5):
        head, tracker, X, y = random_instance(rng.split(i), batch=12)
        grouped = surrogate_loss(LabeledBatch(X, y), head, tracker, constant(0.9, mode))
        direct = surrogate_from_covariances(X, y, head, tracker.covariance_views(y, mode), 0.9)
        assert grouped.loss == pytest.approx(direct.loss, rel=1e-12)
        np.testing.assert_allclose(grouped.per_sample, direct.per_sample, rtol=1e-12)
        np.testing.assert_allclose(grouped.grad_W, direct.grad_W, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(grouped.grad_b, direct.grad_b, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(grouped.grad_features, direct.grad_features, atol=1e-14)


def test_surrogate_is_non_decreasing_in_lambda():
    rng = Rng(31)
    for i in range(20):
        head, tracker, X, y = random_instance(rng.split(i))
        batch = LabeledBatch(X, y)
        losses = [
            surrogate_loss(batch, head, tracker, constant(lam)).loss for lam in (0, 0.5, 1, 2)
        ]
        assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:])), losses


def test_adjusted_logits_are_log_gaussian_expectations():
    # (w_j - w_y)^T a~ is one-dimensional Gaussian, so Gauss-Hermite quadrature gives
    # log E[exp(z_j - z_y)] to near machine precision.
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    weights = weights / math.sqrt(2.0 * math.pi)
    rng = Rng(41)
    for i in range(10):
        head, tracker, X, y = random_instance(rng.split(i), max_dim=4, max_classes=4)
        lam = 0.8
        report = surrogate_loss(LabeledBatch(X, y), head, tracker, constant(lam))
        for row in range(X.shape[0]):
            target = int(y[row])
            sigma = tracker.covariance(target)
            total = 0.0
            for j in range(head.num_classes):
                v = head.W[j] - head.W[target]
                mean = v @ X[row] + head.b[j] - head.b[target]
                std = math.sqrt(lam * max(float(v @ sigma @ v), 0.0))
                total += float(weights @ np.exp(mean + std * nodes))
            assert report.per_sample[row] == pytest.approx(math.log(total), rel=1e-8)


def test_feature_gradient_treats_covariance_as_constant():
    rng = Rng(5)
    X = rng.standard_normal((6, 3))
    y = np.array([0, 1, 2, 0, 1, 2])
    head = ClassifierHead(rng.standard_normal((3, 3)), rng.standard_normal(3))
    tracker = CovarianceTracker(3, 3)
    # Covariances estimated from the very features being differentiated.
    tracker.update(X, y)
    report = surrogate_loss(LabeledBatch(X, y), head, tracker, constant(1.5))
    z = np.stack([adjusted_logits(X[i], y[i], head, tracker, 1.5) for i in range(6)])
    residual = scipy.special.softmax(z, axis=1)
    residual[np.arange(6), y] -= 1.0
    np.testing.assert_allclose(report.grad_features, residual @ head.W / 6, atol=1e-14)
