import numpy as np
import pytest
import scipy.special

from isda_lab.errors import DomainError
from isda_lab.losses import (
    AugmentationConfig,
    ClassifierHead,
    LabeledBatch,
    LambdaSchedule,
    PiModelRegularizer,
    SemiWeights,
    UnlabeledBatch,
    combined_loss,
    confidence_mask,
    consistency_surrogate,
    pseudo_labels,
    surrogate_from_covariances,
    surrogate_loss,
)
from isda_lab.numeric import Rng, softmax_rows
from isda_lab.oracle import mc_expected_kl
from isda_lab.properties import central_difference, gradient_errors, random_instance
from isda_lab.training import Mlp, backward, forward


def constant(lam: float) -> AugmentationConfig:
    return AugmentationConfig(lambda0=lam, schedule=LambdaSchedule.CONSTANT)


def test_pseudo_labels():
    assert pseudo_labels([[0.1, 0.9]])[0] == 1
    assert pseudo_labels([[0.5, 0.5]])[0] == 0
    probs = softmax_rows(Rng(0).standard_normal((8, 5)))
    expected = [max(range(5), key=lambda k, row=row: (row[k], -k)) for row in probs]
    np.testing.assert_array_equal(pseudo_labels(probs), expected)


def test_pseudo_labels_rejects_bad_rows():
    with pytest.raises(DomainError):
        pseudo_labels([[0.3, 0.3]])


def test_one_hot_probs_reduce_to_supervised():
    head, tracker, X, y = random_instance(Rng(6))
    probs = np.eye(head.num_classes)[y]
    soft = consistency_surrogate(UnlabeledBatch(X, probs), head, tracker, 0.8)
    hard = surrogate_loss(LabeledBatch(X, y), head, tracker, constant(0.8))
    assert soft.loss == pytest.approx(hard.loss, abs=1e-12)
    np.testing.assert_allclose(soft.grad_W, hard.grad_W, atol=1e-10)
    np.testing.assert_allclose(soft.grad_features, hard.grad_features, atol=1e-10)


def test_lambda_zero_is_soft_cross_entropy():
    head, tracker, X, _ = random_instance(Rng(7))
    probs = softmax_rows(Rng(1).standard_normal((X.shape[0], head.num_classes)))
    expected = np.mean(-(probs * scipy.special.log_softmax(head.logits(X), axis=1)).sum(axis=1))
    report = consistency_surrogate(UnlabeledBatch(X, probs), head, tracker, 0.0)
    assert abs(report.loss - expected) < 1e-12


def test_hand_example_and_dominance(unit_head, unit_tracker):
    probs = np.array([[0.75, 0.25]])
    report = consistency_surrogate(UnlabeledBatch([[1.0]], probs), unit_head, unit_tracker, 2.0)
    # Pseudo label 0 has variance 1; each target k shifts the other logit by 4.
    expected = 0.75 * (np.logaddexp(1.0, 3.0) - 1.0) + 0.25 * (np.logaddexp(5.0, -1.0) + 1.0)
    assert report.loss == pytest.approx(expected, abs=1e-12)
    mc = mc_expected_kl(
        UnlabeledBatch([[1.0]], probs), unit_head, unit_tracker, 2.0, 50_000, Rng(3)
    )
    assert mc.estimate <= report.loss + 3.0 * mc.std_error


def test_consistency_gradients():
    rng = Rng(17)
    for i in range(4):
        inst = rng.split(i)
        head, tracker, X, _ = random_instance(inst, max_dim=4, max_classes=4, batch=3)
        probs = softmax_rows(inst.standard_normal((X.shape[0], head.num_classes)))
        covs = tracker.covariance_views(pseudo_labels(probs))
        errors = gradient_errors(head, X.copy(), probs, covs, 0.9, soft=True)
        assert max(errors.values()) < 1e-5, errors


def test_confidence_mask():
    probs = np.array([[0.9, 0.1], [0.6, 0.4]])
    np.testing.assert_array_equal(confidence_mask(probs, 0.8), [1.0, 0.0])
    np.testing.assert_array_equal(confidence_mask(probs, None), [1.0, 1.0])


def test_semi_weights_reject_negative():
    with pytest.raises(DomainError):
        SemiWeights(eta1=-1.0)


def _batches(seed: int):
    head, tracker, X, y = random_instance(Rng(seed), batch=5)
    U = Rng(seed).split(50).standard_normal((4, head.feature_dim))
    return head, tracker, LabeledBatch(X, y), UnlabeledBatch.from_head(U, head)


def test_zero_weights_equal_supervised():
    head, tracker, labeled, unlabeled = _batches(2)
    report = combined_loss(labeled, unlabeled, head, tracker, constant(0.5), SemiWeights(0, 0))
    supervised = surrogate_loss(labeled, head, tracker, constant(0.5))
    assert report.loss == supervised.loss
    assert report.consistency is None
    assert report.grad_unlabeled_features is None


def test_consistency_only_when_labeled_missing():
    head, tracker, _, unlabeled = _batches(3)
    report = combined_loss(None, unlabeled, head, tracker, constant(0.5), SemiWeights(1, 0))
    direct = consistency_surrogate(unlabeled, head, tracker, 0.5)
    assert report.loss == pytest.approx(direct.loss)


def test_loss_is_affine_in_eta1():
    head, tracker, labeled, unlabeled = _batches(4)
    losses = [
        combined_loss(labeled, unlabeled, head, tracker, constant(0.5), SemiWeights(eta1)).loss
        for eta1 in (0.5, 1.0, 2.0)
    ]
    slope = consistency_surrogate(unlabeled, head, tracker, 0.5).loss
    assert losses[1] - losses[0] == pytest.approx(0.5 * slope)
    assert losses[2] - losses[1] == pytest.approx(slope)


def test_regularizer_requires_forward_and_rng():
    head, tracker, labeled, unlabeled = _batches(5)
    with pytest.raises(DomainError):
        combined_loss(
            labeled,
            unlabeled,
            head,
            tracker,
            constant(0.5),
            SemiWeights(1.0, 1.0),
            PiModelRegularizer(),
            unlabeled_inputs=unlabeled.features,
        )


def test_pi_model_gradients():
    rng = Rng(23)
    model = Mlp.initialize([3, 4], rng.split(0))
    head = ClassifierHead.initialize(3, 4, rng.split(1))
    inputs = rng.split(2).standard_normal((5, 3))
    reg = PiModelRegularizer(0.3)

    def loss() -> float:
        return reg(lambda x: forward(model, x), inputs, head, rng.split(3)).loss

    result = reg(lambda x: forward(model, x), inputs, head, rng.split(3))
    numeric_W = central_difference(loss, head.W)
    np.testing.assert_allclose(result.grad_W, numeric_W, rtol=1e-5, atol=1e-8)

    grads = {name: np.zeros_like(p) for name, p in model.parameters().items()}
    for cache, grad_feats in result.branch_grads:
        for name, g in backward(model, cache, grad_feats)[0].items():
            grads[name] += g
    numeric = central_difference(loss, model.weights[0])
    np.testing.assert_allclose(grads["layer0.weight"], numeric, rtol=1e-5, atol=1e-8)


def test_consistency_is_probability_weighted_sum_of_supervised_surrogates():
    rng = Rng(23)
    for i in range(5):
        inst = rng.split(i)
        head, tracker, X, _ = random_instance(inst, batch=6)
        probs = softmax_rows(inst.standard_normal((X.shape[0], head.num_classes)))
        covs = tracker.covariance_views(pseudo_labels(probs))
        report = consistency_surrogate(UnlabeledBatch(X, probs), head, tracker, 1.2)
        expected = sum(
            probs[:, k]
            * surrogate_from_covariances(X, np.full(X.shape[0], k), head, covs, 1.2).per_sample
            for k in range(head.num_classes)
        )
        np.testing.assert_allclose(report.per_sample, expected, rtol=1e-10)
