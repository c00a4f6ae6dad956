import numpy as np
import pytest

from isda_lab.errors import DomainError
from isda_lab.numeric import Rng
from isda_lab.properties import central_difference, relative_error
from isda_lab.training import Mlp, NesterovSGD, SgdConfig, backward, forward


def test_zero_weights_give_zero_features():
    model = Mlp([np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
    feats, _ = forward(model, Rng(0).standard_normal((5, 3)))
    np.testing.assert_array_equal(feats, np.zeros((5, 2)))


def test_identity_linear_layer_passes_inputs():
    model = Mlp([np.eye(3)], [np.zeros(3)], activate_features=False)
    X = Rng(1).standard_normal((4, 3))
    feats, _ = forward(model, X)
    np.testing.assert_array_equal(feats, X)


def test_backward_matches_finite_differences():
    rng = Rng(2)
    model = Mlp.initialize([4, 6, 3], rng.split(0))
    X = rng.split(1).standard_normal((5, 4))
    G = rng.split(2).standard_normal((5, 3))

    def loss() -> float:
        return float(np.sum(forward(model, X)[0] * G))

    feats, cache = forward(model, X)
    grads, grad_inputs = backward(model, cache, G)
    for name, param in model.parameters().items():
        assert relative_error(grads[name], central_difference(loss, param)) < 1e-5, name
    assert relative_error(grad_inputs, central_difference(loss, X)) < 1e-5


def test_forward_rejects_wrong_width():
    model = Mlp.initialize([3, 2], Rng(0))
    with pytest.raises(DomainError):
        forward(model, np.zeros((2, 4)))


def test_layers_must_chain():
    with pytest.raises(DomainError):
        Mlp([np.zeros((4, 3)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)])


def test_nesterov_step_on_quadratic_bowl():
    """Two steps on f(x) = 0.5 * x^T H x against the closed-form recurrence."""
    H = np.diag([1.0, 3.0])
    x = np.array([1.0, -2.0])
    params = {"bowl.bias": x}
    cfg = SgdConfig(lr=0.1, momentum=0.9, weight_decay=0.0)
    opt = NesterovSGD(params, cfg)

    ref_x, ref_v = x.copy(), np.zeros(2)
    for _ in range(2):
        g = H @ ref_x
        ref_v = 0.9 * ref_v - 0.1 * g
        ref_x = ref_x + 0.9 * ref_v - 0.1 * g
        opt.step({"bowl.bias": H @ params["bowl.bias"]}, epoch=0)
        np.testing.assert_allclose(params["bowl.bias"], ref_x, rtol=0, atol=1e-12)
    assert opt.state.steps == 2


def test_weight_decay_skips_biases():
    params = {"layer0.weight": np.ones(2), "layer0.bias": np.ones(2)}
    opt = NesterovSGD(params, SgdConfig(lr=0.1, momentum=0.0, weight_decay=0.5))
    opt.step({name: np.zeros(2) for name in params}, epoch=0)
    np.testing.assert_allclose(params["layer0.weight"], 0.95)
    np.testing.assert_array_equal(params["layer0.bias"], np.ones(2))


def test_learning_rate_milestones():
    cfg = SgdConfig(lr=0.1, milestones=(2, 4), gamma=0.1)
    assert cfg.learning_rate(0) == pytest.approx(0.1)
    assert cfg.learning_rate(2) == pytest.approx(0.01)
    assert cfg.learning_rate(5) == pytest.approx(0.001)


@pytest.mark.parametrize(
    "kwargs", [{"lr": 0.0}, {"momentum": 1.0}, {"weight_decay": -1.0}, {"milestones": (3, 1)}]
)
def test_sgd_config_validation(kwargs):
    with pytest.raises(DomainError):
        SgdConfig(**kwargs)


def test_step_requires_every_gradient():
    opt = NesterovSGD({"a.weight": np.zeros(2), "b.bias": np.zeros(1)})
    with pytest.raises(DomainError):
        opt.step({"a.weight": np.zeros(2)}, epoch=0)
    with pytest.raises(DomainError):
        opt.step({"a.weight": np.zeros(3), "b.bias": np.zeros(1)}, epoch=0)
