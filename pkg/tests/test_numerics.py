import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcl.numerics import (
    MLP, AffineLayer, Classifier, ShapeError, affine_backward, affine_forward, grad_check,
    numeric_gradient, rel_error, relu, relu_backward, sgd_step, softmax_cross_entropy,
)


def test_affine_identity():
    layer = AffineLayer(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(affine_forward(np.array([3.0, -1.0]), layer), [3.0, -1.0])


def test_affine_hand_arithmetic():
    layer = AffineLayer(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]))
    # [1+2+1, 3+4+1]
    np.testing.assert_array_equal(affine_forward(np.ones(2), layer), [4.0, 8.0])


def test_affine_zero_weights():
    layer = AffineLayer(np.zeros((1, 3)), np.array([5.0]))
    np.testing.assert_array_equal(affine_forward(np.array([7.0, -2.0, 0.5]), layer), [5.0])


def test_affine_shape_error_names_both_shapes():
    layer = AffineLayer(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ShapeError, match=r"\(4,\).*\(2, 3\)"):
        affine_forward(np.zeros(4), layer)


def test_relu_definition():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu(-np.arange(1.0, 5.0)), np.zeros(4))


def test_relu_backward_gates():
    np.testing.assert_array_equal(relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 5.0])), [0.0, 5.0])
    # subgradient at 0 is 0
    assert relu_backward(np.array([0.0]), np.array([1.0]))[0] == 0.0


def test_cross_entropy_uniform_logits():
    loss, grad = softmax_cross_entropy(np.zeros(10), 3)
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert loss == pytest.approx(2.302585, abs=1e-6)
    np.testing.assert_allclose(grad, np.full(10, 0.1) - np.eye(10)[3])


def test_cross_entropy_saturated():
    loss, _ = softmax_cross_entropy(np.array([100.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-40)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros(3), -1)


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=7)
    _, grad = softmax_cross_entropy(logits, 2)
    eps = 1e-6
    numeric = np.array([
        (softmax_cross_entropy(logits + eps * e, 2)[0] - softmax_cross_entropy(logits - eps * e, 2)[0]) / (2 * eps)
        for e in np.eye(7)
    ])
    assert rel_error(grad, numeric).max() < 1e-6


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12), st.data())
def test_cross_entropy_non_negative(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    loss, _ = softmax_cross_entropy(np.array(logits), label)
    assert loss >= 0.0


def test_sgd_one_step():
    params = {"p": np.array([1.0])}
    sgd_step(params, {"p": np.array([2.0])}, 0.5)
    np.testing.assert_array_equal(params["p"], [0.0])


def test_sgd_zero_gradient_and_zero_lr():
    p = np.array([1.0, -2.0])
    sgd_step({"p": p}, {"p": np.zeros(2)}, 0.3)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    sgd_step({"p": p}, {"p": np.array([4.0, 5.0])}, 0.0)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_sgd_two_steps_equal_summed_update():
    g = np.array([0.25, -0.5])
    a, b = np.array([1.0, 2.0]), np.array([1.0, 2.0])
    sgd_step({"p": a}, {"p": g}, 0.5)
    sgd_step({"p": a}, {"p": g}, 0.5)
    sgd_step({"p": b}, {"p": 2 * g}, 0.5)
    np.testing.assert_array_equal(a, b)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, 0.1)


def test_glorot_init_bounds():
    rng = np.random.default_rng(1)
    layer = AffineLayer.init(30, 20, rng)
    assert np.abs(layer.W).max() <= math.sqrt(6 / 50)
    np.testing.assert_array_equal(layer.b, 0.0)


def test_grad_check_two_layer_mlp():
    rng = np.random.default_rng(0)
    net = Classifier(MLP.build([5, 8, 3], rng))
    assert grad_check(net, rng.normal(size=(4, 5)), np.array([0, 2, 1, 2]), eps=1e-6) < 1e-4


class _LinearQuadratic:
    """y = W x, loss = 0.5 * |y - t|^2, with an exact analytic gradient."""

    def __init__(self, rng):
        self.W = rng.normal(size=(3, 4))

    def parameters(self):
        return {"W": self.W}

    def loss_and_grad(self, x, target):
        r = self.W @ x - target
        return 0.5 * float(r @ r), {"W": np.outer(r, x)}


def test_grad_check_linear_quadratic_is_near_exact():
    rng = np.random.default_rng(3)
    net = _LinearQuadratic(rng)
    # central differences are exact on quadratics up to round-off
    assert grad_check(net, rng.normal(size=4), rng.normal(size=3), eps=1e-3) < 1e-10


class _Empty:
    def parameters(self):
        return {}

    def loss_and_grad(self, x, label):
        return 1.0, {}


def test_grad_check_vacuous():
    assert grad_check(_Empty(), None, None) == 0.0


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(_Empty(), None, None, eps=1e-1)


def test_grad_check_non_finite_loss():
    class Bad(_Empty):
        def loss_and_grad(self, x, label):
            return float("nan"), {}

    with pytest.raises(FloatingPointError):
        grad_check(Bad(), None, None)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_layer_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    layer = AffineLayer(rng.normal(size=(3, 4)), rng.normal(size=3))
    x = rng.normal(size=(2, 4))
    up = rng.normal(size=(2, 3))

    def loss():
        pre = affine_forward(x, layer)
        return float(np.sum(relu(pre) * up))

    pre = affine_forward(x, layer)
    gx, gW, gb = affine_backward(x, layer, relu_backward(pre, up))
    numeric = numeric_gradient(loss, {"W": layer.W, "b": layer.b}, 1e-6)
    assert rel_error(gW, numeric["W"]).max() < 1e-4
    assert rel_error(gb, numeric["b"]).max() < 1e-4
    numeric_x = numeric_gradient(loss, {"x": x}, 1e-6)["x"]
    assert rel_error(gx, numeric_x).max() < 1e-4


def test_empty_mlp_is_identity():
    net = MLP([], dim=3)
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(net.forward(x), x)
    grads, gx = net.backward(np.ones(3))
    assert grads == {}
    np.testing.assert_array_equal(gx, np.ones(3))


def test_mlp_backward_before_forward():
    net = MLP.build([2, 2], np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        net.backward(np.ones(2))


def test_mlp_deterministic():
    a = MLP.build([4, 6, 2], np.random.default_rng(11))
    b = MLP.build([4, 6, 2], np.random.default_rng(11))
    x = np.arange(4.0)
    assert a.forward(x).tobytes() == b.forward(x).tobytes()
