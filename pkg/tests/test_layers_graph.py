import math

import numpy as np
import pytest

from resrep.data import Dataset
from resrep.graph import GraphError, ModelGraph, evaluate, loss_and_grads, softmax_cross_entropy
from resrep.layers import Add, BatchNorm2d, Compactor, Conv2d, GlobalAvgPool, ReLU
from resrep.models import build_miniconv
from resrep.tensor import ShapeError

from conftest import numeric_grad
from gradcheck import model_fd_errors, rel_errors, three_layer_model


def _layer_check(node, inputs, rng, train=True):
    out = node.forward(*inputs, train=train)
    r = rng.standard_normal(out.shape)
    node.zero_grad()
    dins = node.backward(r)

    def loss():
        return float(np.sum(node.forward(*inputs, train=train) * r))

    errs = []
    for arr, g in zip(inputs, dins):
        num = numeric_grad(loss, arr)
        errs += [rel_errors(g.reshape(-1)[i], v) for i, v in num.items()]
    for name, p in node.params.items():
        num = numeric_grad(loss, p)
        errs += [rel_errors(node.grads[name].reshape(-1)[i], v) for i, v in num.items()]
    return np.array(errs)


def _bn(d, rng):
    return BatchNorm2d(1 + 0.3 * rng.standard_normal(d), rng.standard_normal(d), np.zeros(d), np.ones(d))


@pytest.mark.parametrize(
    "make",
    [
        lambda r: (Conv2d(r.standard_normal((3, 2, 3, 3)), r.standard_normal(3), 2, 1), 1),
        lambda r: (Compactor(r.standard_normal((3, 3, 1, 1))), 1),
        lambda r: (_bn(3, r), 1),
        lambda r: (ReLU(), 1),
        lambda r: (Add((-1, -1)), 2),
        lambda r: (GlobalAvgPool(), 1),
    ],
    ids=["conv", "compactor", "bn", "relu", "add", "gap"],
)
def test_every_layer_type_matches_finite_differences(make, rng):
    node, arity = make(rng)
    c = node.in_channels if isinstance(node, Conv2d) else 3
    inputs = [rng.standard_normal((3, c, 5, 5)) for _ in range(arity)]
    # keep ReLU inputs away from the kink
    inputs = [np.where(np.abs(x) < 1e-2, 0.5, x) for x in inputs]
    assert np.max(_layer_check(node, inputs, rng)) <= 1e-5


def test_model_gradients_match_finite_differences():
    model, x, y = three_layer_model(seed=3)
    errs = model_fd_errors(model, x, y)
    assert np.mean(errs <= 1e-5) >= 0.99
    assert errs.max() <= 1e-4


def test_loss_scaling_scales_gradients():
    model, x, y = three_layer_model(seed=1)
    g = {k: v.copy() for k, v in loss_and_grads(model, x, y).grads.items()}
    model.zero_grad()
    logits = model.forward(x, train=True)
    _, d = softmax_cross_entropy(logits, y)
    model.backward(3.0 * d)
    for k, v in model.gradients().items():
        np.testing.assert_allclose(v, 3.0 * g[k], rtol=1e-12, atol=1e-15)


def test_zero_classifier_gives_uniform_logits():
    model = build_miniconv((4, 4), num_classes=10, input_shape=(3, 8, 8))
    head = model.nodes[-1]
    head.params["kernel"][...] = 0
    head.params["bias"][...] = 0
    x = np.random.default_rng(0).standard_normal((5, 3, 8, 8)).astype(np.float32)
    out = loss_and_grads(model, x, np.arange(5))
    assert np.all(out.logits == 0)
    assert out.loss == pytest.approx(math.log(10), rel=1e-6)


def test_bn_eval_standardises_with_running_stats(rng):
    bn = BatchNorm2d(np.ones(2), np.zeros(2), np.array([1.0, -2.0]), np.array([4.0, 9.0]))
    x = rng.standard_normal((3, 2, 4, 4))
    want = (x - np.array([1.0, -2.0]).reshape(1, 2, 1, 1)) / np.sqrt(np.array([4.0, 9.0]) + 1e-5).reshape(1, 2, 1, 1)
    np.testing.assert_allclose(bn.forward(x), want, rtol=1e-12)


def test_bn_train_eval_consistency(rng):
    x = 3 * rng.standard_normal((4, 3, 5, 5)) + 1
    bn = _bn(3, rng)
    train_out = bn.forward(x, train=True)
    bn.buffers["running_mean"] = x.mean(axis=(0, 2, 3))
    bn.buffers["running_var"] = x.var(axis=(0, 2, 3))
    assert np.max(np.abs(bn.forward(x) - train_out)) <= 1e-5


def test_bn_running_update_uses_momentum_and_unbiased_var(rng):
    x = rng.standard_normal((2, 1, 3, 3))
    bn = BatchNorm2d(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1))
    bn.forward(x, train=True)
    assert bn.buffers["running_mean"][0] == pytest.approx(0.1 * x.mean())
    assert bn.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_add_backward_copies_gradient_to_both_branches(rng):
    d = rng.standard_normal((2, 3, 4, 4))
    a, b = Add((0, 1)).backward(d)
    assert np.array_equal(a, d) and np.array_equal(b, d)
    with pytest.raises(ShapeError):
        Add((0, 1)).forward(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 3, 3)))


def test_residual_gradient_sums_at_fork():
    # x -> relu -> (identity, relu) -> add: d/dx of sum(add) is 2 where x > 0
    nodes = [ReLU((-1,)), ReLU((0,)), Add((0, 1)), GlobalAvgPool((2,)), Conv2d(np.ones((1, 2, 1, 1)), None, inputs=(3,))]
    m = ModelGraph(nodes, (2, 2, 2), 1)
    x = np.array([[[[1.0, -1.0], [2.0, 3.0]], [[-1.0, 1.0], [1.0, 1.0]]]])
    m.forward(x, train=True)
    dx = m.backward(np.ones((1, 1)))
    np.testing.assert_allclose(dx, np.where(x > 0, 2 / 4, 0))


def test_compactor_identity_is_noop(rng):
    x = rng.standard_normal((2, 5, 3, 3)).astype(np.float32)
    c = Compactor.identity(5)
    assert np.array_equal(c.forward(x), x)
    assert np.all(c.mask == 1)
    with pytest.raises(ShapeError):
        Compactor(np.ones((3, 3, 3, 3)))


def test_forward_is_deterministic_and_shape_checked(rng):
    model = build_miniconv((4, 6), input_shape=(3, 8, 8))
    x = rng.standard_normal((3, 3, 8, 8)).astype(np.float32)
    assert model.forward(x).shape == (3, 10)
    assert np.array_equal(model.forward(x), model.forward(x))
    with pytest.raises(ShapeError, match=r"\(N, 3, 8, 8\)"):
        model.forward(np.zeros((1, 3, 9, 9), np.float32))
    model.nodes[3].params["kernel"] = np.zeros((6, 5, 3, 3), np.float32)
    with pytest.raises(ShapeError, match="node 3"):
        model.forward(x)


def test_graph_rejects_bad_order_and_branching_targets():
    with pytest.raises(GraphError):
        ModelGraph([ReLU((0,))], (1, 2, 2), 1)
    # target feeding two consumers
    nodes = [Conv2d(np.ones((1, 1, 1, 1)), None, inputs=(-1,), target=True), ReLU((0,)), Add((0, 1))]
    with pytest.raises(GraphError, match="consumers"):
        ModelGraph(nodes, (1, 2, 2), 1)


class _Fixed:
    """Constant-logit stand-in, to exercise evaluate without training."""


def _dataset(x, y, k):
    return Dataset(x.astype(np.float32), y, k)


def test_evaluate_examples():
    # GAP of a one-hot channel image, identity classifier: argmax equals the label
    k = 4
    y = np.arange(12) % k
    x = np.zeros((12, k, 2, 2))
    x[np.arange(12), y] = 1.0
    nodes = [GlobalAvgPool((-1,)), Conv2d(np.eye(k).reshape(k, k, 1, 1).astype(np.float32), None, inputs=(0,))]
    m = ModelGraph(nodes, (k, 2, 2), k)
    assert evaluate(m, _dataset(x, y, k)) == 1.0
    assert evaluate(m, _dataset(x[:1], y[:1], k)) == 1.0
    with pytest.raises(ValueError):
        evaluate(m, _dataset(x[:0], y[:0], k))
    # constant logits (ties -> class 0) against random labels: about 1/10
    r = np.random.default_rng(5)
    labels = r.integers(0, 10, 2000)
    const = ModelGraph([GlobalAvgPool((-1,)), Conv2d(np.zeros((10, 1, 1, 1), np.float32), None, inputs=(0,))], (1, 1, 1), 10)
    acc = evaluate(const, Dataset(np.zeros((2000, 1, 1, 1), np.float32), labels, 10))
    assert abs(acc - 0.1) < 4 * math.sqrt(0.09 / 2000)
