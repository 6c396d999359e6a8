"""Tests for the dense network stack: forward, exact input gradients,
training, and the weight container."""

import numpy as np
import pytest
from scipy.optimize import linprog

from bintest.nn import (Dense, DimensionMismatch, LinearLoss, Network,
                        Normalize, Quantize, ReLU, TrainingDivergence,
                        ZeroGradientSignal, forward, input_gradient,
                        load_model, save_model, train_classifier)
from bintest.nn import ModelFormatError


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def scalar_reference_forward(layers, x):
    """Independent scalar-by-scalar evaluator: plain Python loops, no numpy
    linear algebra."""
    values = [float(v) for v in x]
    for layer in layers:
        if isinstance(layer, Dense):
            out = []
            for i in range(layer.out_dim):
                acc = float(layer.bias[i])
                for j in range(layer.in_dim):
                    acc += float(layer.weights[i, j]) * values[j]
                out.append(acc)
            values = out
        elif isinstance(layer, ReLU):
            values = [v if v > 0.0 else 0.0 for v in values]
        else:
            raise AssertionError(f"oracle does not handle {type(layer)}")
    return np.array(values)


def central_difference_gradient(net, x, loss, h=1e-5):
    grad = np.empty_like(x)
    for j in range(x.size):
        hi, lo = x.copy(), x.copy()
        hi[j] += h
        lo[j] -= h
        vhi, _ = loss.value_and_grad(net.forward(hi))
        vlo, _ = loss.value_and_grad(net.forward(lo))
        grad[j] = (vhi - vlo) / (2.0 * h)
    return grad


def lp_separable(X, y):
    """Exact linear-feasibility oracle: does a hyperplane with positive
    margin separate the two label groups?"""
    signs = np.where(np.asarray(y) > 0, 1.0, -1.0)
    A = -signs[:, None] * np.hstack([X, np.ones((len(X), 1))])
    res = linprog(c=np.zeros(X.shape[1] + 1), A_ub=A,
                  b_ub=-np.ones(len(X)), bounds=(None, None), method="highs")
    return res.status == 0


def random_relu_net(rng, in_dim=None, depth=None):
    in_dim = in_dim or int(rng.integers(2, 8))
    depth = depth if depth is not None else int(rng.integers(1, 3))
    layers = []
    dim = in_dim
    for _ in range(depth):
        width = int(rng.integers(3, 10))
        layers.append(Dense.seeded(dim, width, rng))
        layers.append(ReLU())
        dim = width
    layers.append(Dense.seeded(dim, int(rng.integers(2, 5)), rng))
    return Network(layers), in_dim


def point_away_from_kinks(net, rng, in_dim, margin=1e-3):
    """Draw x until every ReLU preactivation is at least `margin` from 0,
    so central differences do not straddle a kink."""
    for _ in range(200):
        x = rng.uniform(-1.0, 1.0, size=in_dim)
        y = x.copy()
        ok = True
        for layer in net.layers:
            if isinstance(layer, Dense):
                y = layer.weights @ y + layer.bias
            elif isinstance(layer, ReLU):
                if np.min(np.abs(y)) < margin:
                    ok = False
                    break
                y = np.maximum(y, 0.0)
        if ok:
            return x
    raise AssertionError("could not find a kink-free input")


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_forward_identity_network():
    net = Network([])
    np.testing.assert_array_equal(forward(net, [0.3, 0.7]), [0.3, 0.7])


def test_forward_single_dense_layer():
    net = Network([Dense([[1.0, 1.0]], [0.0])])
    np.testing.assert_allclose(forward(net, [0.25, 0.5]), [0.75])


def test_forward_matches_scalar_reference_on_zeros():
    rng = np.random.default_rng(0)
    net, in_dim = random_relu_net(rng, in_dim=5, depth=2)
    x = np.zeros(in_dim)
    expected = scalar_reference_forward(net.layers, x)
    np.testing.assert_allclose(net.forward(x), expected, atol=1e-12)


def test_forward_matches_scalar_reference_random_inputs():
    rng = np.random.default_rng(7)
    for _ in range(10):
        net, in_dim = random_relu_net(rng)
        x = rng.uniform(-1, 1, size=in_dim)
        np.testing.assert_allclose(net.forward(x),
                                   scalar_reference_forward(net.layers, x),
                                   atol=1e-10)


def test_forward_dimension_mismatch():
    net = Network([Dense([[1.0, 1.0]], [0.0])])
    with pytest.raises(DimensionMismatch) as exc:
        forward(net, [1.0, 2.0, 3.0])
    assert exc.value.expected == 2
    assert exc.value.got == 3


def test_forward_rejects_non_finite():
    with pytest.raises(ValueError):
        forward(Network([]), [np.nan, 0.0])


# ---------------------------------------------------------------------------
# input_gradient
# ---------------------------------------------------------------------------


def test_gradient_of_linear_model_is_weights():
    w = np.array([[0.5, -1.25, 2.0]])
    net = Network([Dense(w, [0.7])])
    g = input_gradient(net, [0.1, 0.2, 0.3], LinearLoss([1.0]))
    np.testing.assert_array_equal(g, w[0])


def test_gradient_of_constant_model_is_zero():
    net = Network([Dense(np.zeros((2, 3)), [1.0, -1.0])])
    g = input_gradient(net, [0.3, 0.1, 0.9], LinearLoss([1.0, 1.0]))
    np.testing.assert_array_equal(g, np.zeros(3))


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(3)
    net, in_dim = random_relu_net(rng, in_dim=4, depth=2)
    loss = LinearLoss(rng.normal(size=net.out_dim))
    x = point_away_from_kinks(net, rng, in_dim)
    g = input_gradient(net, x, loss)
    fd = central_difference_gradient(net, x, loss, h=1e-4)
    rel = np.abs(g - fd) / np.maximum.reduce([np.abs(g), np.abs(fd),
                                              np.full_like(g, 1e-6)])
    assert rel.max() <= 1e-4


def test_gradient_correctness_property_100_pairs():
    rng = np.random.default_rng(11)
    for _ in range(100):
        net, in_dim = random_relu_net(rng)
        loss = LinearLoss(rng.normal(size=net.out_dim))
        x = point_away_from_kinks(net, rng, in_dim)
        g = input_gradient(net, x, loss)
        fd = central_difference_gradient(net, x, loss, h=1e-4)
        rel = np.abs(g - fd) / np.maximum.reduce(
            [np.abs(g), np.abs(fd), np.full_like(g, 1e-6)])
        assert rel.max() <= 1e-4


def test_quantizer_blocks_gradient_without_straight_through():
    net = Network([Quantize(16), Dense(np.ones((1, 2)), [0.0])])
    with pytest.raises(ZeroGradientSignal):
        input_gradient(net, [0.5, 0.5], LinearLoss([1.0]))


def test_quantizer_straight_through_passes_gradient():
    dense = Dense(np.array([[2.0, -3.0]]), [0.0])
    plain = Network([dense])
    quant = Network([Quantize(16), dense])
    x = np.array([0.5, 0.25])
    g = input_gradient(quant, x, LinearLoss([1.0]), straight_through=True)
    np.testing.assert_array_equal(g, input_gradient(plain, x, LinearLoss([1.0])))


def test_quantizer_output_is_piecewise_constant():
    net = Network([Quantize(8)])
    x = np.array([0.31, 0.32])
    base = net.forward(x)
    np.testing.assert_array_equal(net.forward(x + 1e-6), base)


# ---------------------------------------------------------------------------
# split model
# ---------------------------------------------------------------------------


def test_split_consistency_bitwise():
    rng = np.random.default_rng(5)
    X, y = _blobs(rng, centers=[0.3, 0.7], n=60, dim=6)
    model = train_classifier(X, y, hidden_dims=(8,), epochs=5, seed=1)
    full = model.full_network()
    for _ in range(100):
        x = rng.uniform(0, 1, size=6)
        via_split = model.logits(x)
        via_full = full.forward(x)
        np.testing.assert_array_equal(via_split, via_full)


def test_frozen_forward_is_pure():
    norm = Normalize(mean=[0.2, 0.4], var=[1.0, 2.0], frozen=True)
    net = Network([norm])
    x = np.array([0.9, 0.1])
    first = net.forward(x)
    second = net.forward(x)
    np.testing.assert_array_equal(first, second)


def test_unfrozen_forward_drifts():
    norm = Normalize(mean=[0.0, 0.0], var=[1.0, 1.0], frozen=False, momentum=0.5)
    net = Network([norm])
    x = np.array([0.9, 0.1])
    first = net.forward(x)
    second = net.forward(x)
    assert not np.array_equal(first, second)


def test_set_frozen_round_trip():
    norm = Normalize(mean=[0.0], var=[1.0], frozen=True)
    net = Network([norm])
    assert net.frozen
    net.set_frozen(False)
    assert not net.frozen
    net.set_frozen(True)
    x = np.array([0.4])
    np.testing.assert_array_equal(net.forward(x), net.forward(x))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _blobs(rng, centers, n, dim):
    X, y = [], []
    for label, center in enumerate(centers):
        X.append(rng.normal(center, 0.03, size=(n, dim)))
        y.extend([label] * n)
    return np.clip(np.concatenate(X), 0, 1), np.array(y)


def test_train_linear_model_on_separable_blobs():
    rng = np.random.default_rng(2)
    X, y = _blobs(rng, centers=[0.25, 0.75], n=50, dim=4)
    assert lp_separable(X, np.where(y == 1, 1, -1))  # oracle first
    model = train_classifier(X, y, hidden_dims=(), epochs=100, seed=0)
    assert model.train_accuracy == 1.0


def test_train_rejects_single_class():
    X = np.random.default_rng(0).uniform(size=(20, 3))
    with pytest.raises(ValueError):
        train_classifier(X, np.zeros(20, dtype=int))


def test_train_four_class_mlp_reaches_95_percent():
    rng = np.random.default_rng(4)
    X, y = _blobs(rng, centers=[0.2, 0.4, 0.6, 0.8], n=64, dim=16)
    model = train_classifier(X, y, hidden_dims=(32, 16), seed=0)
    assert model.train_accuracy >= 0.95


def test_train_divergence_reports_epoch():
    rng = np.random.default_rng(6)
    X, y = _blobs(rng, centers=[0.2, 0.8], n=40, dim=4)
    with pytest.raises(TrainingDivergence) as exc:
        train_classifier(X, y, hidden_dims=(16,), lr=1e12, epochs=10, seed=0)
    assert exc.value.epoch >= 0


def test_training_is_seed_deterministic():
    rng = np.random.default_rng(8)
    X, y = _blobs(rng, centers=[0.3, 0.7], n=40, dim=8)
    a = train_classifier(X, y, hidden_dims=(8,), epochs=5, seed=3)
    b = train_classifier(X, y, hidden_dims=(8,), epochs=5, seed=3)
    np.testing.assert_array_equal(a.readout.weights, b.readout.weights)
    for la, lb in zip(a.feature_extractor.layers, b.feature_extractor.layers):
        if isinstance(la, Dense):
            np.testing.assert_array_equal(la.weights, lb.weights)


# ---------------------------------------------------------------------------
# weight container
# ---------------------------------------------------------------------------


def test_weight_container_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    X, y = _blobs(rng, centers=[0.3, 0.7], n=40, dim=5)
    model = train_classifier(X, y, hidden_dims=(6,), epochs=5, seed=2,
                             input_norm=True)
    path = tmp_path / "model.json"
    save_model(model, path)
    loaded = load_model(path)
    x = rng.uniform(0, 1, size=5)
    np.testing.assert_array_equal(loaded.logits(x), model.logits(x))
    assert loaded.frozen == model.frozen
    assert loaded.train_accuracy == model.train_accuracy


def test_weight_container_requires_version(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"type": "split_model", "feature_layers": [], '
                    '"readout": {"kind": "dense", "weights": [[1.0]], "bias": [0.0]}}')
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_weight_container_rejects_unknown_version(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format_version": 99, "type": "split_model", '
                    '"feature_layers": [], '
                    '"readout": {"kind": "dense", "weights": [[1.0]], "bias": [0.0]}}')
    with pytest.raises(ModelFormatError):
        load_model(path)
