"""Minimal dense feed-forward stack with exact input gradients.

Everything is float64 numpy end to end. Forward passes are deterministic
given the layer parameters, which keeps model behaviour bit-reproducible
across runs; input gradients are computed by explicit backpropagation and
are exact up to floating-point roundoff (ReLU subgradient at 0 is 0).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WEIGHT_FORMAT_VERSION = 1


class DimensionMismatch(ValueError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected input dimension {expected}, got {got}")
        self.expected = expected
        self.got = got


class ZeroGradientSignal(RuntimeError):
    """A quantization front-end blocks all input gradients.

    The true gradient is identically zero everywhere the quantizer is flat
    (i.e. almost everywhere). Callers may retry with straight_through=True
    to replace the quantizer's backward pass with identity (BPDA).
    """


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class ModelFormatError(ValueError):
    """Weight container missing/unsupported version or malformed layers."""


def as_vector(x) -> np.ndarray:
    """Coerce to a finite float64 1-D array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains non-finite entries")
    return v


# ---------------------------------------------------------------------------
# Layers. Each layer implements forward(x) -> (y, cache) and
# backward(grad_out, cache, straight_through) -> (grad_in, param_grads).
# Inputs may be a single vector (d,) or a batch (n, d).
# ---------------------------------------------------------------------------


class Dense:
    """Affine map y = x W^T + b with weights of shape (out_dim, in_dim)."""

    kind = "dense"

    def __init__(self, weights, bias):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("dense layer needs a 2-D weight matrix and 1-D bias")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError("dense weight/bias output dimensions differ")

    @classmethod
    def seeded(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "Dense":
        # He-style scaling keeps activations well-conditioned under ReLU.
        w = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(self.in_dim, x.shape[-1])
        return x @ self.weights.T + self.bias, x

    def backward(self, grad_out, cache, straight_through=False):
        x = cache
        grad_in = grad_out @ self.weights
        if grad_out.ndim == 1:
            dw = np.outer(grad_out, x)
            db = grad_out.copy()
        else:
            dw = grad_out.T @ x
            db = grad_out.sum(axis=0)
        return grad_in, (dw, db)

    def to_dict(self) -> dict:
        return {
            "kind": "dense",
            "in_dim": int(self.in_dim),
            "out_dim": int(self.out_dim),
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
        }


class ReLU:
    kind = "relu"

    def forward(self, x):
        mask = x > 0.0
        return np.where(mask, x, 0.0), mask

    def backward(self, grad_out, cache, straight_through=False):
        return grad_out * cache, None

    def to_dict(self) -> dict:
        return {"kind": "relu"}


class Normalize:
    """Per-feature standardization with running statistics.

    With frozen=True the stored statistics are constants and forward is a
    pure function. With frozen=False every forward pass folds the incoming
    batch statistics into the running ones before normalizing, so the
    layer's behaviour drifts with the inputs it sees.
    """

    kind = "normalize"

    def __init__(self, mean, var, eps: float = 1e-5, momentum: float = 0.5,
                 frozen: bool = True):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = np.asarray(var, dtype=np.float64)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.frozen = bool(frozen)

    def forward(self, x):
        if x.shape[-1] != self.mean.shape[0]:
            raise DimensionMismatch(self.mean.shape[0], x.shape[-1])
        if not self.frozen:
            if x.ndim == 1:
                batch_mean, batch_var = x, np.zeros_like(x)
            else:
                batch_mean, batch_var = x.mean(axis=0), x.var(axis=0)
            m = self.momentum
            self.mean = (1.0 - m) * self.mean + m * batch_mean
            self.var = (1.0 - m) * self.var + m * batch_var
        inv = 1.0 / np.sqrt(self.var + self.eps)
        return (x - self.mean) * inv, inv

    def backward(self, grad_out, cache, straight_through=False):
        # Statistics are treated as constants in the backward pass.
        return grad_out * cache, None

    def to_dict(self) -> dict:
        return {
            "kind": "normalize",
            "mean": self.mean.tolist(),
            "var": self.var.tolist(),
            "eps": self.eps,
            "momentum": self.momentum,
            "frozen": self.frozen,
        }


class Quantize:
    """Input quantizer: rounds [0, 1] inputs to `levels` uniform values.

    Piecewise constant, so its true input gradient is zero almost
    everywhere; backward raises ZeroGradientSignal unless the caller asks
    for the straight-through (identity) surrogate.
    """

    kind = "quantize"

    def __init__(self, levels: int):
        if levels < 2:
            raise ValueError("quantizer needs at least 2 levels")
        self.levels = int(levels)

    def forward(self, x):
        scale = self.levels - 1
        return np.round(np.clip(x, 0.0, 1.0) * scale) / scale, None

    def backward(self, grad_out, cache, straight_through=False):
        if not straight_through:
            raise ZeroGradientSignal(
                "quantization front-end blocks input gradients; "
                "use straight_through=True for a BPDA surrogate"
            )
        return grad_out, None

    def to_dict(self) -> dict:
        return {"kind": "quantize", "levels": self.levels}


_LAYER_KINDS = {"dense": Dense, "relu": ReLU, "normalize": Normalize,
                "quantize": Quantize}


def layer_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "dense":
        return Dense(d["weights"], d["bias"])
    if kind == "relu":
        return ReLU()
    if kind == "normalize":
        return Normalize(d["mean"], d["var"], eps=d["eps"],
                         momentum=d["momentum"], frozen=d["frozen"])
    if kind == "quantize":
        return Quantize(d["levels"])
    raise ModelFormatError(f"unknown layer kind: {kind!r}")


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class Network:
    """An ordered stack of layers; an empty stack is the identity map."""

    def __init__(self, layers=()):
        self.layers = list(layers)

    def forward(self, x) -> np.ndarray:
        y = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            y, _ = layer.forward(y)
        return y

    def forward_cached(self, x):
        y = np.asarray(x, dtype=np.float64)
        caches = []
        for layer in self.layers:
            y, cache = layer.forward(y)
            caches.append(cache)
        return y, caches

    def backward_input(self, grad_out, caches, straight_through=False):
        g = np.asarray(grad_out, dtype=np.float64)
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            g, _ = layer.backward(g, cache, straight_through=straight_through)
        return g

    @property
    def in_dim(self):
        for layer in self.layers:
            if isinstance(layer, Dense):
                return layer.in_dim
            if isinstance(layer, Normalize):
                return layer.mean.shape[0]
        return None

    @property
    def out_dim(self):
        for layer in reversed(self.layers):
            if isinstance(layer, Dense):
                return layer.out_dim
        return self.in_dim

    @property
    def has_quantizer(self) -> bool:
        return any(isinstance(l, Quantize) for l in self.layers)

    @property
    def frozen(self) -> bool:
        return all(l.frozen for l in self.layers if isinstance(l, Normalize))

    def set_frozen(self, flag: bool) -> "Network":
        for layer in self.layers:
            if isinstance(layer, Normalize):
                layer.frozen = bool(flag)
        return self

    def copy(self) -> "Network":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# Scalar loss specs for input_gradient
# ---------------------------------------------------------------------------


class LinearLoss:
    """loss(out) = coeffs . out"""

    def __init__(self, coeffs):
        self.coeffs = np.asarray(coeffs, dtype=np.float64)

    def value_and_grad(self, out):
        return float(out @ self.coeffs), self.coeffs


def forward(net: Network, x) -> np.ndarray:
    """Evaluate the network on a single vector."""
    return net.forward(as_vector(x))


def input_gradient(net: Network, x, loss, straight_through: bool = False) -> np.ndarray:
    """Exact gradient of a scalar loss of the network output w.r.t. x.

    Raises ZeroGradientSignal when a quantization front-end is present and
    straight_through is False (the true gradient is identically zero).
    """
    out, caches = net.forward_cached(as_vector(x))
    _, grad_out = loss.value_and_grad(out)
    return net.backward_input(grad_out, caches, straight_through=straight_through)


# ---------------------------------------------------------------------------
# Split model: feature extractor + linear readout
# ---------------------------------------------------------------------------


@dataclass
class SplitModel:
    """A classifier split into every-layer-but-last and the final logits map.

    The composition readout(feature_extractor(x)) reproduces the full
    model's logits bitwise because it *is* the full model's computation.
    """

    feature_extractor: Network
    readout: Dense
    train_accuracy: float | None = None

    @property
    def n_classes(self) -> int:
        return self.readout.out_dim

    @property
    def frozen(self) -> bool:
        return self.feature_extractor.frozen

    def set_frozen(self, flag: bool) -> "SplitModel":
        self.feature_extractor.set_frozen(flag)
        return self

    def features(self, x) -> np.ndarray:
        return self.feature_extractor.forward(np.asarray(x, dtype=np.float64))

    def logits(self, x) -> np.ndarray:
        y, _ = self.readout.forward(self.features(x))
        return y

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)

    def full_network(self) -> Network:
        return Network(self.feature_extractor.layers + [self.readout])

    def input_gradient(self, x, dlogits, extra_feature_grad=None,
                       straight_through: bool = False) -> np.ndarray:
        """Backprop d(loss)/dx given d(loss)/dlogits (and optionally an
        extra d(loss)/dfeatures term added at the feature cut)."""
        _, caches = self.feature_extractor.forward_cached(as_vector(x))
        dfeat = np.asarray(dlogits, dtype=np.float64) @ self.readout.weights
        if extra_feature_grad is not None:
            dfeat = dfeat + extra_feature_grad
        return self.feature_extractor.backward_input(
            dfeat, caches, straight_through=straight_through)

    def copy(self) -> "SplitModel":
        return SplitModel(self.feature_extractor.copy(),
                          Dense(self.readout.weights.copy(), self.readout.bias.copy()),
                          self.train_accuracy)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def train_classifier(X, y, hidden_dims=(64, 32), activation: str = "relu",
                     lr: float = 0.05, epochs: int = 200, batch_size: int = 64,
                     seed: int = 0, input_norm: bool = False,
                     norm_momentum: float = 0.5) -> SplitModel:
    """Train a softmax classifier with plain mini-batch gradient descent.

    Args:
        X: (n, d) finite float data.
        y: (n,) integer labels in {0, ..., K-1}, at least two classes present.
        hidden_dims: widths of the hidden dense+activation blocks.
        activation: "relu" or "identity".
        input_norm: prepend a (frozen) standardization layer fit on X.

    Returns:
        SplitModel with `train_accuracy` recorded.

    Raises:
        TrainingDivergence if the loss becomes non-finite.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise ValueError("X must be a (n, d) array")
    if not np.all(np.isfinite(X)):
        raise ValueError("training data contains non-finite values")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("need at least 2 classes present in the labels")
    n_classes = int(y.max()) + 1
    if activation not in ("relu", "identity"):
        raise ValueError(f"unknown activation {activation!r}")

    rng = np.random.default_rng(seed)
    layers = []
    if input_norm:
        layers.append(Normalize(X.mean(axis=0), X.var(axis=0),
                                momentum=norm_momentum, frozen=True))
    dim = X.shape[1]
    for width in hidden_dims:
        layers.append(Dense.seeded(dim, width, rng))
        if activation == "relu":
            layers.append(ReLU())
        dim = width
    readout = Dense.seeded(dim, n_classes, rng)

    net = Network(layers + [readout])
    n = X.shape[0]
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0

    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, tb = X[idx], onehot[idx]
            zb, caches = net.forward_cached(xb)
            probs = _softmax(zb)
            # log of the target-class probability only: a confidently wrong
            # model gives -inf (divergence); a confidently right one gives 0.
            with np.errstate(divide="ignore"):
                loss = -np.mean(np.log(probs[np.arange(len(idx)), y[idx]]))
            if not np.isfinite(loss):
                raise TrainingDivergence(epoch)
            g = (probs - tb) / xb.shape[0]
            grads = []
            for layer, cache in zip(reversed(net.layers), reversed(caches)):
                g, pg = layer.backward(g, cache)
                grads.append((layer, pg))
            for layer, pg in grads:
                if pg is not None:
                    dw, db = pg
                    layer.weights -= lr * dw
                    layer.bias -= lr * db

    model = SplitModel(Network(layers), readout)
    model.train_accuracy = float(np.mean(model.predict(X) == y))
    return model


# ---------------------------------------------------------------------------
# Weight container (self-describing JSON; version field mandatory)
# ---------------------------------------------------------------------------


def save_model(model: SplitModel, path) -> None:
    doc = {
        "format_version": WEIGHT_FORMAT_VERSION,
        "type": "split_model",
        "frozen": model.frozen,
        "train_accuracy": model.train_accuracy,
        "feature_layers": [l.to_dict() for l in model.feature_extractor.layers],
        "readout": model.readout.to_dict(),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_model(path) -> SplitModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"not a valid model container: {exc}") from exc
    version = doc.get("format_version")
    if version != WEIGHT_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported weight format version: {version!r}")
    if doc.get("type") != "split_model":
        raise ModelFormatError(f"unsupported container type: {doc.get('type')!r}")
    feature = Network([layer_from_dict(d) for d in doc["feature_layers"]])
    readout = layer_from_dict(doc["readout"])
    if not isinstance(readout, Dense):
        raise ModelFormatError("readout layer must be dense")
    model = SplitModel(feature, readout, doc.get("train_accuracy"))
    model.set_frozen(bool(doc.get("frozen", True)))
    return model
