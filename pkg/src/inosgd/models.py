"""Small cross-entropy models with closed-form per-sample gradients.

Flat parameter layout, layer by layer, weights row-major (out x in) then
biases:

* ``logistic``: ``w`` (d), ``b`` (1); binary labels in {0, 1}.
* ``softmax_linear``: ``W`` (K x d), ``b`` (K).
* ``mlp1``: ``W1`` (H x d), ``b1`` (H), ``W2`` (K x H), ``b2`` (K), tanh hidden.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .fileio import write_atomic

ARCHS = ("logistic", "softmax_linear", "mlp1")


@dataclass(frozen=True)
class Architecture:
    name: str
    dim: int
    num_classes: int = 2
    hidden: int = 0

    def __post_init__(self):
        if self.name not in ARCHS:
            raise ValueError(f"unknown architecture {self.name!r}")
        if self.dim < 1:
            raise ValueError("feature dimension must be positive")
        if self.name == "logistic" and self.num_classes != 2:
            raise ValueError("logistic model is binary")
        if self.name != "logistic" and self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.name == "mlp1" and self.hidden < 1:
            raise ValueError("mlp1 needs a positive hidden width")

    @property
    def param_count(self) -> int:
        d, K, H = self.dim, self.num_classes, self.hidden
        if self.name == "logistic":
            return d + 1
        if self.name == "softmax_linear":
            return K * d + K
        return H * d + H + K * H + K

    def to_dict(self) -> dict:
        out = {"arch": self.name, "dim": self.dim, "num_classes": self.num_classes}
        if self.name == "mlp1":
            out["hidden"] = self.hidden
        return out

    @classmethod
    def from_dict(cls, spec: dict) -> "Architecture":
        return cls(spec["arch"], int(spec["dim"]), int(spec.get("num_classes", 2)), int(spec.get("hidden", 0)))


@dataclass(frozen=True)
class ModelParams:
    arch: Architecture
    flat: np.ndarray

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=float)
        if flat.shape != (self.arch.param_count,):
            raise ValueError(f"expected {self.arch.param_count} parameters, got shape {flat.shape}")
        object.__setattr__(self, "flat", flat)

    @classmethod
    def zeros(cls, arch: Architecture) -> "ModelParams":
        return cls(arch, np.zeros(arch.param_count))

    @classmethod
    def init(cls, arch: Architecture, rng: np.random.Generator) -> "ModelParams":
        """Zero-initialized linear models; Glorot-uniform weights for the MLP."""
        flat = np.zeros(arch.param_count)
        if arch.name == "mlp1":
            d, H, K = arch.dim, arch.hidden, arch.num_classes
            l1 = np.sqrt(6.0 / (d + H))
            l2 = np.sqrt(6.0 / (H + K))
            flat[: H * d] = rng.uniform(-l1, l1, H * d)
            off = H * d + H
            flat[off : off + K * H] = rng.uniform(-l2, l2, K * H)
        return cls(arch, flat)

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(self.arch, flat)


@dataclass(frozen=True)
class PerSampleGrad:
    loss: float
    grad: np.ndarray


def _split(arch: Architecture, flat: np.ndarray):
    d, K, H = arch.dim, arch.num_classes, arch.hidden
    if arch.name == "logistic":
        return flat[:d], flat[d]
    if arch.name == "softmax_linear":
        return flat[: K * d].reshape(K, d), flat[K * d :]
    o1 = H * d
    o2 = o1 + H
    o3 = o2 + K * H
    return flat[:o1].reshape(H, d), flat[o1:o2], flat[o2:o3].reshape(K, H), flat[o3:]


def _check_inputs(model: ModelParams, X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != model.arch.dim:
        raise ValueError(f"feature dimension mismatch: model expects {model.arch.dim}, got shape {X.shape}")
    if y.shape != (X.shape[0],):
        raise ValueError("one label per record required")
    if y.size and (y.min() < 0 or y.max() >= model.arch.num_classes):
        raise ValueError("label out of range")
    return X, y


def _forward(model: ModelParams, X: np.ndarray, y: np.ndarray, want_grad: bool):
    arch = model.arch
    parts = _split(arch, model.flat)
    n = len(y)
    if arch.name == "logistic":
        w, b = parts
        z = X @ w + b
        # softplus(z) - y z, stable for either sign
        losses = np.logaddexp(0.0, z) - y * z
        if not want_grad:
            return losses, None
        r = 1.0 / (1.0 + np.exp(-z)) - y
        return losses, np.concatenate([r[:, None] * X, r[:, None]], axis=1)

    if arch.name == "softmax_linear":
        W, b = parts
        logits = X @ W.T + b
        hidden = None
    else:
        W1, b1, W2, b2 = parts
        hidden = np.tanh(X @ W1.T + b1)
        logits = hidden @ W2.T + b2
    lse = logsumexp(logits, axis=1)
    losses = lse - logits[np.arange(n), y]
    if not want_grad:
        return losses, None
    delta = np.exp(logits - lse[:, None])
    delta[np.arange(n), y] -= 1.0
    if arch.name == "softmax_linear":
        gW = delta[:, :, None] * X[:, None, :]
        return losses, np.concatenate([gW.reshape(n, arch.num_classes * arch.dim), delta], axis=1)
    dh = (delta @ W2) * (1.0 - hidden * hidden)
    gW1 = dh[:, :, None] * X[:, None, :]
    gW2 = delta[:, :, None] * hidden[:, None, :]
    flat = [gW1.reshape(n, arch.hidden * arch.dim), dh, gW2.reshape(n, arch.num_classes * arch.hidden), delta]
    return losses, np.concatenate(flat, axis=1)


def per_sample_losses_and_grads(model: ModelParams, X, y) -> tuple[np.ndarray, np.ndarray]:
    """Per-record cross-entropy losses and flattened gradients, shape (n,), (n, r)."""
    X, y = _check_inputs(model, X, y)
    losses, grads = _forward(model, X, y, want_grad=True)
    return losses, grads


def per_sample_loss_and_grad(model: ModelParams, x, y) -> PerSampleGrad:
    losses, grads = per_sample_losses_and_grads(model, np.atleast_2d(x), [y])
    return PerSampleGrad(float(losses[0]), grads[0])


def batch_forward_losses(model: ModelParams, X, y) -> np.ndarray:
    X, y = _check_inputs(model, X, y)
    return _forward(model, X, y, want_grad=False)[0]


def class_probabilities(model: ModelParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    fake = np.zeros(len(X), dtype=np.int64)
    X, _ = _check_inputs(model, X, fake)
    arch = model.arch
    parts = _split(arch, model.flat)
    if arch.name == "logistic":
        w, b = parts
        z = X @ w + b
        p1 = expit(z)
        return np.stack([1.0 - p1, p1], axis=1)
    if arch.name == "softmax_linear":
        W, b = parts
        logits = X @ W.T + b
    else:
        W1, b1, W2, b2 = parts
        logits = np.tanh(X @ W1.T + b1) @ W2.T + b2
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def predict(model: ModelParams, X) -> np.ndarray:
    return np.argmax(class_probabilities(model, X), axis=1)


def finite_difference_check(model: ModelParams, x, y, step: float = 1e-5) -> float:
    """Max absolute gap between the analytic gradient and central differences."""
    g = per_sample_loss_and_grad(model, x, y).grad
    X = np.atleast_2d(np.asarray(x, dtype=float))
    yy = np.asarray([y])
    fd = np.empty_like(g)
    for i in range(len(g)):
        e = np.zeros_like(g)
        e[i] = step
        up = batch_forward_losses(model.with_flat(model.flat + e), X, yy)[0]
        dn = batch_forward_losses(model.with_flat(model.flat - e), X, yy)[0]
        fd[i] = (up - dn) / (2 * step)
    return float(np.max(np.abs(fd - g)))


def save_checkpoint(path: str | os.PathLike, model: ModelParams) -> None:
    """Flat little-endian float64 parameters plus a ``.json`` sidecar."""
    path = os.fspath(path)
    write_atomic(path + ".json", json.dumps(model.arch.to_dict(), sort_keys=True))
    write_atomic(path, model.flat.astype("<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    path = os.fspath(path)
    with open(path + ".json") as fh:
        arch = Architecture.from_dict(json.load(fh))
    flat = np.fromfile(path, dtype="<f8").astype(float)
    return ModelParams(arch, flat)
