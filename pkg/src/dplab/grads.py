"""Losses, full-batch gradients and per-example gradients for :class:`Model`."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autograd as ad
from .models import ACTIVATION_FNS, Model

LOSSES = ("mse", "xent")


@dataclass
class GradientBatch:
    """Per-example gradients as rows of an ``(n, d)`` array, in flatten order."""

    rows: np.ndarray
    losses: np.ndarray | None = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise ValueError(f"GradientBatch needs a non-empty (n, d) array, got shape {self.rows.shape}")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def mean(self) -> np.ndarray:
        return self.rows.sum(axis=0) / self.n

    def norms(self) -> np.ndarray:
        return _kernels.row_norms(self.rows)

    def select(self, columns) -> "GradientBatch":
        return GradientBatch(self.rows[:, columns], self.losses)


def _loss_node(pred: ad.Node, y: np.ndarray, loss: str) -> ad.Node:
    if loss == "mse":
        return ad.mse(pred, y)
    if loss == "xent":
        return ad.softmax_cross_entropy(pred, y)
    raise ValueError(f"unknown loss {loss!r}; choose from {LOSSES}")


def example_losses(model: Model, X: np.ndarray, y: np.ndarray, loss: str) -> np.ndarray:
    out = model.predict(X)
    if loss == "mse":
        r = out - np.asarray(y, dtype=np.float64).reshape(out.shape)
        return 0.5 * np.sum(r * r, axis=1)
    if loss == "xent":
        shifted = out - out.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return -logp[np.arange(len(out)), np.asarray(y, dtype=np.int64)]
    raise ValueError(f"unknown loss {loss!r}; choose from {LOSSES}")


def batch_loss(model: Model, X, y, loss: str) -> float:
    return float(example_losses(model, X, y, loss).mean())


def accuracy(model: Model, X, y, loss: str) -> float:
    """Class accuracy for ``xent``; sign agreement with +-1 targets for ``mse``."""
    out = model.predict(X)
    if loss == "xent":
        return float(np.mean(out.argmax(axis=1) == np.asarray(y)))
    return float(np.mean(np.sign(out[:, 0]) == np.sign(np.asarray(y, dtype=np.float64))))


def loss_and_grad(model: Model, X, y, loss: str) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient, flattened in parameter order."""
    tape = ad.Tape()
    pred, leaves = model.forward(tape, X)
    L = _loss_node(pred, y, loss)
    value = float(L.value)
    grads = tape.grad(L, list(leaves.values()))
    return value, np.concatenate([g.ravel() for g in grads])


def _per_example_loop(model, X, y, loss):
    rows, losses = [], []
    for i in range(len(X)):
        value, g = loss_and_grad(model, X[i:i + 1], y[i:i + 1], loss)
        rows.append(g)
        losses.append(value)
    return GradientBatch(np.stack(rows), np.array(losses))


def _per_example_batched(model, X, y, loss):
    act = ACTIVATION_FNS[model.activation]
    h = np.asarray(X, dtype=np.float64)
    model._check_input(h)
    inputs, pre = [], []
    for i in range(1, model.n_layers + 1):
        inputs.append(h)
        z = h @ model.effective(f"W{i}").T
        if model.bias:
            z = z + model.effective(f"b{i}")
        pre.append(z)
        h = act(z) if i < model.n_layers else z
    out = h
    n = len(out)
    if loss == "mse":
        delta = out - np.asarray(y, dtype=np.float64).reshape(out.shape)
        losses = 0.5 * np.sum(delta * delta, axis=1)
    elif loss == "xent":
        labels = np.asarray(y, dtype=np.int64)
        shifted = out - out.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        losses = -logp[np.arange(n), labels]
        delta = np.exp(logp)
        delta[np.arange(n), labels] -= 1.0
    else:
        raise ValueError(f"unknown loss {loss!r}; choose from {LOSSES}")

    blocks: dict[str, np.ndarray] = {}
    for i in range(model.n_layers, 0, -1):
        gW = _kernels.outer_rows(delta, inputs[i - 1])
        if f"W{i}" in model.masks:
            gW = gW * model.masks[f"W{i}"].ravel()
        blocks[f"W{i}"] = gW
        if model.bias:
            gb = delta.copy()
            if f"b{i}" in model.masks:
                gb = gb * model.masks[f"b{i}"]
            blocks[f"b{i}"] = gb
        if i > 1:
            delta = delta @ model.effective(f"W{i}")
            z = pre[i - 2]
            if model.activation == "relu":
                delta = delta * (z > 0)
            elif model.activation == "tanh":
                t = np.tanh(z)
                delta = delta * (1.0 - t * t)
    rows = np.concatenate([blocks[name] for name in model.params], axis=1)
    return GradientBatch(rows, losses)


def per_example_grads(model: Model, X, y, loss: str, method: str = "batched") -> GradientBatch:
    """Row ``i`` is the gradient of the loss on example ``i`` alone.

    ``method="loop"`` runs one taped backward pass per example and is the
    reference; ``"batched"`` computes the same rows with vectorized outer
    products and agrees with the loop to ~1e-15 relative.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("per_example_grads needs a non-empty batch")
    if method == "loop":
        return _per_example_loop(model, X, np.asarray(y), loss)
    if method == "batched":
        return _per_example_batched(model, X, np.asarray(y), loss)
    raise ValueError(f"unknown method {method!r}")
