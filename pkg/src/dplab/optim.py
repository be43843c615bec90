"""DP-SGD and its ablations, plus the two-phase epoch trainer.

Aggregation for the clipped modes: clip each per-example gradient to norm
``C``, sum, add one Gaussian draw with per-coordinate std ``sigma * C``,
divide by the batch size, step. ``noise_only`` skips clipping and adds
``N(0, (sigma * C_ref / B)^2)`` to the mean gradient.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels
from .data import Dataset
from .grads import accuracy, batch_loss, per_example_grads
from .models import Model

MODES = ("sgd", "clip_only", "noise_only", "dpsgd")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DpConfig:
    mode: str = "sgd"
    lr: float = 0.1
    batch_size: int = 128
    C: float | None = None
    sigma: float | None = None
    C_ref: float = 1.0
    seed: int = 0
    epsilon_label: str | None = None
    grad_method: str = "batched"

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.mode not in MODES:
            out.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode in ("dpsgd", "clip_only") and self.C is None:
            out.append(f"mode={self.mode} requires clipping norm C")
        if self.mode in ("dpsgd", "noise_only") and self.sigma is None:
            out.append(f"mode={self.mode} requires noise multiplier sigma")
        if self.C is not None and not self.C > 0:
            out.append(f"C must be > 0, got {self.C}")
        if self.sigma is not None and not self.sigma >= 0:
            out.append(f"sigma must be >= 0, got {self.sigma}")
        if not self.C_ref > 0:
            out.append(f"C_ref must be > 0, got {self.C_ref}")
        if not self.lr > 0:
            out.append(f"lr must be > 0, got {self.lr}")
        if int(self.batch_size) < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.grad_method not in ("batched", "loop"):
            out.append(f"grad_method must be 'batched' or 'loop', got {self.grad_method!r}")
        return out

    @property
    def clips(self) -> bool:
        return self.mode in ("dpsgd", "clip_only")

    @property
    def noise_std(self) -> float:
        """Per-coordinate std of the noise added to the *averaged* gradient."""
        if self.mode == "dpsgd":
            return self.sigma * self.C
        if self.mode == "noise_only":
            return self.sigma * self.C_ref
        return 0.0


@dataclass(frozen=True)
class PhasePlan:
    """Epochs ``< k`` run ``phase1``; epochs ``k .. T-1`` run ``phase2``."""

    k: int
    T: int
    phase1: DpConfig
    phase2: DpConfig

    def __post_init__(self):
        if not 0 <= self.k <= self.T:
            raise ConfigError(f"PhasePlan needs 0 <= k <= T, got k={self.k}, T={self.T}")

    @classmethod
    def single(cls, cfg: DpConfig, epochs: int) -> "PhasePlan":
        return cls(epochs, epochs, cfg, cfg)

    def config_for(self, epoch: int) -> DpConfig:
        return self.phase1 if epoch < self.k else self.phase2


@dataclass
class StepMetrics:
    epoch: int
    step: int
    mode: str
    loss: float
    mean_grad_norm: float
    clipped_fraction: float
    max_post_clip_norm: float
    param_norm: float


@dataclass
class EpochSummary:
    epoch: int
    mode: str
    train_loss: float
    test_loss: float
    test_acc: float
    mean_grad_norm: float
    param_l2: float


EPOCH_COLUMNS = ["epoch", "mode", "train_loss", "test_loss", "test_acc", "mean_grad_norm", "param_l2"]


def clip_per_example(g: np.ndarray, C: float) -> np.ndarray:
    """``g / max(1, |g| / C)``; a zero vector passes through."""
    if not C > 0:
        raise ValueError(f"C must be > 0, got {C}")
    g = np.asarray(g, dtype=np.float64)
    clipped, _ = _kernels.clip_rows(g.reshape(1, -1), C)
    return clipped.reshape(g.shape)


def privatized_gradient(G: np.ndarray, cfg: DpConfig, rng: np.random.Generator,
                        mask: np.ndarray | None = None) -> tuple[np.ndarray, dict]:
    """Aggregate an ``(B, d)`` per-example gradient array according to ``cfg.mode``."""
    B, d = G.shape
    norms = _kernels.row_norms(G)
    info = {"mean_grad_norm": float(norms.mean()), "clipped_fraction": 0.0,
            "max_post_clip_norm": float(norms.max())}
    if cfg.clips:
        clipped, _ = _kernels.clip_rows(G, cfg.C)
        info["clipped_fraction"] = float(np.mean(norms > cfg.C))
        info["max_post_clip_norm"] = float(_kernels.row_norms(clipped).max())
        total = clipped.sum(axis=0)
    else:
        total = G.sum(axis=0)
    if cfg.mode == "dpsgd" and cfg.sigma > 0:
        noise = rng.standard_normal(d) * (cfg.sigma * cfg.C)
        total = total + (noise if mask is None else noise * mask)
    update = total / B
    if cfg.mode == "noise_only" and cfg.sigma > 0:
        noise = rng.standard_normal(d) * (cfg.sigma * cfg.C_ref / B)
        update = update + (noise if mask is None else noise * mask)
    return update, info


def dp_step(model: Model, X, y, loss: str, cfg: DpConfig, rng: np.random.Generator | None = None,
            epoch: int = 0, step: int = 0) -> tuple[Model, StepMetrics]:
    """One update of ``model`` in place; returns the model and the step's metrics."""
    if len(X) == 0:
        raise ValueError("dp_step needs a non-empty batch")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    gb = per_example_grads(model, X, y, loss, method=cfg.grad_method)
    mask = model.mask_vector() if model.masks else None
    update, info = privatized_gradient(gb.rows, cfg, rng, mask)
    theta = model.flatten() - cfg.lr * update
    if mask is not None:
        theta = theta * mask
    model.set_flat(theta)
    metrics = StepMetrics(epoch, step, cfg.mode, float(gb.losses.mean()), info["mean_grad_norm"],
                          info["clipped_fraction"], info["max_post_clip_norm"], float(np.linalg.norm(theta)))
    return model, metrics


@dataclass
class TrainResult:
    model: Model
    steps: list[StepMetrics] = field(default_factory=list)
    epochs: list[EpochSummary] = field(default_factory=list)
    snapshots: dict[int, Model] = field(default_factory=dict)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 0, epoch]).permutation(n)


def train(model: Model, train_set: Dataset, plan: PhasePlan, seed: int = 0,
          test_set: Dataset | None = None, snapshot_epochs=(),
          on_step: Callable[[StepMetrics], None] | None = None,
          stop: Callable[[Model], bool] | None = None) -> TrainResult:
    """Run ``plan.T`` epochs on a copy of ``model``.

    Shuffling uses a generator seeded by ``(seed, epoch)``; noise comes from
    one stream seeded by ``(seed, 1)`` that only advances on noisy steps, so
    two runs agree exactly for as long as their modes agree. Snapshot ``e``
    is the model after ``e`` completed epochs. ``stop`` is checked after every
    step and ends training early when it returns true.
    """
    model = model.copy()
    result = TrainResult(model)
    noise_rng = np.random.default_rng([seed, 1])
    loss = train_set.loss
    if 0 in snapshot_epochs:
        result.snapshots[0] = model.copy()
    step = 0
    for epoch in range(plan.T):
        cfg = plan.config_for(epoch)
        bs = min(int(cfg.batch_size), len(train_set))
        perm = epoch_permutation(seed, epoch, len(train_set))
        norms = []
        halted = False
        for start in range(0, len(perm), bs):
            idx = perm[start:start + bs]
            _, m = dp_step(model, train_set.inputs[idx], train_set.labels[idx], loss, cfg,
                           noise_rng, epoch, step)
            result.steps.append(m)
            norms.append(m.mean_grad_norm)
            if on_step is not None:
                on_step(m)
            step += 1
            if stop is not None and stop(model):
                halted = True
                break
        evals = test_set if test_set is not None else train_set
        result.epochs.append(EpochSummary(
            epoch, cfg.mode,
            batch_loss(model, train_set.inputs, train_set.labels, loss),
            batch_loss(model, evals.inputs, evals.labels, loss),
            accuracy(model, evals.inputs, evals.labels, loss),
            float(np.mean(norms)), float(np.linalg.norm(model.flatten()))))
        if epoch + 1 in snapshot_epochs:
            result.snapshots[epoch + 1] = model.copy()
        if halted:
            break
    return result


def _fmt(x):
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else str(x)
    return str(x)


def steps_jsonl(steps: list[StepMetrics]) -> str:
    return "".join(json.dumps(asdict(s), sort_keys=True) + "\n" for s in steps)


def epochs_csv_rows(epochs: list[EpochSummary]) -> list[list[str]]:
    return [EPOCH_COLUMNS] + [[_fmt(getattr(e, c)) for c in EPOCH_COLUMNS] for e in epochs]


def epochs_csv(epochs: list[EpochSummary]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(epochs_csv_rows(epochs))
    return buf.getvalue()


def write_epochs_csv(epochs: list[EpochSummary], path) -> None:
    Path(path).write_text(epochs_csv(epochs))
