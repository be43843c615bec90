"""Loss-landscape probes: linear interpolation between two models and random directions."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from pathlib import Path

from .grads import accuracy, batch_loss
from .models import Model

Point = Union[Model, np.ndarray]


def default_grid(n: int = 30) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) < 3:
        raise ValueError("interpolation grid needs at least 3 points")
    if grid[0] != 0.0 or grid[-1] != 1.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing from 0 to 1")
    return grid


def _affine(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 1.0:
        return b.copy()
    return a + alpha * (b - a)


def interpolate_models(theta0: Model, theta1: Model, alpha: float) -> Model:
    """Model whose every parameter is ``p0 + alpha * (p1 - p0)``.

    This form returns ``p0`` bit-exactly when the endpoints coincide, and
    ``alpha == 1`` returns ``p1`` exactly. Masks carry over only when both
    endpoints share them.
    """
    if not theta0.same_architecture(theta1):
        raise ValueError(f"architecture mismatch: {theta0.layer_sizes} vs {theta1.layer_sizes}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    out = theta0.copy()
    for name in out.params:
        out.params[name] = _affine(theta0.params[name], theta1.params[name], alpha)
    same_masks = (theta0.masks.keys() == theta1.masks.keys()
                  and all(np.array_equal(theta0.masks[k], theta1.masks[k]) for k in theta0.masks))
    if not same_masks:
        out.masks = {}
    return out


def _lerp(theta0: Point, theta1: Point, alpha: float) -> Point:
    if isinstance(theta0, Model):
        return interpolate_models(theta0, theta1, alpha)
    a = np.asarray(theta0, dtype=np.float64)
    b = np.asarray(theta1, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return _affine(a, b, alpha)


def loss_profile(theta0: Point, theta1: Point, loss_fn: Callable[[Point], float], grid=None) -> np.ndarray:
    grid = _check_grid(default_grid() if grid is None else grid)
    return np.array([loss_fn(_lerp(theta0, theta1, a)) for a in grid])


def instability_from_losses(losses: np.ndarray) -> float:
    """Peak loss along the path minus the mean of the two endpoint losses."""
    losses = np.asarray(losses, dtype=np.float64)
    return float(losses.max() - 0.5 * (losses[0] + losses[-1]))


def instability(theta0: Point, theta1: Point, loss_fn: Callable[[Point], float], grid=None) -> float:
    """Linear interpolation instability of the segment ``theta0 -> theta1`` on ``grid``.

    Can be negative when the interior dips below both endpoints.
    """
    return instability_from_losses(loss_profile(theta0, theta1, loss_fn, grid))


@dataclass
class InterpolationProfile:
    alphas: np.ndarray
    losses: np.ndarray
    accuracies: np.ndarray

    @property
    def endpoint_losses(self) -> tuple[float, float]:
        return float(self.losses[0]), float(self.losses[-1])

    @property
    def instability(self) -> float:
        return instability_from_losses(self.losses)

    def to_csv(self, theta0_name: str = "theta0", theta1_name: str = "theta1") -> str:
        """Metadata comment line, then ``alpha,loss,accuracy`` rows."""
        buf = io.StringIO()
        buf.write(f"# theta0={theta0_name} theta1={theta1_name} grid_size={len(self.alphas)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "loss", "accuracy"])
        for a, l, c in zip(self.alphas, self.losses, self.accuracies):
            w.writerow([repr(float(a)), repr(float(l)), repr(float(c))])
        return buf.getvalue()

    def write_csv(self, path, theta0_name: str = "theta0", theta1_name: str = "theta1") -> None:
        Path(path).write_text(self.to_csv(theta0_name, theta1_name))


def interpolation_profile(theta0: Model, theta1: Model, X, y, loss: str, grid=None) -> InterpolationProfile:
    """Loss and accuracy on ``(X, y)`` at every grid point between two models."""
    grid = _check_grid(default_grid() if grid is None else grid)
    losses, accs = [], []
    for a in grid:
        m = interpolate_models(theta0, theta1, float(a))
        losses.append(batch_loss(m, X, y, loss))
        accs.append(accuracy(m, X, y, loss))
    return InterpolationProfile(grid, np.array(losses), np.array(accs))


# random directions --------------------------------------------------------

def random_unit_directions(n_dirs: int, dim: int, seed: int = 0) -> np.ndarray:
    """``(n_dirs, dim)`` independent standard Gaussian rows normalized to unit length."""
    if n_dirs < 1 or dim < 1:
        raise ValueError("need n_dirs >= 1 and dim >= 1")
    dirs = np.random.default_rng(seed).standard_normal((n_dirs, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def max_pairwise_abs_cosine(vectors: np.ndarray) -> float:
    v = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    if len(v) < 2:
        return 0.0
    gram = np.abs(v @ v.T)
    return float(gram[np.triu_indices(len(v), k=1)].max())


@dataclass
class ProbeResult:
    alphas: np.ndarray
    losses: np.ndarray  # (n_dirs, len(alphas)); empty when no loss_fn was given
    max_abs_cosine: float
    directions: np.ndarray = field(repr=False)


def random_direction_probe(theta0: Point, distance: float, n_dirs: int,
                           loss_fn: Callable[[Point], float] | None = None, seed: int = 0,
                           grid=None) -> ProbeResult:
    """Loss along ``theta0 + alpha * distance * u`` for random unit directions ``u``."""
    if not distance > 0:
        raise ValueError("distance must be > 0")
    grid = _check_grid(default_grid() if grid is None else grid)
    base = theta0.flatten() if isinstance(theta0, Model) else np.asarray(theta0, dtype=np.float64)
    dirs = random_unit_directions(n_dirs, base.size, seed)
    curves = np.empty((0, len(grid)))
    if loss_fn is not None:
        curves = np.empty((n_dirs, len(grid)))
        for i, u in enumerate(dirs):
            for j, a in enumerate(grid):
                point = base + (a * distance) * u
                curves[i, j] = loss_fn(theta0.unflatten(point) if isinstance(theta0, Model) else point)
    return ProbeResult(grid, curves, max_pairwise_abs_cosine(dirs), dirs)


# parameter statistics -----------------------------------------------------

@dataclass
class ParamStats:
    l2_from_origin: float
    bin_edges: np.ndarray
    histograms: dict[str, np.ndarray]


def param_stats(model: Model, bin_edges=None) -> ParamStats:
    """L2 norm of all parameters and per-layer counts over fixed bins.

    Values outside the bin range are counted in the first/last bin.
    """
    edges = np.linspace(-1.0, 1.0, 41) if bin_edges is None else np.asarray(bin_edges, dtype=np.float64)
    hists = {}
    for name, p in model.params.items():
        vals = np.clip(p.ravel(), edges[0], edges[-1])
        hists[name] = np.histogram(vals, bins=edges)[0]
    return ParamStats(float(np.linalg.norm(model.flatten())), edges, hists)
