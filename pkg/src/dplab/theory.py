"""Clipped-gradient alignment and the two-layer linear signal/noise analysis.

``ratio_R`` is the trace of the per-example gradient covariance over the
squared norm of the mean gradient. :func:`check_theorem1` evaluates both
sides of the alignment bound ``c . gbar/|gbar| >= C * (1 - R / 2)`` for the
all-rows-clipped surrogate ``c``. The bound is not universal: rows
``(0.01, -1), (10, 0), (10, 1)`` with ``C = 1`` violate it by about 0.075,
and random batches hit rare violations, so the checker reports the outcome
instead of assuming it.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .data import SyntheticSpec, population_second_moments, sample_synthetic
from .grads import GradientBatch, batch_loss, per_example_grads
from .models import InitSpec, Model, balancedness_residual, build_two_layer_linear
from .optim import DpConfig, PhasePlan, train
from .pruning import PruneSpec, masks_from, rewind


class FlowDivergedError(RuntimeError):
    pass


def _rows(batch) -> np.ndarray:
    rows = batch.rows if isinstance(batch, GradientBatch) else np.asarray(batch, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError(f"expected a non-empty (n, d) gradient array, got shape {rows.shape}")
    return rows


def ratio_R(batch) -> float:
    """``mean_i |g_i - gbar|^2 / |gbar|^2``."""
    trace_cov, mean_sq = _kernels.ratio_terms(_rows(batch))
    if mean_sq == 0.0:
        raise ValueError("mean gradient is zero; R is undefined")
    return trace_cov / mean_sq


def clipped_gradient_true(batch, C: float) -> np.ndarray:
    """Mean of ``g_i * min(1, C / |g_i|)``."""
    if not C > 0:
        raise ValueError("C must be > 0")
    rows = _rows(batch)
    clipped, _ = _kernels.clip_rows(rows, C)
    return clipped.sum(axis=0) / rows.shape[0]


def clipped_gradient_surrogate(batch, C: float) -> np.ndarray:
    """``(C / n) * sum_i g_i / |g_i|``; exact when every ``|g_i| >= C``."""
    if not C > 0:
        raise ValueError("C must be > 0")
    rows = _rows(batch)
    norms = _kernels.row_norms(rows)
    if np.any(norms == 0):
        raise ValueError(f"surrogate needs nonzero rows; rows {np.flatnonzero(norms == 0).tolist()} are zero")
    return C * (rows / norms[:, None]).sum(axis=0) / rows.shape[0]


@dataclass
class Theorem1Check:
    lhs: float
    rhs: float
    R: float
    holds: bool
    lhs_true: float  # same projection using the exact clipped mean

    @property
    def slack(self) -> float:
        return self.lhs - self.rhs


def check_theorem1(batch, C: float, tol: float = 1e-9) -> Theorem1Check:
    rows = _rows(batch)
    R = ratio_R(rows)
    gbar = rows.sum(axis=0) / rows.shape[0]
    unit = gbar / np.linalg.norm(gbar)
    lhs = float(clipped_gradient_surrogate(rows, C) @ unit)
    rhs = C * (1.0 - R / 2.0)
    lhs_true = float(clipped_gradient_true(rows, C) @ unit)
    return Theorem1Check(lhs, rhs, R, lhs >= rhs - tol, lhs_true)


def random_gradient_batch(rng: np.random.Generator, C: float, n_range=(2, 32), d_range=(2, 64)) -> np.ndarray:
    """Random per-example gradients with every row norm ``>= C`` and a nonzero mean.

    Rows share a random mean direction plus isotropic spread of random
    relative size; norms are then reset to ``C * (1 + t)`` with ``t`` zero for
    a third of batches (all rows on the sphere) and exponential otherwise.
    """
    while True:
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        d = int(rng.integers(d_range[0], d_range[1] + 1))
        mu = rng.standard_normal(d)
        spread = rng.exponential(1.0)
        G = mu + spread * rng.standard_normal((n, d))
        norms = np.linalg.norm(G, axis=1)
        if np.any(norms == 0):
            continue
        stretch = rng.choice([0.0, 1.0, 5.0])
        target = C * (1.0 + stretch * rng.exponential(1.0, size=n))
        G *= (target / norms)[:, None]
        # rounding can leave a row a hair under C under either norm routine
        for _ in range(8):
            short = (_kernels.row_norms(G) < C) | (np.linalg.norm(G, axis=1) < C)
            if not short.any():
                break
            G[short] *= 1.0 + 2.0 ** -50
        if np.any(G.sum(axis=0) != 0):
            return G


THEOREM1_COLUMNS = ["trial", "n", "d", "C", "R", "lhs", "rhs", "holds"]


def theorem1_trials(n_trials: int, seed: int = 0, Cs=(0.1, 0.5, 1.0)) -> list[dict]:
    """Check the alignment bound on ``n_trials`` random batches; trial ``t`` uses seed ``(seed, t)``."""
    out = []
    for t in range(n_trials):
        rng = np.random.default_rng([seed, t])
        C = float(rng.choice(np.asarray(Cs, dtype=np.float64)))
        G = random_gradient_batch(rng, C)
        res = check_theorem1(G, C)
        out.append({"trial": t, "n": G.shape[0], "d": G.shape[1], "C": C, "R": res.R,
                    "lhs": res.lhs, "rhs": res.rhs, "holds": res.holds})
    return out


def theorem1_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(THEOREM1_COLUMNS)
    for r in rows:
        w.writerow([r["trial"], r["n"], r["d"], repr(r["C"]), repr(r["R"]), repr(r["lhs"]),
                    repr(r["rhs"]), "true" if r["holds"] else "false"])
    return buf.getvalue()


def write_theorem1_csv(rows: list[dict], path) -> None:
    Path(path).write_text(theorem1_csv(rows))


# two-layer linear network -------------------------------------------------

def closed_form_optimum(spec: SyntheticSpec) -> np.ndarray:
    """Population least-squares row ``W*`` solving ``Sigma W*^T = E[y x]``.

    Falls back to the pseudo-inverse when ``Sigma`` is singular (``sigma == 0``).
    """
    if spec.sigma == 0 and not np.any(spec.v_array):
        raise ValueError("closed_form_optimum needs sigma > 0 or a nonzero v")
    Sigma, c = population_second_moments(spec)
    if spec.sigma > 0:
        w = np.linalg.solve(Sigma, c)
    else:
        w = np.linalg.pinv(Sigma) @ c
    return w[None, :]


def population_loss(W: np.ndarray, spec: SyntheticSpec) -> float:
    Sigma, c = population_second_moments(spec)
    w = np.reshape(W, -1)
    return 0.5 * float(w @ Sigma @ w - 2.0 * w @ c + 1.0)


@dataclass
class FlowState:
    W1: np.ndarray
    W2: np.ndarray
    time: float
    loss: float
    balance_residual: float


@dataclass
class FlowResult:
    final: FlowState
    t: np.ndarray
    loss: np.ndarray
    balance_residual: np.ndarray
    norm_Wn: np.ndarray
    grad_norm: np.ndarray
    converged: bool
    dt: float
    method: str

    FLOW_COLUMNS = ("t", "loss", "balance_residual", "norm_Wn")

    def to_csv(self, every: int = 1) -> str:
        """Trajectory rows every ``every`` steps; the final step is always included."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FLOW_COLUMNS)
        idx = list(range(0, len(self.t), every))
        if idx[-1] != len(self.t) - 1:
            idx.append(len(self.t) - 1)
        for i in idx:
            w.writerow([repr(float(self.t[i])), repr(float(self.loss[i])),
                        repr(float(self.balance_residual[i])), repr(float(self.norm_Wn[i]))])
        return buf.getvalue()

    def write_csv(self, path, every: int = 1) -> None:
        Path(path).write_text(self.to_csv(every))


def population_gradient_flow(model: Model, spec: SyntheticSpec, dt: float = 1e-2, max_time: float = 1000.0,
                             tol: float = 1e-8, method: str = "midpoint") -> FlowResult:
    """Integrate gradient flow of the population loss ``0.5 E[(W2 W1 x - y)^2]``.

    Gradients are exact expectations: with ``W = W2 W1`` and residual row
    ``r = W Sigma - E[y x]``, ``dL/dW1 = W2^T r`` and ``dL/dW2 = r W1^T``.

    ``method="midpoint"`` (default) is the implicit midpoint rule, solved by
    fixed-point iteration; it conserves every quadratic invariant of the
    flow, including ``W1 W1^T - W2^T W2``, up to rounding. ``"euler"`` is
    explicit Euler, whose balancedness drift grows like ``dt`` times the loss
    dissipated. Stops when the gradient norm drops below ``tol`` or at
    ``max_time``; raises :class:`FlowDivergedError` after 100 consecutive loss
    increases or a non-finite loss.
    """
    if method not in ("midpoint", "euler"):
        raise ValueError(f"unknown integrator {method!r}")
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if model.layer_sizes[1:] != [model.layer_sizes[1], 1] or model.bias or model.activation != "identity":
        raise ValueError("population_gradient_flow needs a two-layer linear model")
    if model.input_dim != spec.d:
        raise ValueError(f"model input width {model.input_dim} != spec dimension {spec.d}")
    Sigma, c = population_second_moments(spec)
    max_steps = int(np.ceil(max_time / dt))
    W1, W2, losses, res, wn, gn, status = _kernels.flow_run(
        model.params["W1"], model.params["W2"], Sigma, c, 1.0, spec.d_s, dt, max_steps, tol,
        midpoint=(method == "midpoint"))
    t = dt * np.arange(len(losses))
    if status == _kernels.FLOW_DIVERGED:
        raise FlowDivergedError(f"gradient flow diverged at t={t[-1]:.4g} with dt={dt}; reduce dt")
    final = FlowState(W1, W2, float(t[-1]), float(losses[-1]), float(res[-1]))
    return FlowResult(final, t, losses, res, wn, gn, status == _kernels.FLOW_CONVERGED, dt, method)


# R under pruning ----------------------------------------------------------

def noise_column_mask(m: int, d_s: int, d_n: int) -> np.ndarray:
    """First-layer mask that keeps exactly the signal columns."""
    mask = np.zeros((m, d_s + d_n))
    mask[:, :d_s] = 1.0
    return mask


def first_layer_R(model: Model, X, y) -> float:
    """``ratio_R`` of the per-example gradients restricted to ``W1``."""
    gb = per_example_grads(model, X, y, "mse")
    return ratio_R(gb.rows[:, :model.params["W1"].size])


@dataclass
class MatchedR:
    R: float
    train_loss: float
    steps: int
    matched: bool


def R_at_matched_loss(model: Model, dataset, train_cfg: DpConfig, target_loss: float, seed: int = 0,
                      max_epochs: int = 200) -> MatchedR:
    """Train ``model`` (masks respected) until its training loss is ``<= target_loss``, then measure R."""
    X, y = dataset.inputs, dataset.labels
    if batch_loss(model, X, y, "mse") <= target_loss:
        return MatchedR(first_layer_R(model, X, y), batch_loss(model, X, y, "mse"), 0, True)
    res = train(model, dataset, PhasePlan.single(train_cfg, max_epochs), seed,
                stop=lambda m: batch_loss(m, X, y, "mse") <= target_loss)
    loss = batch_loss(res.model, X, y, "mse")
    return MatchedR(first_layer_R(res.model, X, y), loss, len(res.steps), loss <= target_loss)


@dataclass
class RRow:
    seed: int
    keep_fraction: float
    R: float
    train_loss: float
    steps: int
    matched: bool


def R_under_pruning(spec: SyntheticSpec, keep_fractions, train_cfg: DpConfig, seeds=(0,), m: int = 16,
                    target_loss: float = 0.2, pretrain_epochs: int = 20,
                    init: InitSpec | None = None) -> list[RRow]:
    """For each seed and keep fraction: prune ``W1`` by magnitude, rewind, train to ``target_loss``, report R.

    Each seed redraws the dataset (``spec.seed`` offset by the seed) and the init.
    """
    rows = []
    for seed in seeds:
        s = SyntheticSpec(spec.v, spec.sigma, spec.d_n, spec.n, spec.seed + seed)
        data = sample_synthetic(s)
        init_spec = init or InitSpec("uniform", seed=seed)
        init_model = build_two_layer_linear(spec.d_s, spec.d_n, m,
                                            InitSpec(init_spec.scheme, seed, init_spec.mean, init_spec.std,
                                                     init_spec.scale))
        pretrained = None
        for kf in keep_fractions:
            pspec = PruneSpec(kf, pretrain_epochs, layers=("W1",))
            if pretrained is None and pretrain_epochs > 0:
                pretrained = train(init_model, data, PhasePlan.single(train_cfg, pretrain_epochs), seed).model
            source = pretrained if pretrained is not None else init_model
            masked = rewind(init_model, masks_from(source, pspec))
            r = R_at_matched_loss(masked, data, train_cfg, target_loss, seed)
            rows.append(RRow(seed, float(kf), r.R, r.train_loss, r.steps, r.matched))
    return rows


def median_by_keep_fraction(rows: list[RRow]) -> dict[float, float]:
    out: dict[float, list[float]] = {}
    for r in rows:
        out.setdefault(r.keep_fraction, []).append(r.R)
    return {k: float(np.median(v)) for k, v in out.items()}
