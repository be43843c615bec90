import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dplab.data import make_blobs
from dplab.grads import loss_and_grad, per_example_grads
from dplab.models import InitSpec, build_mlp
from dplab.optim import (EPOCH_COLUMNS, ConfigError, DpConfig, PhasePlan, clip_per_example, dp_step,
                         epochs_csv, privatized_gradient, steps_jsonl, train)


# clipping -----------------------------------------------------------------

def test_clip_long_vector():
    np.testing.assert_allclose(clip_per_example(np.array([3.0, 4.0]), 1.0), [0.6, 0.8], rtol=0, atol=1e-16)


def test_clip_short_vector_unchanged():
    g = np.array([0.3, 0.4])
    assert np.array_equal(clip_per_example(g, 1.0), g)


def test_clip_zero():
    assert np.array_equal(clip_per_example(np.zeros(3), 1.0), np.zeros(3))


def test_clip_rejects_bad_C():
    with pytest.raises(ValueError):
        clip_per_example(np.ones(2), 0.0)


vec = st.lists(st.floats(-1e3, 1e3, allow_subnormal=False), min_size=1, max_size=20).map(np.array)


@given(g=vec, C=st.floats(1e-3, 1e3))
def test_clip_norm_bound_and_direction(g, C):
    out = clip_per_example(g, C)
    assert np.linalg.norm(out) <= C + 1e-12
    if np.linalg.norm(g) <= C:
        assert np.array_equal(out, g)
    else:
        # positive multiple of g
        k = np.linalg.norm(out) / np.linalg.norm(g)
        np.testing.assert_allclose(out, k * g, rtol=1e-12, atol=1e-300)


@given(g=vec, C=st.floats(1e-2, 1e2), alpha=st.floats(1e-2, 1e2))
def test_clip_positively_homogeneous(g, C, alpha):
    np.testing.assert_allclose(clip_per_example(alpha * g, alpha * C), alpha * clip_per_example(g, C),
                               rtol=1e-12, atol=1e-12)


# configuration ------------------------------------------------------------

@pytest.mark.parametrize("kwargs, field", [
    ({"mode": "dpsgd", "sigma": 1.0}, "C"),
    ({"mode": "dpsgd", "C": 1.0}, "sigma"),
    ({"mode": "clip_only"}, "C"),
    ({"mode": "noise_only"}, "sigma"),
    ({"mode": "adam"}, "mode"),
    ({"mode": "sgd", "lr": 0.0}, "lr"),
    ({"mode": "sgd", "batch_size": 0}, "batch_size"),
    ({"mode": "clip_only", "C": -1.0}, "C"),
])
def test_config_invariants(kwargs, field):
    with pytest.raises(ConfigError, match=field):
        DpConfig(**kwargs)


def test_phase_plan_bounds():
    cfg = DpConfig()
    with pytest.raises(ConfigError):
        PhasePlan(5, 3, cfg, cfg)
    with pytest.raises(ConfigError):
        PhasePlan(-1, 3, cfg, cfg)


# steps ---------------------------------------------------------------------

def _toy(seed=0, n=16):
    ds = make_blobs(n, 3, 4, seed=seed)
    m = build_mlp([4, 8, 3], "tanh", InitSpec(seed=seed))
    return m, ds


def test_dpsgd_sigma_zero_equals_clip_only():
    m, ds = _toy()
    a, _ = dp_step(m.copy(), ds.inputs, ds.labels, "xent", DpConfig("dpsgd", 0.1, 16, C=0.05, sigma=0.0))
    b, _ = dp_step(m.copy(), ds.inputs, ds.labels, "xent", DpConfig("clip_only", 0.1, 16, C=0.05))
    assert np.array_equal(a.flatten(), b.flatten())


def test_generous_C_sigma_zero_is_sgd():
    m, ds = _toy()
    Cmax = per_example_grads(m, ds.inputs, ds.labels, "xent").norms().max()
    a, _ = dp_step(m.copy(), ds.inputs, ds.labels, "xent", DpConfig("dpsgd", 0.1, 16, C=Cmax * 1.01, sigma=0.0))
    b, _ = dp_step(m.copy(), ds.inputs, ds.labels, "xent", DpConfig("sgd", 0.1, 16))
    assert np.array_equal(a.flatten(), b.flatten())
    _, g = loss_and_grad(m, ds.inputs, ds.labels, "xent")
    np.testing.assert_allclose(b.flatten(), m.flatten() - 0.1 * g, rtol=0, atol=1e-12)


def test_dp_step_clipping_arithmetic():
    """Update equals the hand-built clip/sum/average of per-example gradients."""
    m, ds = _toy(3)
    C = 0.2
    gb = per_example_grads(m, ds.inputs, ds.labels, "xent")
    manual = np.zeros(gb.d)
    for g in gb.rows:
        manual += g * min(1.0, C / np.linalg.norm(g))
    manual /= gb.n
    out, metrics = dp_step(m.copy(), ds.inputs, ds.labels, "xent", DpConfig("clip_only", 0.5, 16, C=C))
    np.testing.assert_allclose(out.flatten(), m.flatten() - 0.5 * manual, rtol=0, atol=1e-14)
    assert 0.0 <= metrics.clipped_fraction <= 1.0
    assert metrics.max_post_clip_norm <= C + 1e-12


def test_noise_statistics_dpsgd():
    """Batch of 4 rows; 1e5 draws of the privatized gradient around the clipped mean."""
    rng = np.random.default_rng(0)
    G = rng.standard_normal((4, 6)) * 3
    sigma, C, B = 0.7, 1.3, 4
    cfg = DpConfig("dpsgd", 0.1, B, C=C, sigma=sigma)
    clipped_mean = np.mean([clip_per_example(g, C) for g in G], axis=0)
    reps = 100_000
    stream = np.random.default_rng(42)
    noise = np.empty((reps, 6))
    for i in range(reps):
        noise[i] = privatized_gradient(G, cfg, stream)[0] - clipped_mean
    # noise on the sum has std sigma*C; after averaging it is sigma*C/B
    summed = noise * B
    d = G.shape[1]
    # grand mean over reps * d draws
    assert abs(summed.mean()) <= 4 * sigma * C / math.sqrt(reps * d)
    np.testing.assert_allclose(summed.std(axis=0), sigma * C, rtol=0.01)
    # expected squared deviation of the update
    msd = np.mean(np.sum(noise ** 2, axis=1))
    assert msd == pytest.approx(d * (sigma * C / B) ** 2, rel=0.02)


def test_noise_statistics_noise_only():
    G = np.random.default_rng(1).standard_normal((8, 5))
    cfg = DpConfig("noise_only", 0.1, 8, sigma=2.4, C_ref=1.0)
    stream = np.random.default_rng(7)
    draws = np.array([privatized_gradient(G, cfg, stream)[0] for _ in range(100_000)]) - G.mean(axis=0)
    np.testing.assert_allclose(draws.std(axis=0), 2.4 * 1.0 / 8, rtol=0.01)


def test_noise_lag_one_autocorrelation():
    G = np.ones((2, 3))
    cfg = DpConfig("dpsgd", 0.1, 2, C=1.0, sigma=1.0)
    stream = np.random.default_rng(3)
    clipped_mean = np.mean([clip_per_example(g, 1.0) for g in G], axis=0)
    x = np.array([privatized_gradient(G, cfg, stream)[0] - clipped_mean for _ in range(10_000)])
    for j in range(3):
        s = x[:, j] - x[:, j].mean()
        r = np.sum(s[1:] * s[:-1]) / np.sum(s * s)
        assert abs(r) <= 3 / math.sqrt(10_000)
    # across coordinates too
    c = np.corrcoef(x.T)
    assert np.all(np.abs(c[np.triu_indices(3, 1)]) <= 3 / math.sqrt(10_000))


def test_masked_coordinates_get_no_noise():
    G = np.zeros((3, 4))
    mask = np.array([1.0, 0.0, 1.0, 0.0])
    cfg = DpConfig("dpsgd", 0.1, 3, C=1.0, sigma=5.0)
    upd, _ = privatized_gradient(G, cfg, np.random.default_rng(0), mask)
    assert upd[1] == 0.0 and upd[3] == 0.0 and upd[0] != 0.0


@pytest.mark.parametrize("mode", ["sgd", "clip_only", "noise_only", "dpsgd"])
def test_masked_coordinates_stay_zero(mode):
    m, ds = _toy(2, n=40)
    mask = (np.random.default_rng(2).random(m.params["W1"].shape) < 0.5).astype(float)
    m.masks["W1"] = mask
    m.apply_masks()
    cfg = DpConfig(mode, 0.3, 8, C=0.5 if mode in ("clip_only", "dpsgd") else None,
                   sigma=1.0 if mode in ("noise_only", "dpsgd") else None)
    rng = np.random.default_rng(0)
    for step in range(25):
        m, _ = dp_step(m, ds.inputs[:8], ds.labels[:8], "xent", cfg, rng, 0, step)
        assert np.all(m.params["W1"][mask == 0] == 0.0)


def test_empty_batch_rejected():
    m, ds = _toy()
    with pytest.raises(ValueError):
        dp_step(m, ds.inputs[:0], ds.labels[:0], "xent", DpConfig())


# training -------------------------------------------------------------------

def _cfgs():
    return DpConfig("sgd", 0.2, 16), DpConfig("dpsgd", 0.5, 32, C=1.0, sigma=0.55)


def test_k_zero_runs_phase2_only():
    m, _ = _toy()
    ds = make_blobs(64, 3, 4, seed=1)
    sgd, dp = _cfgs()
    res = train(m, ds, PhasePlan(0, 3, sgd, dp), seed=4)
    assert {s.mode for s in res.steps} == {"dpsgd"}


def test_k_equals_T_runs_phase1_only():
    m, _ = _toy()
    ds = make_blobs(64, 3, 4, seed=1)
    sgd, dp = _cfgs()
    res = train(m, ds, PhasePlan(3, 3, sgd, dp), seed=4)
    assert {s.mode for s in res.steps} == {"sgd"}


def test_shared_phase1_identical_at_switch():
    m, _ = _toy()
    ds = make_blobs(96, 3, 4, seed=1)
    sgd, dp = _cfgs()
    for p1 in (sgd, dp):
        a = train(m, ds, PhasePlan(2, 4, p1, sgd), seed=9, snapshot_epochs={2})
        b = train(m, ds, PhasePlan(2, 4, p1, dp), seed=9, snapshot_epochs={2})
        assert np.array_equal(a.snapshots[2].flatten(), b.snapshots[2].flatten())
        assert not np.array_equal(a.model.flatten(), b.model.flatten())


def test_train_does_not_mutate_input():
    m, _ = _toy()
    before = m.flatten().copy()
    train(m, make_blobs(32, 3, 4), PhasePlan.single(DpConfig("sgd", 0.1, 8), 2))
    assert np.array_equal(m.flatten(), before)


def test_train_reproducible():
    m, _ = _toy()
    ds = make_blobs(64, 3, 4, seed=1)
    plan = PhasePlan(1, 3, *_cfgs())
    a, b = train(m, ds, plan, seed=2), train(m, ds, plan, seed=2)
    assert np.array_equal(a.model.flatten(), b.model.flatten())
    assert steps_jsonl(a.steps) == steps_jsonl(b.steps)


def test_post_clip_norms_bounded_over_ten_epochs():
    m, _ = _toy()
    ds = make_blobs(120, 3, 4, seed=5)
    C = 0.3
    res = train(m, ds, PhasePlan.single(DpConfig("dpsgd", 0.5, 32, C=C, sigma=0.55), 10), seed=1)
    assert len(res.epochs) == 10
    assert max(s.max_post_clip_norm for s in res.steps) <= C + 1e-12


def test_stop_callback_halts():
    m, _ = _toy()
    ds = make_blobs(64, 3, 4, seed=1)
    res = train(m, ds, PhasePlan.single(DpConfig("sgd", 0.1, 8), 5), stop=lambda _: True)
    assert len(res.steps) == 1 and len(res.epochs) == 1


def test_metrics_formats():
    m, _ = _toy()
    ds = make_blobs(32, 3, 4, seed=1)
    res = train(m, ds, PhasePlan.single(DpConfig("sgd", 0.1, 8), 2), test_set=make_blobs(16, 3, 4, seed=2))
    lines = steps_jsonl(res.steps).splitlines()
    assert len(lines) == 8
    rec = json.loads(lines[0])
    assert set(rec) == {"epoch", "step", "mode", "loss", "mean_grad_norm", "clipped_fraction",
                        "max_post_clip_norm", "param_norm"}
    rows = epochs_csv(res.epochs).splitlines()
    assert rows[0] == ",".join(EPOCH_COLUMNS) and len(rows) == 3
