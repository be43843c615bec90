import numpy as np
import pytest
from hypothesis import given, strategies as st

from dplab.data import make_blobs
from dplab.models import InitSpec, Model, build_mlp
from dplab.landscape import (InterpolationProfile, cosine, default_grid, instability, instability_from_losses,
                             interpolate_models, interpolation_profile, loss_profile, max_pairwise_abs_cosine,
                             param_stats, random_direction_probe, random_unit_directions)


def _pair(seed=0):
    return build_mlp([3, 5, 2], init=InitSpec(seed=seed)), build_mlp([3, 5, 2], init=InitSpec(seed=seed + 1))


def double_well(theta):
    t = float(np.asarray(theta).reshape(-1)[0])
    return (1 - t * t) ** 2


def test_interpolate_endpoints_exact():
    a, b = _pair()
    assert np.array_equal(interpolate_models(a, b, 0.0).flatten(), a.flatten())
    assert np.array_equal(interpolate_models(a, b, 1.0).flatten(), b.flatten())


def test_interpolate_antipodal_midpoint():
    a, _ = _pair()
    neg = a.unflatten(-a.flatten())
    assert np.all(interpolate_models(a, neg, 0.5).flatten() == 0.0)


@given(alpha=st.floats(0, 1), seed=st.integers(0, 1000))
def test_interpolate_affine(alpha, seed):
    a, b = _pair(seed)
    np.testing.assert_allclose(interpolate_models(a, b, alpha).flatten(),
                               (1 - alpha) * a.flatten() + alpha * b.flatten(), rtol=0, atol=1e-12)


def test_interpolate_errors():
    a, _ = _pair()
    with pytest.raises(ValueError):
        interpolate_models(a, build_mlp([3, 4, 2]), 0.5)
    with pytest.raises(ValueError):
        interpolate_models(a, a, 1.5)


def test_instability_identical_models_zero():
    a, _ = _pair()
    ds = make_blobs(30, 2, 3, seed=0)
    prof = interpolation_profile(a, a, ds.inputs, ds.labels, "xent")
    assert prof.instability == 0.0
    assert instability(np.array([0.3]), np.array([0.3]), double_well) == 0.0
    f = lambda m: float(np.sum(np.sin(m.predict(ds.inputs))))
    assert instability(a, a.copy(), f, default_grid(97)) == 0.0


def test_double_well_three_point_grid():
    assert instability(np.array([-1.0]), np.array([1.0]), double_well, [0.0, 0.5, 1.0]) == 1.0


def test_double_well_default_grid_brute_force():
    grid = default_grid()
    assert len(grid) == 30 and grid[0] == 0 and grid[-1] == 1
    brute = max(double_well(-1 + 2 * a) for a in grid)
    assert instability(np.array([-1.0]), np.array([1.0]), double_well) == brute
    assert brute < 1.0  # 30 points never hit alpha = 0.5 exactly


@pytest.mark.parametrize("seed", range(100))
def test_grid_sup_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal(5)
    f = lambda t: float(np.polyval(coeffs, float(np.asarray(t).reshape(-1)[0])))
    t0, t1 = rng.standard_normal(2)
    grid = np.sort(np.concatenate([[0.0, 1.0], rng.random(int(rng.integers(1, 40)))]))
    grid = np.unique(grid)
    values = [f((1 - a) * t0 + a * t1) for a in grid]
    expected = max(values) - 0.5 * (values[0] + values[-1])
    assert instability(np.array([t0]), np.array([t1]), f, grid) == pytest.approx(expected, abs=1e-12)


def test_instability_symmetric():
    a, b = _pair(3)
    ds = make_blobs(40, 2, 3, seed=1)
    f = lambda m: float(np.mean(m.predict(ds.inputs) ** 2))
    grid = default_grid(31)
    assert instability(a, b, f, grid) == pytest.approx(instability(b, a, f, grid), abs=1e-12)


def test_instability_can_be_negative():
    assert instability_from_losses([1.0, 0.2, 1.0]) == 0.0
    # bowl between two high endpoints of different height
    assert instability_from_losses([2.0, 0.1, 1.0]) == 0.5
    assert instability(np.array([-1.0]), np.array([1.0]), lambda t: -double_well(t), [0, 0.5, 1]) == 0.0


def test_grid_validation():
    with pytest.raises(ValueError):
        loss_profile(np.zeros(1), np.ones(1), double_well, [0.0, 1.0])
    with pytest.raises(ValueError):
        loss_profile(np.zeros(1), np.ones(1), double_well, [0.1, 0.5, 1.0])
    with pytest.raises(ValueError):
        loss_profile(np.zeros(1), np.ones(1), double_well, [0.0, 0.6, 0.5, 1.0])


def test_profile_csv_format(tmp_path):
    prof = InterpolationProfile(np.array([0.0, 0.5, 1.0]), np.array([1.0, 2.0, 0.5]), np.array([0.9, 0.5, 1.0]))
    prof.write_csv(tmp_path / "p.csv", "a.ckpt", "b.ckpt")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "# theta0=a.ckpt theta1=b.ckpt grid_size=3"
    assert lines[1] == "alpha,loss,accuracy"
    assert lines[3] == "0.5,2.0,0.5"
    assert prof.endpoint_losses == (1.0, 0.5) and prof.instability == 1.25


# random directions ---------------------------------------------------------

def test_directions_unit_norm():
    d = random_unit_directions(10, 500, seed=1)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, rtol=0, atol=1e-12)


def test_probe_bowl_isotropic():
    r = 2.5
    res = random_direction_probe(np.zeros(2), r, 5, lambda t: float(np.sum(np.asarray(t) ** 2)), seed=3)
    np.testing.assert_allclose(res.losses[:, -1], r * r, rtol=1e-12)
    np.testing.assert_allclose(res.losses[:, 0], 0.0)


def test_probe_on_model():
    a, _ = _pair()
    res = random_direction_probe(a, 1.0, 3, lambda m: float(np.linalg.norm(m.flatten() - a.flatten())), seed=0,
                                 grid=[0.0, 0.5, 1.0])
    np.testing.assert_allclose(res.losses, [[0, 0.5, 1]] * 3, atol=1e-12)


def test_probe_seed_deterministic():
    a = random_direction_probe(np.zeros(50), 1.0, 4, seed=9)
    b = random_direction_probe(np.zeros(50), 1.0, 4, seed=9)
    assert np.array_equal(a.directions, b.directions) and a.max_abs_cosine == b.max_abs_cosine


def test_probe_errors():
    with pytest.raises(ValueError):
        random_direction_probe(np.zeros(3), 0.0, 2)
    with pytest.raises(ValueError):
        random_unit_directions(0, 3)


def test_high_dimensional_orthogonality():
    d = random_unit_directions(100, 100_000, seed=0)
    assert max_pairwise_abs_cosine(d) < 0.05


def test_cosine_helpers():
    assert cosine(np.array([1.0, 0]), np.array([0, 2.0])) == 0.0
    assert max_pairwise_abs_cosine(np.array([[1.0, 0], [-3.0, 0]])) == 1.0
    assert max_pairwise_abs_cosine(np.array([[1.0, 0]])) == 0.0


# parameter stats -------------------------------------------------------------

def test_param_stats_zero_model():
    assert param_stats(Model([2, 2], "identity")).l2_from_origin == 0.0


def test_param_stats_single_parameter():
    m = Model([1, 1], "identity", bias=False, params={"W1": np.array([[3.0]])})
    st_ = param_stats(m)
    assert st_.l2_from_origin == 3.0
    assert st_.histograms["W1"][-1] == 1 and st_.histograms["W1"].sum() == 1


def test_param_stats_histogram_counts():
    m = build_mlp([4, 6, 2], init=InitSpec(seed=0))
    st_ = param_stats(m)
    for name, p in m.params.items():
        assert st_.histograms[name].sum() == p.size
    assert len(st_.bin_edges) == 41
