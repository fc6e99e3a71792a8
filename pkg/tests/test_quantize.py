import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qstop.model import MixedMeasure, uniform_box_part
from qstop.quantize import (ClvqParams, Schedule, WeightedGrid, clvq_train, estimate_distortion,
                            lloyd_refine, load_grid, nearest, project, quantize_measure, save_grid)


def uniform01(rng, n):
    return rng.random((n, 1))


def gaussian(rng, n):
    return rng.standard_normal((n, 1))


def test_grid_validation():
    with pytest.raises(ValueError):
        WeightedGrid(np.zeros((2, 1)), np.array([0.5, 0.6]), 0.0, 0)
    with pytest.raises(ValueError):
        WeightedGrid(np.zeros((2, 1)), np.array([0.5]), 0.0, 0)


@given(arrays(float, (7, 3), elements=st.floats(-5, 5)), arrays(float, (11, 3), elements=st.floats(-5, 5)))
def test_nearest_matches_brute_force_distance(points, data):
    idx = nearest(points, data)
    d2 = ((data[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    assert np.allclose(d2[np.arange(len(data)), idx], d2.min(axis=1), rtol=1e-9, atol=1e-9)


def test_nearest_ties_go_to_lowest_index():
    pts = np.array([[0.0], [2.0], [0.0]])
    assert nearest(pts, np.array([[1.0], [0.0]])).tolist() == [0, 0]


def test_nearest_ignores_subnormal_noise():
    pts = np.array([[1.0, 0.0], [0.0, 1.0]])
    data = np.array([[1.0, 1e-310], [5e-324, 1.0]])
    assert nearest(pts, data).tolist() == [0, 1]


def test_project_dimension_mismatch():
    g = WeightedGrid(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]), 0.0, 0)
    with pytest.raises(ValueError):
        project(g, [0.0, 1.0])
    assert project(g, [0.4]) == 0
    assert project(g, [0.5]) == 0
    assert project(g, [0.6]) == 1


def test_schedule_decreases():
    s = Schedule(1.0, 100.0)
    assert s(0) == pytest.approx(0.01)
    assert s(900) == pytest.approx(0.001)


def test_single_point_grid_is_the_mean():
    g = clvq_train(uniform01, 1, Schedule(1.0, 1.0), 20_000, seed=1, n_count=1000, n_holdout=50_000)
    assert g.points[0, 0] == pytest.approx(0.5, abs=0.02)
    assert g.weights.tolist() == [1.0]
    assert g.distortion_l2 == pytest.approx(np.sqrt(1 / 12), abs=0.01)


def test_lloyd_on_uniform_reaches_midpoint_grid():
    g = clvq_train(uniform01, 8, Schedule(1.0, 100.0), 100_000, seed=2, n_count=1000, n_holdout=1000)
    g = lloyd_refine(g, uniform01, 200, 50_000, seed=3, n_count=200_000)
    expected = (2 * np.arange(8) + 1) / 16
    assert np.allclose(np.sort(g.points[:, 0]), expected, atol=0.01)
    assert np.allclose(g.weights, 1 / 8, atol=0.01)
    assert g.distortion_l2 ** 2 == pytest.approx(1 / (12 * 64), rel=0.05)


def test_lloyd_zero_rounds_is_identity():
    g = clvq_train(uniform01, 4, n_iterations=2000, seed=0, n_count=1000, n_holdout=1000)
    assert lloyd_refine(g, uniform01, 0, 100, seed=0) is g


def test_pinned_points_stay_fixed():
    pin = np.array([[0.123]])
    g = clvq_train(uniform01, 5, n_iterations=5000, seed=0, pin=pin, n_count=1000, n_holdout=1000)
    g = lloyd_refine(g, uniform01, 5, 5000, seed=1)
    assert g.points[0, 0] == 0.123
    assert g.n_pinned == 1


def test_training_is_seed_deterministic():
    a = clvq_train(gaussian, 6, n_iterations=3000, seed=9, n_count=2000, n_holdout=2000)
    b = clvq_train(gaussian, 6, n_iterations=3000, seed=9, n_count=2000, n_holdout=2000)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.weights, b.weights)


def test_more_points_than_distinct_samples_shrinks_with_warning():
    two = lambda rng, n: rng.integers(0, 2, size=(n, 1)).astype(float)  # noqa: E731
    with pytest.warns(RuntimeWarning):
        g = clvq_train(two, 5, n_iterations=500, seed=0, n_count=1000, n_holdout=1000)
    assert g.size == 2
    assert g.distortion_l2 == 0.0


def test_estimate_distortion_standard_error():
    g = WeightedGrid(np.array([[0.25], [0.75]]), np.array([0.5, 0.5]), 0.0, 0)
    val, se = estimate_distortion(g, uniform01, 100_000, seed=4)
    assert abs(val - np.sqrt(1 / 48)) < 4 * se
    with pytest.raises(ValueError):
        estimate_distortion(g, uniform01, 1, seed=0)


def test_quantize_measure_keeps_heavy_atoms_exact(tank):
    params = ClvqParams(n_iterations=100_000, lloyd_rounds=100, samples_per_round=50_000, n_count=200_000)
    g = quantize_measure(tank.lambda_measure, 12, 0, params, pin=tank.x0)
    assert g.size == 12 and g.n_pinned == 2
    assert np.array_equal(g.points[0], tank.x0)
    assert np.array_equal(g.points[1], [1.0, 1.0])
    assert g.weights[0] == 0.25 and g.weights[1] == 0.25
    assert np.all(g.points[2:, 1] == 0.0)
    assert np.all((g.points[2:, 0] > 0) & (g.points[2:, 0] < 1))
    # ten interior points on a uniform law of mass 1/2: distortion^2 close to 0.5 / (12 * 100)
    assert g.distortion_l2 ** 2 == pytest.approx(0.5 / 1200, rel=0.1)


def test_quantize_measure_with_pin_outside_support():
    m = MixedMeasure(1, continuous_parts=(uniform_box_part([0.0], [1.0], 1.0),))
    params = ClvqParams(n_iterations=2000, lloyd_rounds=3, samples_per_round=10_000, n_count=50_000)
    g = quantize_measure(m, 4, 1, params, pin=np.array([2.0]))
    assert np.array_equal(g.points[0], [2.0])
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-12)


@given(st.integers(2, 9), st.integers(0, 2 ** 32 - 1))
def test_grid_weights_form_a_distribution(n, seed):
    g = clvq_train(gaussian, n, n_iterations=300, seed=seed, n_count=500, n_holdout=500)
    assert abs(g.weights.sum() - 1.0) <= 1e-12
    assert np.all(g.weights >= 0)
    assert g.distortion_l2 >= 0


def test_grid_save_load_roundtrip(tmp_path, tank_grid):
    path = tmp_path / "grid.txt"
    save_grid(tank_grid, path)
    back = load_grid(path)
    assert np.array_equal(back.points, tank_grid.points)
    assert np.array_equal(back.weights, tank_grid.weights)
    assert back.distortion_l2 == tank_grid.distortion_l2
    assert back.n_pinned == tank_grid.n_pinned
