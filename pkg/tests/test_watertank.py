import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from qstop.model import ModelDefinitionError, eval_density, eval_performance_ext
from qstop.watertank import (WaterTankParams, build_watertank, constants, hidden_factor, obs_factor,
                             simulate_truth)

P = WaterTankParams()


def test_default_constants():
    c = constants(P)
    assert c["g_sup"] == pytest.approx(13.298076013381092, rel=1e-12)
    assert c["r_sup"] == pytest.approx(18 * (8 + 2 * c["g_sup"]), rel=1e-12)
    assert c["r_sup"] == pytest.approx(622.73, abs=0.01)
    assert c["h_sup"] == 1.0 and c["h_lip"] == 1.0
    assert np.isfinite(c["delta"]) and c["delta"] > 1.0
    assert c["r_lip"] > c["r_sup"]


def test_interior_density_example(tank):
    # 2K f(0.2) * 2K g(0)
    expected = 2 * 5 * np.exp(-1.0) * 2 * constants(P)["g_sup"]
    assert eval_density(tank, [0.5, 0.0], [0.5], [0.3, 0.0], [0.0]) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(97.84, abs=0.01)


def test_empty_atom_unreachable_from_full(tank):
    assert eval_density(tank, [0.0, -1.0], [0.4], [1.0, 1.0], [0.0]) == 0.0


def test_reward_peaks_at_target(tank):
    assert tank.reward(np.array([0.5, 0.0]), np.array([0.3])) == 1.0
    pts = np.array([[0.2, 0.0], [0.6, 0.0]])
    assert eval_performance_ext(tank, [0.5, 0.5], [0.0], pts) == pytest.approx(0.8, abs=1e-15)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_reward_range_and_lipschitz(a, b):
    h = build_watertank().reward
    ha, hb = h(np.array([a, 0.0]), np.zeros(1)), h(np.array([b, 0.0]), np.zeros(1))
    assert 0.5 <= ha <= 1.0
    assert abs(ha - hb) <= abs(a - b) + 1e-15


def test_full_atom_emission_tail_is_tiny():
    # mid-range observation from the full tank: 2K g(-0.5)
    val = obs_factor(P, np.array([[0.5]]), np.array([[1.0, 1.0]]))[0]
    assert val == pytest.approx(2 * P.noise_pdf(-0.5), rel=1e-12)
    assert 0 < val < 1e-50


@pytest.mark.parametrize("x1", [0.0, 0.3, 0.95])
def test_kernel_mass_is_one(tank, x1):
    x = np.array([x1, 0.0 if 0 < x1 < 1 else -1.0])
    rng = np.random.default_rng(11)
    n = 200_000
    u = tank.lambda_measure.sample(rng, n)
    v = tank.nu_measure.sample(rng, n)
    vals = tank.density(u, v, x[None, :], np.zeros((1, 1)))
    se = vals.std() / np.sqrt(n)
    assert abs(vals.mean() - 1.0) < 4 * se


def test_zero_noise_trajectory_is_constant():
    run = simulate_truth(P, 6, np.random.default_rng(0), x1_start=0.3, xi=np.zeros(6), psi=np.zeros(6))
    assert np.all(run[:, 0] == 0.3) and np.all(run[:, 1] == 0.0) and np.all(run[:, 2] == 0.3)


def test_default_start_and_saturation():
    run = simulate_truth(P, 3, np.random.default_rng(0), xi=np.array([5.0, 0.0, 0.0]), psi=np.zeros(3))
    assert run[0].tolist() == [0.0, -1.0, 0.0]
    assert np.all(run[1:, 0] == 1.0) and np.all(run[1:, 1] == 1.0) and np.all(run[1:, 2] == 1.0)


def sample_kernel_hidden(x1, n, rng):
    """Draw the next extended level from the lambda-marginal of r by rejection."""
    from qstop.watertank import lambda_measure
    lam = lambda_measure(P)
    x = np.array([[x1, 0.0]])
    bound = max(2 * P.capacity * P.inflow_rate, 4.0)
    out = []
    while sum(len(o) for o in out) < n:
        u = lam.sample(rng, 4 * n)
        acc = rng.random(len(u)) * bound < hidden_factor(P, u, x)
        out.append(u[acc])
    return np.concatenate(out)[:n]


def test_one_step_law_matches_kernel():
    rng = np.random.default_rng(5)
    n = 20_000
    sim = np.array([simulate_truth(P, 1, rng, x1_start=0.3)[1, :2] for _ in range(n)])
    ker = sample_kernel_hidden(0.3, n, np.random.default_rng(6))
    p_sim, p_ker = np.mean(sim[:, 1] == 1.0), np.mean(ker[:, 1] == 1.0)
    assert abs(p_sim - np.exp(-3.5)) < 4 * np.sqrt(np.exp(-3.5) / n)
    assert abs(p_sim - p_ker) < 4 * np.sqrt(2 * np.exp(-3.5) / n)
    inner_sim = sim[sim[:, 1] == 0.0, 0]
    inner_ker = ker[ker[:, 1] == 0.0, 0]
    assert stats.ks_2samp(inner_sim, inner_ker).pvalue > 0.01


def test_observation_atoms_at_empty_state(tank):
    # from the empty tank, P(v = 0) = G(0) via the atom term; compare with clipped Gaussian draws
    rng = np.random.default_rng(2)
    n = 100_000
    v = np.clip(0.0 + P.noise_sigma * rng.standard_normal(n), 0, 1)
    p0 = obs_factor(P, np.array([[0.0]]), np.array([[0.0, -1.0]]))[0] / 4
    assert p0 == pytest.approx(0.5, abs=1e-12)
    assert abs(np.mean(v == 0.0) - p0) < 3 * np.sqrt(0.25 / n)


@pytest.mark.parametrize("kwargs", [dict(target=1.0), dict(target=0.0), dict(inflow_rate=0.0),
                                    dict(noise_sigma=-1.0), dict(horizon=0)])
def test_parameter_validation(kwargs):
    with pytest.raises(ModelDefinitionError):
        WaterTankParams(**kwargs)
