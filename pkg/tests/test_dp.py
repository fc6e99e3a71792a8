import json
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qstop.chain import QuantizedChain, exact_chain
from qstop.dp import TIE_RTOL, backward_step, check_table, export_table, grid_rewards, solve
from qstop.finite import EnumerationTooLarge, FiniteHMM, bundled_specs, count_rules, oracle_value_finite
from qstop.quantize import WeightedGrid

SPECS = bundled_specs()


def test_constant_reward_stops_everywhere():
    hmm = replace(SPECS[1], reward=np.full((3, 2), 0.7))
    model = hmm.to_model()
    table = solve(model, exact_chain(model, hmm.hidden_grid()))
    assert table.value_at_origin == pytest.approx(0.7, abs=1e-15)
    for vals, flags in zip(table.values, table.stop_flags):
        assert np.allclose(vals, 0.7, atol=1e-15, rtol=0) and flags.all()


def test_one_hot_transitions_pick_the_pointed_value():
    P = sp.csr_matrix(np.array([[0, 1, 0], [0, 0, 1.0]]))
    vals, stop = backward_step([0.2, 0.9], P, [0.1, 0.5, 0.4])
    assert vals.tolist() == [0.5, 0.9]
    assert stop.tolist() == [False, True]


def test_two_point_example():
    vals, stop = backward_step([0.5], sp.csr_matrix([[0.3, 0.7]]), [1.0, 0.0])
    assert vals.tolist() == [0.5] and stop.tolist() == [True]


def test_ties_stop():
    vals, stop = backward_step([0.5], np.array([[1.0]]), [0.5])
    assert stop.tolist() == [True]


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        backward_step([0.5, 0.2], sp.csr_matrix([[0.3, 0.7]]), [1.0, 0.0])
    with pytest.raises(ValueError):
        backward_step([0.5], sp.csr_matrix([[0.3, 0.7]]), [1.0, 0.0, 2.0])


@pytest.mark.parametrize("hmm", SPECS, ids=[h.name for h in SPECS])
def test_dp_matches_stopping_rule_enumeration(hmm):
    model = hmm.to_model()
    table = solve(model, exact_chain(model, hmm.hidden_grid()))
    check_table(table, model.h_sup)
    assert abs(table.value_at_origin - oracle_value_finite(hmm)) <= 1e-10


def test_oracle_zero_reward():
    hmm = replace(SPECS[0], reward=np.zeros((2, 2)))
    assert oracle_value_finite(hmm) == 0.0


def test_oracle_constant_chain_returns_initial_reward():
    K = np.zeros((2, 2, 2, 2))
    K[:, :, 0, 0] = 1.0
    reward = np.array([[0.4, 0.1], [0.9, 0.2]])
    hmm = FiniteHMM(K, reward, 0, 0, 3)
    assert oracle_value_finite(hmm) == pytest.approx(0.4, abs=1e-15)
    model = hmm.to_model()
    assert solve(model, exact_chain(model, hmm.hidden_grid())).value_at_origin == pytest.approx(0.4, abs=1e-15)


def test_oracle_size_cap():
    assert count_rules(2, 3) == 26
    with pytest.raises(EnumerationTooLarge):
        oracle_value_finite(SPECS[1], max_rules=100)
    with pytest.raises(EnumerationTooLarge):
        oracle_value_finite(replace(SPECS[0], horizon=6))


def random_chain(rng, sizes, n_hidden=2):
    grids, trans = [], []
    for m in sizes:
        g = rng.dirichlet(np.ones(n_hidden), size=m)
        pts = np.concatenate([g, rng.integers(0, 2, size=(m, 1)).astype(float)], axis=1)
        grids.append(WeightedGrid(pts, np.full(m, 1.0 / m), 0.0, None))
    for a, b in zip(sizes[:-1], sizes[1:]):
        P = rng.random((a, b)) * (rng.random((a, b)) < 0.6)
        P[np.arange(a), rng.integers(0, b, size=a)] += 0.1
        trans.append(sp.csr_matrix(P / P.sum(axis=1, keepdims=True)))
    hidden = SPECS[0].hidden_grid()
    return QuantizedChain(grids, trans, [(0.0, 0.0)] * len(sizes), hidden, max(sizes))


@given(st.lists(st.integers(1, 6), min_size=2, max_size=5), st.integers(0, 2 ** 32 - 1))
def test_dp_invariants_on_random_chains(sizes, seed):
    sizes[0] = 1
    model = SPECS[0].to_model()
    chain = random_chain(np.random.default_rng(seed), sizes)
    table = solve(model, chain)
    check_table(table, model.h_sup, chain)
    T = table.horizon
    assert np.array_equal(table.values[T], table.rewards[T]) and table.stop_flags[T].all()
    for t in range(T):
        cont = chain.transitions[t] @ table.values[t + 1]
        assert np.all(table.values[t] >= cont) and np.all(table.values[t] >= table.rewards[t])
        gap = TIE_RTOL * np.maximum(np.abs(cont), np.abs(table.rewards[t]))
        assert np.all(table.stop_flags[t] == (table.rewards[t] >= cont - gap))


@given(arrays(float, (4, 3), elements=st.floats(0.0, 1.0)), st.floats(0.0, 1.0))
def test_grid_rewards_are_linear_in_gamma(raw, y):
    model = SPECS[3].to_model()
    hidden = SPECS[3].hidden_grid().points
    g = raw[:, :2] + 1e-3
    g /= g.sum(axis=1, keepdims=True)
    ys = np.rint(np.full((4, 1), y * 2))
    states = np.concatenate([g, ys], axis=1)
    expected = [sum(g[i, j] * SPECS[3].reward[j, int(ys[i, 0])] for j in range(2)) for i in range(4)]
    assert np.allclose(grid_rewards(model, hidden, states), expected, rtol=1e-14, atol=1e-15)


def test_check_table_catches_violations():
    model = SPECS[0].to_model()
    table = solve(model, exact_chain(model, SPECS[0].hidden_grid()))
    table.values[1] = table.values[1] - 1.0
    with pytest.raises(AssertionError):
        check_table(table, model.h_sup)


def test_export(tmp_path):
    model = SPECS[0].to_model()
    table = solve(model, exact_chain(model, SPECS[0].hidden_grid()))
    export_table(table, tmp_path / "v.csv")
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "t,index,value,stop"
    assert len(lines) == 1 + sum(v.size for v in table.values)
    summary = json.loads((tmp_path / "v.summary.json").read_text())
    assert summary["value_at_origin"] == table.value_at_origin
    assert float(lines[1].split(",")[2]) == table.value_at_origin
