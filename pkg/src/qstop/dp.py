"""Backward dynamic programming on a quantized filter-observation chain."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from qstop.chain import QuantizedChain
from qstop.model import StoppingModel

# relative gap below which reward and continuation count as a tie (round-off only)
TIE_RTOL = 8 * np.finfo(float).eps


@dataclass
class ValueTable:
    values: list[np.ndarray]
    stop_flags: list[np.ndarray]
    rewards: list[np.ndarray]
    value_at_origin: float
    summary: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.values) - 1


def grid_rewards(model: StoppingModel, hidden_points: np.ndarray, states: np.ndarray) -> np.ndarray:
    """H(psi) = sum_j gamma_j H(x_j, y) for each row psi = (gamma, y) of ``states``."""
    N = hidden_points.shape[0]
    gam, ys = states[:, :N], states[:, N:]
    uniq, inv = np.unique(ys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    shape = (uniq.shape[0], N)
    hx = np.broadcast_to(model.reward(hidden_points[None, :, :], uniq[:, None, :]), shape)
    return np.einsum("ij,ij->i", gam, hx[inv])


def backward_step(rewards_t: np.ndarray, P_t, values_next: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One Bellman step: max(reward, P_t @ values_next), stopping on ties.

    The value is the exact max; the stop flag treats a gap within a few ulps
    as a tie so that round-off cannot flip it.
    """
    rewards_t = np.asarray(rewards_t, dtype=float)
    values_next = np.asarray(values_next, dtype=float)
    if P_t.shape != (rewards_t.size, values_next.size):
        raise ValueError(f"transition shape {P_t.shape} does not match grids "
                         f"({rewards_t.size}, {values_next.size})")
    cont = np.asarray(P_t @ values_next).ravel()
    stop = rewards_t >= cont - TIE_RTOL * np.maximum(np.abs(cont), np.abs(rewards_t))
    return np.maximum(rewards_t, cont), stop


def solve(model: StoppingModel, chain: QuantizedChain) -> ValueTable:
    T = chain.horizon
    hidden = chain.hidden_grid.points
    rewards = [grid_rewards(model, hidden, g.points) for g in chain.grids]
    values = [None] * (T + 1)
    flags = [None] * (T + 1)
    values[T] = rewards[T].copy()
    flags[T] = np.ones(rewards[T].size, dtype=bool)
    for t in range(T - 1, -1, -1):
        values[t], flags[t] = backward_step(rewards[t], chain.transitions[t], values[t + 1])
    origin = float(values[0][0])
    summary = {"value_at_origin": origin, "N": chain.n_hidden, "M": chain.m_points,
               "seeds": {k: chain.provenance.get(k) for k in ("seed", "ensemble_seed")}}
    return ValueTable(values, flags, rewards, origin, summary)


def check_table(table: ValueTable, h_sup: float, chain: QuantizedChain | None = None) -> None:
    """Assert the DP invariants; raises AssertionError on violation."""
    T = table.horizon
    if not np.array_equal(table.values[T], table.rewards[T]):
        raise AssertionError("terminal layer differs from the reward")
    for t in range(T + 1):
        if np.any(table.values[t] < table.rewards[t]):
            raise AssertionError(f"values[{t}] below the reward")
        if np.any(np.abs(table.values[t]) > h_sup * (1 + 1e-12)):
            raise AssertionError(f"values[{t}] exceed h_sup")
        if chain is not None and t < T:
            cont = np.asarray(chain.transitions[t] @ table.values[t + 1]).ravel()
            if np.any(table.values[t] < cont):
                raise AssertionError(f"values[{t}] below the continuation value")


def export_table(table: ValueTable, path: str | Path) -> None:
    """Writes rows (t, index, value, stop) and a JSON summary next to them."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "index", "value", "stop"])
        for t, (vals, stop) in enumerate(zip(table.values, table.stop_flags)):
            for i, (v, s) in enumerate(zip(vals, stop)):
                w.writerow([t, i, repr(float(v)), int(s)])
    with open(path.with_suffix(".summary.json"), "w") as fh:
        json.dump(table.summary, fh, indent=2, sort_keys=True, default=str)

