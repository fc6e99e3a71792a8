"""Independent upper bounds on the water-tank value (scripts/value_ceilings.py)."""

import importlib.util
from pathlib import Path

import numpy as np
import pytest

from qstop.watertank import WaterTankParams

_spec = importlib.util.spec_from_file_location(
    "value_ceilings", Path(__file__).resolve().parents[1] / "scripts" / "value_ceilings.py")
ceilings = importlib.util.module_from_spec(_spec)
_spec.loader.exec_module(ceilings)

P = WaterTankParams()


def threshold_policy_value(c: float, n: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = np.minimum(np.cumsum(rng.exponential(1 / P.inflow_rate, size=(n, P.horizon)), axis=1), P.capacity)
    x = np.concatenate([np.zeros((n, 1)), x], axis=1)
    h = P.capacity - np.abs(x - P.target)
    hit = x >= c
    t = np.where(hit.any(axis=1), hit.argmax(axis=1), P.horizon)
    return float(h[np.arange(n), t].mean())


def test_full_information_value_is_grid_converged():
    a = ceilings.full_information_value(P, 1001)
    b = ceilings.full_information_value(P, 2001)
    assert abs(a - b) < 1e-5
    assert b == pytest.approx(0.8698, abs=5e-4)


def test_threshold_policies_do_not_beat_full_information():
    v = ceilings.full_information_value(P, 2001)
    n = 100_000
    best = max(threshold_policy_value(c, n, 1) for c in (0.3, 0.35, 0.37, 0.4, 0.45))
    assert best <= v + 4 * 0.5 / np.sqrt(n)
    assert best >= v - 0.01


def test_clairvoyant_dominates_full_information():
    mean, se = ceilings.clairvoyant_value(P, 20_000, 3)
    assert mean == pytest.approx(0.9007, abs=4 * se + 1e-3)
    assert mean > ceilings.full_information_value(P, 1001)
