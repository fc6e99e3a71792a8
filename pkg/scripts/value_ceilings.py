"""Upper bounds on the water-tank value that do not depend on the quantization pipeline.

full information: the level X_t is observed exactly; backward DP on a fine
level grid with the exact exponential-inflow transition (mass beyond K goes to
the full atom).  clairvoyant: E[max_t H(X_t)], the whole path known in advance.
Any observation-adapted stopping rule is bounded by both.

    python3 scripts/value_ceilings.py
"""

from __future__ import annotations

import argparse

import numpy as np

from qstop.watertank import WaterTankParams, simulate_truth


def full_information_value(p: WaterTankParams, n_grid: int = 4001) -> float:
    K = p.capacity
    x = np.linspace(0.0, K, n_grid)
    h = K - np.abs(x - p.target)
    # P(next level in cell j | level x_i): exponential increments; the last cell
    # extends to infinity and so carries the saturation mass
    edges = np.concatenate([[0.0], (x[1:] + x[:-1]) / 2, [np.inf]])
    inc_lo = np.clip(edges[None, :-1] - x[:, None], 0.0, None)
    inc_hi = np.clip(edges[None, 1:] - x[:, None], 0.0, None)
    P = p.inflow_cdf(inc_hi) - p.inflow_cdf(inc_lo)
    v = h.copy()
    for _ in range(p.horizon):
        v = np.maximum(h, P @ v)
    return float(v[0])


def clairvoyant_value(p: WaterTankParams, n_paths: int, seed: int) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    best = np.empty(n_paths)
    for k in range(n_paths):
        run = simulate_truth(p, p.horizon, rng)
        best[k] = np.max(p.capacity - np.abs(run[:, 0] - p.target))
    return float(best.mean()), float(best.std(ddof=1) / np.sqrt(n_paths))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    p = WaterTankParams()
    print(f"full-information value from the empty tank: {full_information_value(p):.4f}")
    mean, se = clairvoyant_value(p, args.paths, args.seed)
    print(f"clairvoyant E[max_t H(X_t)]: {mean:.4f} +- {se:.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
