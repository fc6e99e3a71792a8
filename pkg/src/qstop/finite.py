"""Finite hidden Markov models with brute-force reference solutions.

A finite model is given by a joint kernel K[x, y, u, v] = P(X'=u, Y'=v | X=x, Y=y)
on index sets.  Hidden states and observations are embedded as the points
0, 1, 2, ... of the real line, and both reference measures are uniform over
those points, so r = K * n_hidden * n_obs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from qstop.model import MixedMeasure, StoppingModel
from qstop.quantize import WeightedGrid


class EnumerationTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class FiniteHMM:
    kernel: np.ndarray
    reward: np.ndarray
    x0: int
    y0: int
    horizon: int
    name: str = "finite"

    def __post_init__(self):
        K = np.asarray(self.kernel, dtype=float)
        nx, ny = K.shape[0], K.shape[1]
        if K.shape != (nx, ny, nx, ny):
            raise ValueError("kernel must have shape (nx, ny, nx, ny)")
        if np.any(K < 0) or np.max(np.abs(K.sum(axis=(2, 3)) - 1)) > 1e-12:
            raise ValueError("kernel rows must be probability tables")
        if np.asarray(self.reward).shape != (nx, ny):
            raise ValueError("reward must have shape (nx, ny)")
        object.__setattr__(self, "kernel", K)
        object.__setattr__(self, "reward", np.asarray(self.reward, dtype=float))

    @property
    def n_hidden(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_obs(self) -> int:
        return self.kernel.shape[1]

    def obs_probs(self) -> np.ndarray:
        """P(Y'=v | x, y) with shape (nx, ny, ny)."""
        return self.kernel.sum(axis=2)

    def to_model(self) -> StoppingModel:
        nx, ny = self.n_hidden, self.n_obs
        r_table = self.kernel * nx * ny

        def index(a, n):
            return np.clip(np.rint(a[..., 0]).astype(int), 0, n - 1)

        def density(u, v, x, y):
            return r_table[index(x, nx), index(y, ny), index(u, nx), index(v, ny)]

        def perf(x, y):
            return self.reward[index(x, nx), index(y, ny)]

        lam = MixedMeasure(1, atoms=tuple(((float(i),), 1.0 / nx) for i in range(nx)))
        nu = MixedMeasure(1, atoms=tuple(((float(j),), 1.0 / ny) for j in range(ny)))
        r_sup = float(r_table.max())
        marg = self.obs_probs() * ny      # r(lambda, v, x, y)
        low = float(marg.min())
        delta = 1.0 / low if low > 0 else 1e300
        h = self.reward
        h_lip = float(np.max(h) - np.min(h)) or 1.0
        return StoppingModel(
            dim_x=1, dim_y=1, horizon=self.horizon, density_r=density, lambda_measure=lam, nu_measure=nu,
            performance_h=perf, r_sup=r_sup, r_lip=r_sup, delta=delta, h_sup=float(np.max(np.abs(h))),
            h_lip=h_lip, initial_state=(np.array([float(self.x0)]), np.array([float(self.y0)])),
            name=self.name, metadata={"finite": self},
        )

    def hidden_grid(self) -> WeightedGrid:
        """Lossless grid: every hidden point with its reference weight."""
        nx = self.n_hidden
        return WeightedGrid(np.arange(nx, dtype=float)[:, None], np.full(nx, 1.0 / nx), 0.0, None)


def exact_filter_step(hmm: FiniteHMM, gamma: np.ndarray, y: int, v: int) -> np.ndarray:
    """Posterior of X' given the prior gamma of X, the last observation y and the new one v."""
    w = gamma @ hmm.kernel[:, y, :, v]
    return w / w.sum()


def count_rules(n_obs: int, depth_left: int) -> int:
    """Number of observation-adapted stopping rules with ``depth_left`` steps to go."""
    if depth_left == 0:
        return 1
    return 1 + count_rules(n_obs, depth_left - 1) ** n_obs


def _rules(n_obs: int, depth_left: int):
    """Yield each stopping rule as a frozenset of relative histories where it stops."""
    yield frozenset([()])
    if depth_left == 0:
        return
    for combo in itertools.product(list(_rules(n_obs, depth_left - 1)), repeat=n_obs):
        yield frozenset((v,) + h for v, sub in enumerate(combo) for h in sub)


def history_rewards(hmm: FiniteHMM) -> dict[tuple, float]:
    """E[H(X_t, Y_t) ; Y_1..Y_t = h] for every observation history h, by path enumeration."""
    nx, ny, T = hmm.n_hidden, hmm.n_obs, hmm.horizon
    out = {}
    for t in range(T + 1):
        for h in itertools.product(range(ny), repeat=t):
            total = 0.0
            for xs in itertools.product(range(nx), repeat=t):
                p, xp, yp = 1.0, hmm.x0, hmm.y0
                for u, v in zip(xs, h):
                    p *= hmm.kernel[xp, yp, u, v]
                    xp, yp = u, v
                total += p * hmm.reward[xp, yp]
            out[h] = total
    return out


def oracle_value_finite(hmm: FiniteHMM, max_rules: int = 1_000_000) -> float:
    """Best expected reward over all stopping times adapted to the observations.

    Every stopping rule is enumerated explicitly and scored with joint
    probabilities from hidden-path enumeration; no dynamic programming.
    """
    if hmm.horizon > 5 or hmm.n_obs > 4:
        raise EnumerationTooLarge("horizon must be <= 5 and alphabet <= 4")
    n = count_rules(hmm.n_obs, hmm.horizon)
    if n > max_rules:
        raise EnumerationTooLarge(f"{n} stopping rules exceed the cap of {max_rules}")
    score = history_rewards(hmm)
    return max(sum(score[h] for h in rule) for rule in _rules(hmm.n_obs, hmm.horizon))


def _random_hmm(seed: int, nx: int, ny: int, horizon: int, name: str) -> FiniteHMM:
    rng = np.random.default_rng(seed)
    kernel = rng.dirichlet(np.ones(nx * ny), size=(nx, ny)).reshape(nx, ny, nx, ny)
    reward = rng.uniform(0.0, 1.0, size=(nx, ny))
    return FiniteHMM(kernel, reward, x0=0, y0=0, horizon=horizon, name=name)


def bundled_specs() -> list[FiniteHMM]:
    """Small reference models used to check the solver against brute force."""
    return [
        _random_hmm(11, 2, 2, 3, "h2-o2-T3"),
        _random_hmm(12, 3, 2, 4, "h3-o2-T4"),
        _random_hmm(13, 3, 3, 3, "h3-o3-T3"),
        _random_hmm(14, 2, 3, 2, "h2-o3-T2"),
    ]
