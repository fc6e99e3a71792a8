"""Filter-observation chain on the simplex over a fixed hidden grid.

Given a quantized reference grid lambda_N = sum_i w_i delta_{x_i}, the
approximate Bayes operator maps (v, gamma, y) to

    gamma'_i  proportional to  w_i * sum_j gamma_j r(x_i, v, x_j, y),

and the chain moves by drawing v from the observation marginal of R_N and
then updating gamma.  Everything here is batched over paths: ``gamma`` has
shape (P, N), ``v`` and ``y`` have shape (P, n).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qstop.model import StoppingModel
from qstop.quantize import WeightedGrid

DEGENERATE_THRESHOLD = 1e-300
_BLOCK_ELEMS = 4_000_000


class DegenerateObservationError(RuntimeError):
    """The Bayes normalizer vanished: the lower-bound assumption fails here."""


class ObservationSamplingError(RuntimeError):
    """Rejection sampling exhausted its proposal budget."""


class MissingInitialPointError(ValueError):
    """The hidden grid does not contain the initial hidden state."""


@dataclass(frozen=True)
class SimplexState:
    gamma: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        g = np.array(self.gamma, dtype=float).reshape(-1)
        if np.any(g < 0) or abs(g.sum() - 1.0) > 1e-12:
            raise ValueError("gamma must be a probability vector")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))


def transition_matrix(model: StoppingModel, grid: WeightedGrid, y: np.ndarray | None = None) -> np.ndarray:
    """A[i, j] = transition(x_i, x_j, y) for a factorized model."""
    fac = model.factorization
    x = grid.points
    yy = model.y0 if y is None else np.asarray(y, float)
    return np.asarray(fac.transition(x[:, None, :], x[None, :, :], yy[None, None, :]), dtype=float)


def likelihoods(model: StoppingModel, grid: WeightedGrid, v: np.ndarray, gamma: np.ndarray,
                y: np.ndarray, trans: np.ndarray | None = None) -> np.ndarray:
    """L[p, i] = sum_j gamma[p, j] r(x_i, v_p, x_j, y_p)."""
    x = grid.points
    n_pts = x.shape[0]
    v = np.asarray(v, float).reshape(-1, model.dim_y)
    y = np.asarray(y, float).reshape(-1, model.dim_y)
    gamma = np.asarray(gamma, float).reshape(-1, n_pts)
    P = gamma.shape[0]
    fac = model.factorization
    if fac is not None and not fac.transition_uses_y:
        A = transition_matrix(model, grid) if trans is None else trans
        emis = np.asarray(fac.emission(v[:, None, :], x[None, :, :]), dtype=float)
        return emis * (gamma @ A.T)
    out = np.empty((P, n_pts))
    step = max(1, _BLOCK_ELEMS // (n_pts * n_pts))
    for s in range(0, P, step):
        sl = slice(s, s + step)
        if fac is not None:
            A = np.asarray(fac.transition(x[None, :, None, :], x[None, None, :, :], y[sl, None, None, :]))
            emis = np.asarray(fac.emission(v[sl, None, :], x[None, :, :]))
            out[sl] = emis * np.einsum("pij,pj->pi", A, gamma[sl])
        else:
            r = model.density(x[None, :, None, :], v[sl, None, None, :], x[None, None, :, :],
                              y[sl, None, None, :])
            out[sl] = np.einsum("pij,pj->pi", r, gamma[sl])
    return out


def bayes_update_batch(model: StoppingModel, grid: WeightedGrid, v, gamma, y,
                       trans: np.ndarray | None = None) -> np.ndarray:
    lik = likelihoods(model, grid, v, gamma, y, trans) * grid.weights[None, :]
    norm = lik.sum(axis=1)
    bad = ~(norm > DEGENERATE_THRESHOLD)
    if np.any(bad):
        p = int(np.nonzero(bad)[0][0])
        raise DegenerateObservationError(
            f"Bayes normalizer r(lambda_N, v, gamma, y) = {norm[p]:.3e} for path {p}")
    out = lik / norm[:, None]
    # second pass keeps the simplex sum within a few ulps
    out /= out.sum(axis=1, keepdims=True)
    return out


def bayes_update(model: StoppingModel, lambda_grid: WeightedGrid, v, state: SimplexState) -> np.ndarray:
    """One approximate Bayes step Phi_N(v, gamma, y) as a simplex vector."""
    if state.gamma.size != lambda_grid.size:
        raise ValueError("state and grid sizes differ")
    return bayes_update_batch(model, lambda_grid, np.atleast_1d(v)[None, :], state.gamma[None, :],
                              state.y[None, :])[0]


def observation_normalizer(model, grid, gamma, y, trans=None) -> np.ndarray:
    """r(lambda_N, nu, gamma, y) for a factorized model (exact, no sampling)."""
    A = transition_matrix(model, grid) if trans is None else trans
    return (gamma @ A.T) @ grid.weights


def _categorical_rows(prob: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(prob, axis=1)
    u = rng.random(prob.shape[0]) * cum[:, -1]
    idx = (cum < u[:, None]).sum(axis=1)
    return np.minimum(idx, prob.shape[1] - 1)


def _sample_composition(model, grid, gamma, y, rng, trans=None):
    fac = model.factorization
    x = grid.points
    if fac.transition_uses_y:
        A = np.asarray(fac.transition(x[None, :, None, :], x[None, None, :, :], y[:, None, None, :]))
        w = np.einsum("pij,pj->pi", A, gamma) * grid.weights
    else:
        A = transition_matrix(model, grid) if trans is None else trans
        w = (gamma @ A.T) * grid.weights
    norm = w.sum(axis=1)
    if np.any(~(norm > DEGENERATE_THRESHOLD)):
        raise DegenerateObservationError("observation normalizer r(lambda_N, nu, gamma, y) vanished")
    idx = _categorical_rows(w, rng)
    return np.asarray(fac.sample_emission(x[idx], rng), dtype=float).reshape(-1, model.dim_y)


def _sample_rejection(model, grid, gamma, y, rng, max_proposals, trans=None, batch=64):
    P = gamma.shape[0]
    out = np.empty((P, model.dim_y))
    pending = np.arange(P)
    used = 0
    while pending.size:
        if used >= max_proposals:
            raise ObservationSamplingError(
                f"{pending.size} paths had no accepted observation after {used} proposals")
        k = min(batch, max_proposals - used)
        rep = np.repeat(pending, k)
        prop = model.nu_measure.sample(rng, rep.size)
        lik = likelihoods(model, grid, prop, gamma[rep], y[rep], trans) @ grid.weights
        acc = rng.random(rep.size) * model.r_sup < lik
        acc = acc.reshape(pending.size, k)
        hit = acc.any(axis=1)
        first = np.argmax(acc, axis=1)
        chosen = prop.reshape(pending.size, k, model.dim_y)[np.arange(pending.size), first]
        out[pending[hit]] = chosen[hit]
        pending = pending[~hit]
        used += k
    return out


def sample_observations(model: StoppingModel, grid: WeightedGrid, gamma, y, rng: np.random.Generator,
                        method: str = "auto", max_proposals: int = 1_000_000, trans=None) -> np.ndarray:
    """Draw one observation per path from the v-marginal of R_N(. | gamma, y).

    ``method="rejection"`` proposes v from nu and accepts with probability
    r(lambda_N, v, gamma, y) / r_sup.  ``method="composition"`` (factorized
    models only) draws the next hidden grid index and then its emission;
    both are exact.  ``"auto"`` picks composition when available.
    """
    gamma = np.asarray(gamma, float).reshape(-1, grid.size)
    y = np.asarray(y, float).reshape(-1, model.dim_y)
    if method == "auto":
        method = "composition" if model.factorization is not None else "rejection"
    if method == "composition":
        if model.factorization is None:
            raise ValueError("composition sampling needs a factorized model")
        return _sample_composition(model, grid, gamma, y, rng, trans)
    if method == "rejection":
        return _sample_rejection(model, grid, gamma, y, rng, max_proposals, trans)
    raise ValueError(f"unknown sampling method {method!r}")


def sample_observation(model, lambda_grid, state: SimplexState, rng, method="auto",
                       max_proposals: int = 1_000_000) -> np.ndarray:
    return sample_observations(model, lambda_grid, state.gamma[None, :], state.y[None, :], rng,
                               method, max_proposals)[0]


def step_batch(model, grid, gamma, y, rng, method="auto", trans=None):
    v = sample_observations(model, grid, gamma, y, rng, method, trans=trans)
    return bayes_update_batch(model, grid, v, gamma, y, trans), v


def step_chain(model: StoppingModel, lambda_grid: WeightedGrid, state: SimplexState,
               rng: np.random.Generator, method: str = "auto") -> SimplexState:
    g, v = step_batch(model, lambda_grid, state.gamma[None, :], state.y[None, :], rng, method)
    return SimplexState(g[0], v[0])


@dataclass(frozen=True)
class PathEnsemble:
    """Trajectories of the chain: gamma (P, T+1, N) and y (P, T+1, n)."""

    gamma: np.ndarray
    y: np.ndarray
    seed: int | None = None
    method: str = ""

    @property
    def n_paths(self) -> int:
        return self.gamma.shape[0]

    @property
    def horizon(self) -> int:
        return self.gamma.shape[1] - 1

    @property
    def n_hidden(self) -> int:
        return self.gamma.shape[2]

    def states(self, t: int) -> np.ndarray:
        """Cross-section at time t as rows (gamma, y) in R^(N+n)."""
        return np.concatenate([self.gamma[:, t, :], self.y[:, t, :]], axis=1)


def initial_index(model: StoppingModel, grid: WeightedGrid) -> int:
    hit = np.nonzero(np.all(grid.points == model.x0[None, :], axis=1))[0]
    if hit.size == 0:
        raise MissingInitialPointError("initial hidden point is not a grid point; pin it when quantizing")
    return int(hit[0])


def simulate_paths(model: StoppingModel, lambda_grid: WeightedGrid, n_paths: int, seed: int,
                   horizon: int | None = None, method: str = "auto", block_size: int = 4096,
                   jobs: int = 1) -> PathEnsemble:
    """Simulate independent paths started from (one-hot at x0, y0).

    Path block b draws from its own stream seeded by (seed, b), so the
    ensemble does not depend on ``jobs``.
    """
    T = model.horizon if horizon is None else horizon
    N, n = lambda_grid.size, model.dim_y
    i0 = initial_index(model, lambda_grid)
    gamma = np.zeros((n_paths, T + 1, N))
    ys = np.empty((n_paths, T + 1, n))
    gamma[:, 0, i0] = 1.0
    ys[:, 0, :] = model.y0
    resolved = method
    if method == "auto":
        resolved = "composition" if model.factorization is not None else "rejection"
    trans = None
    if model.factorization is not None and not model.factorization.transition_uses_y:
        trans = transition_matrix(model, lambda_grid)

    def run_block(b):
        sl = slice(b * block_size, min((b + 1) * block_size, n_paths))
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        g, y = gamma[sl, 0, :], ys[sl, 0, :]
        for t in range(T):
            g, y = step_batch(model, lambda_grid, g, y, rng, resolved, trans)
            gamma[sl, t + 1, :] = g
            ys[sl, t + 1, :] = y

    n_blocks = -(-n_paths // block_size) if n_paths else 0
    if jobs > 1 and n_blocks > 1:
        with ThreadPoolExecutor(jobs) as pool:
            list(pool.map(run_block, range(n_blocks)))
    else:
        for b in range(n_blocks):
            run_block(b)
    return PathEnsemble(gamma, ys, seed, resolved)


def save_ensemble(ens: PathEnsemble, path: str | Path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, gamma=ens.gamma, y=ens.y, seed=np.array(-1 if ens.seed is None else ens.seed),
                 method=np.array(ens.method))


def load_ensemble(path: str | Path) -> PathEnsemble:
    with np.load(path) as z:
        seed = int(z["seed"])
        return PathEnsemble(z["gamma"], z["y"], None if seed < 0 else seed, str(z["method"]))
