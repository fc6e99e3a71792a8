"""Marginal quantization of the filter-observation chain.

Each time-t cross-section of simulated (gamma, y) states is quantized on its
own grid of at most M points in R^(N+n); transitions between consecutive
grids are estimated by counting projected pairs.  Transition matrices are
stored sparse (CSR): at most one nonzero per simulated path and time.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from qstop.filtering import PathEnsemble, bayes_update_batch, initial_index, likelihoods
from qstop.model import StoppingModel
from qstop.quantize import Schedule, WeightedGrid, _clvq_loop, _distortion_from_sq, _normalize, nearest

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChainQuantParams:
    n_iterations: int = 0
    """CLVQ draws per time step; 0 means one pass over the cross-section."""
    a: float = 1.0
    b: float = 100.0
    batch_size: int = 512
    lloyd_rounds: int = 2
    y_scale: float = 1.0
    heldout_transitions: bool = False


@dataclass
class QuantizedChain:
    grids: list[WeightedGrid]
    transitions: list[sp.csr_matrix]
    quant_errors: list[tuple[float, float]]
    hidden_grid: WeightedGrid
    m_points: int
    y_scale: float = 1.0
    flagged_rows: list[np.ndarray] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def n_hidden(self) -> int:
        return self.hidden_grid.size

    @property
    def horizon(self) -> int:
        return len(self.grids) - 1

    def scaled(self, states: np.ndarray) -> np.ndarray:
        if self.y_scale == 1.0:
            return states
        out = np.array(states, dtype=float)
        out[:, self.n_hidden:] *= self.y_scale
        return out

    def project(self, t: int, states: np.ndarray) -> np.ndarray:
        return nearest(self.scaled(self.grids[t].points), self.scaled(np.asarray(states, float)))

    def check(self, tol: float = 1e-12) -> None:
        """Assert the structural invariants."""
        for t, P in enumerate(self.transitions):
            if P.shape != (self.grids[t].size, self.grids[t + 1].size):
                raise AssertionError(f"transition {t} has shape {P.shape}")
            if P.nnz and P.data.min() < 0:
                raise AssertionError(f"transition {t} has negative entries")
            rows = np.asarray(P.sum(axis=1)).ravel()
            if np.max(np.abs(rows - 1.0)) > tol:
                raise AssertionError(f"transition {t} rows are not stochastic")
        for t, g in enumerate(self.grids):
            s = g.points[:, :self.n_hidden].sum(axis=1)
            if np.max(np.abs(s - 1.0)) > 1e-9 or g.points[:, :self.n_hidden].min() < -1e-12:
                raise AssertionError(f"grid {t} leaves the simplex")


def _simplex_rows(gam: np.ndarray) -> np.ndarray:
    gam = np.clip(gam, 0.0, None)
    return gam / gam.sum(axis=1, keepdims=True)


def _centroids(idx: np.ndarray, data: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    n = data.shape[0]
    onehot = sp.csr_matrix((np.ones(n), (idx, np.arange(n))), shape=(m, n))
    cnt = np.bincount(idx, minlength=m)
    sums = onehot @ data
    return sums, cnt


def quantize_cross_section(data: np.ndarray, m_points: int, params: ChainQuantParams,
                           rng: np.random.Generator, n_hidden: int) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Quantize one time slice; returns (grid points, assignment, log lines).

    Works in scaled coordinates (y multiplied by ``params.y_scale``) and
    returns points in scaled coordinates too.
    """
    lines: list[str] = []
    uniq, inverse = np.unique(data, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    if uniq.shape[0] <= m_points:
        if uniq.shape[0] < m_points:
            lines.append(f"only {uniq.shape[0]} distinct states for {m_points} points; grid is lossless")
        return uniq, inverse, lines
    pick = rng.choice(uniq.shape[0], size=m_points, replace=False)
    pts = np.array(uniq[np.sort(pick)])
    n = data.shape[0]
    n_iter = params.n_iterations or n
    order_src = rng.integers(0, n, size=n_iter)
    cursor = [0]

    def draw(k):
        s = cursor[0]
        cursor[0] += k
        return data[order_src[s:s + k]]

    _clvq_loop(pts, np.ones(m_points, bool), draw, n_iter, Schedule(params.a, params.b), params.batch_size)
    pts[:, :n_hidden] = _simplex_rows(pts[:, :n_hidden])
    idx = nearest(pts, data)
    for rnd in range(params.lloyd_rounds):
        sums, cnt = _centroids(idx, data, m_points)
        full = cnt > 0
        pts[full] = sums[full] / cnt[full, None]
        empty = np.nonzero(~full)[0]
        if empty.size:
            pts[empty] = data[rng.choice(n, size=empty.size, replace=False)]
            lines.append(f"lloyd round {rnd}: re-seeded {empty.size} empty cells")
        pts[:, :n_hidden] = _simplex_rows(pts[:, :n_hidden])
        idx = nearest(pts, data)
    pts, idx = _drop_duplicates(pts, data, idx)
    return pts, idx, lines


def _drop_duplicates(pts, data, idx):
    uniq, first = np.unique(pts, axis=0, return_index=True)
    if uniq.shape[0] == pts.shape[0]:
        return pts, idx
    keep = np.sort(first)
    pts = pts[keep]
    return pts, nearest(pts, data)


def _count_transitions(idx_t, idx_next, m_t, m_next, fallback):
    counts = sp.csr_matrix((np.ones(idx_t.size), (idx_t, idx_next)), shape=(m_t, m_next))
    counts.sum_duplicates()
    rows = np.asarray(counts.sum(axis=1)).ravel()
    empty = np.nonzero(rows == 0)[0]
    if empty.size:
        extra = sp.csr_matrix((np.ones(empty.size), (empty, fallback[empty])), shape=(m_t, m_next))
        counts = counts + extra
        rows = np.asarray(counts.sum(axis=1)).ravel()
    P = sp.diags(1.0 / rows) @ counts
    P = sp.csr_matrix(P)
    P.sort_indices()
    # exact row sums: spread the rounding residue onto each row's largest entry
    for i in range(m_t):
        lo, hi = P.indptr[i], P.indptr[i + 1]
        seg = P.data[lo:hi]
        seg[np.argmax(seg)] += 1.0 - seg.sum()
    return P, empty


def quantize_chain(ensemble: PathEnsemble, m_points: int, hidden_grid: WeightedGrid,
                   params: ChainQuantParams = ChainQuantParams(), seed: int = 0,
                   transition_ensemble: PathEnsemble | None = None) -> QuantizedChain:
    """Quantize every cross-section of ``ensemble`` with at most ``m_points`` points."""
    if ensemble.n_paths == 0:
        raise ValueError("path ensemble is empty")
    N = ensemble.n_hidden
    T = ensemble.horizon
    scale = params.y_scale
    streams = np.random.SeedSequence(seed).spawn(T + 1)
    grids, assign, errors, lines = [], [], [], []
    for t in range(T + 1):
        data = ensemble.states(t)
        if scale != 1.0:
            data[:, N:] *= scale
        rng = np.random.default_rng(streams[t])
        pts, idx, msgs = quantize_cross_section(data, m_points if t > 0 else 1, params, rng, N)
        if t == 0 and pts.shape[0] != 1:
            raise ValueError("initial cross-section is not deterministic")
        for m in msgs:
            if "lossless" in m and t > 0:
                warnings.warn(f"t={t}: {m}", RuntimeWarning, stacklevel=2)
        lines += [f"t={t}: {m}" for m in msgs]
        cnt = np.bincount(idx, minlength=pts.shape[0]).astype(float)
        diff = data - pts[idx]
        d2 = np.einsum("ij,ij->i", diff, diff)
        errors.append(_distortion_from_sq(d2))
        unscaled = np.array(pts)
        if scale != 1.0:
            unscaled[:, N:] /= scale
        grids.append(WeightedGrid(unscaled, _normalize(cnt), errors[-1][0], seed, errors[-1][1]))
        assign.append(idx)

    chain = QuantizedChain(grids, [], errors, hidden_grid, m_points, scale,
                           provenance={"n_paths": ensemble.n_paths, "ensemble_seed": ensemble.seed,
                                       "seed": seed, "params": asdict(params), "log": lines})
    if transition_ensemble is not None:
        assign = [chain.project(t, transition_ensemble.states(t)) for t in range(T + 1)]
        chain.provenance["transition_paths"] = transition_ensemble.n_paths
    for t in range(T):
        fallback = chain.project(t + 1, grids[t].points)
        P, empty = _count_transitions(assign[t], assign[t + 1], grids[t].size, grids[t + 1].size, fallback)
        if empty.size:
            log.info("t=%d: %d unvisited cells mapped to their projection", t, empty.size)
        chain.transitions.append(P)
        chain.flagged_rows.append(empty)
    return chain


def chain_quant_errors(chain: QuantizedChain, fresh: PathEnsemble) -> list[tuple[float, float]]:
    """Out-of-sample ||Psi_t - proj_t(Psi_t)||_2 with standard errors, t = 0..T."""
    out = []
    for t in range(chain.horizon + 1):
        data = chain.scaled(fresh.states(t))
        pts = chain.scaled(chain.grids[t].points)
        idx = nearest(pts, data)
        diff = data - pts[idx]
        out.append(_distortion_from_sq(np.einsum("ij,ij->i", diff, diff)))
    return out


def exact_chain(model: StoppingModel, hidden_grid: WeightedGrid, horizon: int | None = None,
                decimals: int = 12, max_states: int = 200_000) -> QuantizedChain:
    """Lossless chain for a model whose observation measure is purely atomic.

    Enumerates every reachable (gamma, y) with its exact probability and the
    exact one-step transition probabilities; states equal after rounding to
    ``decimals`` are merged.
    """
    nu = model.nu_measure
    if nu.continuous_parts:
        raise ValueError("exact enumeration needs a purely atomic observation measure")
    T = model.horizon if horizon is None else horizon
    N = hidden_grid.size
    obs, obs_w = nu.atom_points, nu.atom_weights
    g0 = np.zeros(N)
    g0[initial_index(model, hidden_grid)] = 1.0
    states = np.concatenate([g0, model.y0])[None, :]
    probs = np.array([1.0])
    grids, transitions = [], []
    for t in range(T + 1):
        grids.append(WeightedGrid(states, _normalize(probs), 0.0, None))
        if t == T:
            break
        gam, ys = states[:, :N], states[:, N:]
        S, K = gam.shape[0], obs.shape[0]
        rep = np.repeat(np.arange(S), K)
        vv = np.tile(obs, (S, 1))
        lik = likelihoods(model, hidden_grid, vv, gam[rep], ys[rep]) @ hidden_grid.weights
        joint = (lik * np.tile(obs_w, S)).reshape(S, K)
        pv = joint / joint.sum(axis=1, keepdims=True)
        ok = pv.reshape(-1) > 0
        new_g = np.zeros((rep.size, N))
        new_g[ok] = bayes_update_batch(model, hidden_grid, vv[ok], gam[rep[ok]], ys[rep[ok]])
        cand = np.concatenate([new_g, vv], axis=1)[ok]
        keys = np.round(cand, decimals)
        uniq_keys, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        inv = inv.reshape(-1)
        if uniq_keys.shape[0] > max_states:
            raise ValueError(f"more than {max_states} reachable states at t={t + 1}")
        nxt = cand[first]
        rows, vals = rep[ok], pv.reshape(-1)[ok]
        P = sp.csr_matrix((vals, (rows, inv)), shape=(S, nxt.shape[0]))
        P.sum_duplicates()
        transitions.append(P)
        probs = P.T @ probs
        states = nxt
    zero = [(0.0, 0.0)] * (T + 1)
    return QuantizedChain(grids, transitions, zero, hidden_grid, max(g.size for g in grids),
                          provenance={"exact": True})


def save_chain(chain: QuantizedChain, path: str | Path) -> None:
    arrays = {"hidden_points": chain.hidden_grid.points, "hidden_weights": chain.hidden_grid.weights,
              "errors": np.array(chain.quant_errors, dtype=float).reshape(-1, 2)}
    for t, g in enumerate(chain.grids):
        arrays[f"grid{t}_points"] = g.points
        arrays[f"grid{t}_weights"] = g.weights
    for t, P in enumerate(chain.transitions):
        arrays[f"P{t}_data"], arrays[f"P{t}_indices"], arrays[f"P{t}_indptr"] = P.data, P.indices, P.indptr
        arrays[f"P{t}_shape"] = np.array(P.shape)
        arrays[f"P{t}_flagged"] = chain.flagged_rows[t] if t < len(chain.flagged_rows) else np.array([], int)
    meta = {"m_points": chain.m_points, "y_scale": chain.y_scale, "horizon": chain.horizon,
            "hidden_distortion": chain.hidden_grid.distortion_l2,
            "hidden_distortion_se": chain.hidden_grid.distortion_se,
            "hidden_seed": chain.hidden_grid.seed, "hidden_pinned": chain.hidden_grid.n_pinned,
            "provenance": chain.provenance}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True, default=str))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_chain(path: str | Path) -> QuantizedChain:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        T = meta["horizon"]
        hidden = WeightedGrid(z["hidden_points"], z["hidden_weights"], meta["hidden_distortion"],
                              meta["hidden_seed"], meta["hidden_distortion_se"], meta["hidden_pinned"])
        errors = [tuple(map(float, row)) for row in z["errors"]]
        grids = [WeightedGrid(z[f"grid{t}_points"], z[f"grid{t}_weights"], errors[t][0], None, errors[t][1])
                 for t in range(T + 1)]
        trans, flagged = [], []
        for t in range(T):
            shape = tuple(int(s) for s in z[f"P{t}_shape"])
            trans.append(sp.csr_matrix((z[f"P{t}_data"], z[f"P{t}_indices"], z[f"P{t}_indptr"]), shape=shape))
            flagged.append(z[f"P{t}_flagged"])
    return QuantizedChain(grids, trans, errors, hidden, meta["m_points"], meta["y_scale"], flagged,
                          meta["provenance"])
