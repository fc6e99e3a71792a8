"""Optimal L2 vector quantization: CLVQ training, Lloyd refinement, projection.

All randomized routines take an explicit integer seed.  Grids are immutable
once built.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from qstop.model import MixedMeasure

log = logging.getLogger(__name__)

Sampler = Callable[[np.random.Generator, int], np.ndarray]

# keeps one distance block near 160 MB of float64
_BLOCK_ELEMS = 20_000_000


@dataclass(frozen=True)
class WeightedGrid:
    points: np.ndarray
    weights: np.ndarray
    distortion_l2: float = 0.0
    seed: int | None = None
    distortion_se: float = 0.0
    n_pinned: int = 0
    log: tuple[str, ...] = ()

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.array(self.weights, dtype=float, copy=True).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise ValueError("points and weights have different lengths")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"grid weights must be a probability vector (sum={w.sum()!r})")
        if self.distortion_l2 < 0:
            raise ValueError("distortion must be nonnegative")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.size


def _normalize(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    s = w.sum()
    w = w / s
    # push the rounding residue onto the largest entry
    w[np.argmax(w)] += 1.0 - w.sum()
    return w


_TINY = 1e-150


def _flush_tiny(a: np.ndarray) -> np.ndarray:
    small = np.abs(a) < _TINY
    if not small.any():
        return a
    return np.where(small, 0.0, a)


def nearest(points: np.ndarray, data: np.ndarray) -> np.ndarray:
    """Index of the closest grid point for every row of ``data``.

    Uses the expanded form |z|^2 - 2 z.x + |x|^2 in blocks; ties go to the
    lowest index.  Magnitudes below 1e-150 are zeroed first: subnormal
    entries (common in concentrated filters) slow BLAS down several-fold and
    cannot change a squared distance at double precision.
    """
    points = _flush_tiny(np.asarray(points, dtype=float))
    data = np.asarray(data, dtype=float)
    n, m = data.shape[0], points.shape[0]
    out = np.empty(n, dtype=np.int64)
    if m == 1:
        out[:] = 0
        return out
    sq = np.einsum("ij,ij->i", points, points)
    step = max(1, _BLOCK_ELEMS // m)
    for s in range(0, n, step):
        block = _flush_tiny(data[s:s + step])
        d = block @ points.T
        d *= -2.0
        d += sq
        out[s:s + step] = np.argmin(d, axis=1)
    return out


def sq_distances_to_nearest(points: np.ndarray, data: np.ndarray, idx: np.ndarray | None = None) -> np.ndarray:
    if idx is None:
        idx = nearest(points, data)
    diff = data - points[idx]
    return np.einsum("ij,ij->i", diff, diff)


def project(grid: WeightedGrid, z) -> int:
    """Closest-neighbor projection of a single point; lowest index wins ties."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (grid.dim,):
        raise ValueError(f"point has dimension {z.size}, grid has {grid.dim}")
    d = np.sum((grid.points - z) ** 2, axis=1)
    return int(np.argmin(d))


def estimate_distortion(grid: WeightedGrid, sampler: Sampler, n_samples: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo ||Z - p(Z)||_2 with its delta-method standard error."""
    if n_samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    z = np.asarray(sampler(rng, n_samples), dtype=float).reshape(n_samples, grid.dim)
    return _distortion_from_sq(sq_distances_to_nearest(grid.points, z))


def _distortion_from_sq(d2: np.ndarray) -> tuple[float, float]:
    m = float(d2.mean())
    if m <= 0.0:
        return 0.0, 0.0
    se_m = float(d2.std(ddof=1)) / np.sqrt(d2.size)
    return float(np.sqrt(m)), se_m / (2.0 * np.sqrt(m))


def _distinct_draws(sampler: Sampler, rng, n: int, dim: int, tries: int = 20) -> np.ndarray:
    pts = np.empty((0, dim))
    for _ in range(tries):
        need = n - pts.shape[0]
        if need <= 0:
            break
        new = np.asarray(sampler(rng, max(need, 1)), dtype=float).reshape(-1, dim)
        pts = np.unique(np.vstack([pts, new]), axis=0)
    if pts.shape[0] > n:
        pts = pts[rng.permutation(pts.shape[0])[:n]]
    return pts


@dataclass(frozen=True)
class Schedule:
    """Step size a / (b + t), t counting processed samples."""

    a: float = 1.0
    b: float = 100.0

    def __call__(self, t):
        return self.a / (self.b + t)


def _clvq_loop(points: np.ndarray, movable: np.ndarray, draw: Callable[[int], np.ndarray],
               n_iterations: int, schedule: Schedule, batch_size: int) -> np.ndarray:
    """Competitive learning on ``points`` in place; returns per-point win counts.

    With ``batch_size == 1`` this is the classical sequential recursion.  For
    larger batches the winners are computed against the grid at the start of
    the batch and each winner moves by the compound step of its k wins,
    1 - (1 - g)^k, toward the mean of its samples.
    """
    wins = np.zeros(points.shape[0], dtype=np.int64)
    t = 0
    while t < n_iterations:
        bs = min(batch_size, n_iterations - t)
        z = draw(bs)
        g = min(schedule(t), 1.0)
        if bs == 1:
            i = int(np.argmin(np.sum((points - z[0]) ** 2, axis=1)))
            wins[i] += 1
            if movable[i]:
                points[i] += g * (z[0] - points[i])
        else:
            idx = nearest(points, z)
            cnt = np.bincount(idx, minlength=points.shape[0])
            wins += cnt
            hit = np.nonzero((cnt > 0) & movable)[0]
            if hit.size:
                sums = np.zeros((points.shape[0], points.shape[1]))
                np.add.at(sums, idx, z)
                means = sums[hit] / cnt[hit, None]
                step = 1.0 - (1.0 - g) ** cnt[hit]
                points[hit] += step[:, None] * (means - points[hit])
        t += bs
    return wins


def _merge_duplicates(points: np.ndarray, n_pinned: int) -> np.ndarray:
    _, first = np.unique(points, axis=0, return_index=True)
    keep = np.sort(first)
    # pinned points are always kept in front
    keep = np.union1d(np.arange(min(n_pinned, points.shape[0])), keep)
    return points[np.sort(keep)]


def clvq_train(sampler: Sampler, n_points: int, schedule: Schedule | tuple[float, float] = Schedule(),
               n_iterations: int = 100_000, seed: int = 0, pin: np.ndarray | None = None,
               batch_size: int = 1, n_count: int = 200_000, n_holdout: int = 200_000,
               dim: int | None = None) -> WeightedGrid:
    """Train an ``n_points`` quantizer of the law produced by ``sampler``.

    Initial points are distinct draws from the sampler.  Rows of ``pin`` are
    kept fixed (they still compete for samples) and occupy the first slots
    of the grid.  Weights come from a frozen-grid counting pass and the
    distortion from an independent held-out pass.
    """
    if n_points < 1:
        raise ValueError("n_points must be at least 1")
    if not isinstance(schedule, Schedule):
        schedule = Schedule(*schedule)
    rng = np.random.default_rng(seed)
    probe = np.asarray(sampler(rng, 1), dtype=float)
    d = probe.reshape(1, -1).shape[1] if dim is None else dim
    pinned = np.empty((0, d)) if pin is None else np.asarray(pin, dtype=float).reshape(-1, d)
    n_free = max(n_points - pinned.shape[0], 0)
    free = _distinct_draws(sampler, rng, n_free, d) if n_free else np.empty((0, d))
    if free.shape[0] < n_free:
        warnings.warn(f"sampler produced only {free.shape[0]} distinct points for {n_free} slots",
                      RuntimeWarning, stacklevel=2)
    points = np.vstack([pinned, free])
    movable = np.r_[np.zeros(pinned.shape[0], bool), np.ones(free.shape[0], bool)]

    def draw(k):
        return np.asarray(sampler(rng, k), dtype=float).reshape(k, d)

    wins = _clvq_loop(points, movable, draw, n_iterations, schedule, batch_size)
    idle = int(np.sum(wins[movable] == 0))
    if idle:
        warnings.warn(f"{idle} grid points never won a sample; increase n_iterations",
                      RuntimeWarning, stacklevel=2)
    points = _merge_duplicates(points, pinned.shape[0])
    return _finalize(points, sampler, rng, n_count, n_holdout, seed, pinned.shape[0])


def _finalize(points, sampler, rng, n_count, n_holdout, seed, n_pinned, log_lines=()) -> WeightedGrid:
    d = points.shape[1]
    z = np.asarray(sampler(rng, n_count), dtype=float).reshape(n_count, d)
    cnt = np.bincount(nearest(points, z), minlength=points.shape[0]).astype(float)
    zh = np.asarray(sampler(rng, n_holdout), dtype=float).reshape(n_holdout, d)
    dist, se = _distortion_from_sq(sq_distances_to_nearest(points, zh))
    return WeightedGrid(points, _normalize(cnt), dist, seed, se, n_pinned, tuple(log_lines))


def lloyd_refine(grid: WeightedGrid, sampler: Sampler, n_rounds: int, samples_per_round: int,
                 seed: int, n_count: int | None = None) -> WeightedGrid:
    """Monte-Carlo Lloyd iterations: move each free point to its cell centroid.

    The first ``grid.n_pinned`` points stay fixed.  An empty cell is re-seeded
    with a fresh draw and the event is recorded in the grid log.
    """
    if n_rounds <= 0:
        return grid
    rng = np.random.default_rng(seed)
    pts = np.array(grid.points)
    d = grid.dim
    movable = np.arange(pts.shape[0]) >= grid.n_pinned
    lines = list(grid.log)
    for rnd in range(n_rounds):
        z = np.asarray(sampler(rng, samples_per_round), dtype=float).reshape(samples_per_round, d)
        idx = nearest(pts, z)
        cnt = np.bincount(idx, minlength=pts.shape[0])
        sums = np.zeros_like(pts)
        np.add.at(sums, idx, z)
        full = movable & (cnt > 0)
        pts[full] = sums[full] / cnt[full, None]
        empty = np.nonzero(movable & (cnt == 0))[0]
        if empty.size:
            pts[empty] = np.asarray(sampler(rng, empty.size), dtype=float).reshape(empty.size, d)
            lines.append(f"round {rnd}: re-seeded {empty.size} empty cells")
            log.debug(lines[-1])
    pts = _merge_duplicates(pts, grid.n_pinned)
    n_count = samples_per_round if n_count is None else n_count
    return _finalize(pts, sampler, rng, n_count, n_count, grid.seed, grid.n_pinned, lines)


@dataclass(frozen=True)
class ClvqParams:
    n_iterations: int = 100_000
    a: float = 1.0
    b: float = 100.0
    batch_size: int = 1
    lloyd_rounds: int = 50
    samples_per_round: int = 100_000
    n_count: int = 400_000

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.a, self.b)


def quantize_measure(measure: MixedMeasure, n_points: int, seed: int,
                     params: ClvqParams = ClvqParams(), pin: np.ndarray | None = None) -> WeightedGrid:
    """Quantize a mixed measure, keeping its heavy atoms exact.

    Atoms heavier than 1/(2 n_points) and the optional ``pin`` point become
    fixed grid points.  Free points are trained on the remaining mass.
    Weights and distortion use the exact split: pinned atom mass sits at
    zero distance and the residual mass is counted by Monte Carlo.
    """
    d = measure.dim
    atoms, aw = measure.atom_points, measure.atom_weights
    heavy = np.nonzero(aw > 1.0 / (2 * n_points))[0]
    heavy = heavy[np.argsort(-aw[heavy], kind="stable")][:n_points]
    pinned = [atoms[k] for k in heavy]
    pinned_w = [aw[k] for k in heavy]
    if pin is not None:
        pin = np.atleast_1d(np.asarray(pin, dtype=float))
        match = [k for k, p in enumerate(pinned) if np.array_equal(p, pin)]
        if match:
            k = match[0]
            pinned.insert(0, pinned.pop(k))
            pinned_w.insert(0, pinned_w.pop(k))
        else:
            pinned.insert(0, pin)
            pinned_w.insert(0, 0.0)
            if len(pinned) > n_points:
                pinned, pinned_w = pinned[:n_points], pinned_w[:n_points]
    pinned_arr = np.array(pinned).reshape(-1, d)
    pinned_w = np.array(pinned_w, dtype=float)
    light = [k for k in range(len(aw)) if k not in set(heavy.tolist())]
    resid_mass = 1.0 - pinned_w.sum()

    if resid_mass <= 1e-15:
        w = _normalize(pinned_w)
        return WeightedGrid(pinned_arr, w, 0.0, seed, 0.0, pinned_arr.shape[0])

    resid = _residual_measure(measure, light)
    rng_seed = np.random.SeedSequence(seed).spawn(2)
    n_free = n_points - pinned_arr.shape[0]
    if n_free > 0:
        core = clvq_train(resid.sample, n_points, params.schedule, params.n_iterations,
                          int(rng_seed[0].generate_state(1)[0]), pin=pinned_arr,
                          batch_size=params.batch_size, n_count=1000, n_holdout=1000, dim=d)
        core = lloyd_refine(core, resid.sample, params.lloyd_rounds, params.samples_per_round,
                            int(rng_seed[1].generate_state(1)[0]), n_count=1000)
        points = core.points
        lines = core.log
    else:
        points, lines = pinned_arr, ()

    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    z = resid.sample(rng, params.n_count)
    cnt = np.bincount(nearest(points, z), minlength=points.shape[0]).astype(float)
    w = resid_mass * cnt / cnt.sum()
    w[:pinned_w.size] += pinned_w
    zh = resid.sample(rng, params.n_count)
    d2 = resid_mass * sq_distances_to_nearest(points, zh)
    dist, se = _distortion_from_sq(d2)
    # put the rounding residue on a free point so pinned atom weights stay exact
    n_pin = pinned_arr.shape[0]
    k = n_pin + int(np.argmax(w[n_pin:])) if w.size > n_pin else int(np.argmax(w))
    w[k] += 1.0 - w.sum()
    return WeightedGrid(points, w, dist, seed, se, n_pin, tuple(lines))


def _residual_measure(measure: MixedMeasure, light_atoms: list[int]) -> MixedMeasure:
    atoms = tuple(measure.atoms[k] for k in light_atoms)
    parts = measure.continuous_parts
    total = sum(w for _, w in atoms) + sum(c.weight for c in parts)
    atoms = tuple((p, w / total) for p, w in atoms)
    parts = tuple(replace(c, weight=c.weight / total) for c in parts)
    # absorb rounding so the residual passes the unit-mass check
    if parts:
        fix = 1.0 - (sum(w for _, w in atoms) + sum(c.weight for c in parts))
        parts = parts[:-1] + (replace(parts[-1], weight=parts[-1].weight + fix),)
    elif atoms:
        fix = 1.0 - sum(w for _, w in atoms)
        atoms = atoms[:-1] + ((atoms[-1][0], atoms[-1][1] + fix),)
    return MixedMeasure(measure.dim, atoms, parts)


def save_grid(grid: WeightedGrid, path: str | Path) -> None:
    """Hex-float text table: one header line, then coordinates and weight per row."""
    lines = [f"# qstop-grid dim={grid.dim} n_points={grid.size} seed={grid.seed} "
             f"n_pinned={grid.n_pinned} distortion={float(grid.distortion_l2).hex()} "
             f"distortion_se={float(grid.distortion_se).hex()}"]
    for p, w in zip(grid.points, grid.weights):
        lines.append(" ".join(float(c).hex() for c in p) + " " + float(w).hex())
    Path(path).write_text("\n".join(lines) + "\n")


def load_grid(path: str | Path) -> WeightedGrid:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# qstop-grid"):
        raise ValueError(f"{path} is not a grid file")
    meta = dict(tok.split("=", 1) for tok in text[0][len("# qstop-grid"):].split())
    dim = int(meta["dim"])
    rows = [[float.fromhex(t) for t in line.split()] for line in text[1:] if line.strip()]
    arr = np.array(rows, dtype=float).reshape(-1, dim + 1)
    if arr.shape[0] != int(meta["n_points"]):
        raise ValueError("grid file row count does not match its header")
    seed = None if meta["seed"] == "None" else int(meta["seed"])
    return WeightedGrid(arr[:, :dim], arr[:, dim], float.fromhex(meta["distortion"]), seed,
                        float.fromhex(meta["distortion_se"]), int(meta["n_pinned"]))
