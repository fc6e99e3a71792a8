"""Problem definition for partially observed finite-horizon stopping.

A model is the tuple (r, lambda, nu, H, horizon, constants, initial state):
the pair (X_t, Y_t) moves with kernel R(du, dv | x, y) = r(u, v, x, y)
lambda(du) nu(dv), the controller sees only Y, and collects H(X_tau, Y_tau)
when it stops.

Callables attached to a model are vectorized: every point argument is an
array whose last axis holds coordinates, leading axes broadcast, and the
result has the broadcast leading shape.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Density = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
Reward = Callable[[np.ndarray, np.ndarray], np.ndarray]
Sampler = Callable[[np.random.Generator, int], np.ndarray]


class ModelDefinitionError(ValueError):
    """The user-supplied model data violates a hard requirement."""


class AssumptionWarning(UserWarning):
    """A sampled probe refuted one of the regularity assumptions."""


@dataclass(frozen=True)
class ContinuousPart:
    """A weighted absolutely continuous component of a mixed measure.

    ``sampler(rng, n)`` returns an ``(n, dim)`` array of i.i.d. draws from the
    normalized component.  ``quadrature(n)``, when given, returns a
    deterministic ``(points, weights)`` rule for the normalized component.
    """

    sampler: Sampler
    weight: float
    quadrature: Callable[[int], tuple[np.ndarray, np.ndarray]] | None = None


@dataclass(frozen=True)
class MixedMeasure:
    """Probability measure made of Dirac atoms plus continuous parts."""

    dim: int
    atoms: tuple[tuple[np.ndarray, float], ...] = ()
    continuous_parts: tuple[ContinuousPart, ...] = ()

    def __post_init__(self):
        atoms = tuple((np.atleast_1d(np.asarray(p, dtype=float)), float(w)) for p, w in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        for p, w in atoms:
            if p.shape != (self.dim,):
                raise ModelDefinitionError(f"atom {p} does not have dimension {self.dim}")
            if w <= 0:
                raise ModelDefinitionError("atom weights must be positive")
        if any(c.weight <= 0 for c in self.continuous_parts):
            raise ModelDefinitionError("continuous part weights must be positive")
        total = self.total_weight
        if abs(total - 1.0) > 1e-12:
            raise ModelDefinitionError(f"measure weights sum to {total!r}, not 1")

    @property
    def total_weight(self) -> float:
        return sum(w for _, w in self.atoms) + sum(c.weight for c in self.continuous_parts)

    @property
    def atom_points(self) -> np.ndarray:
        return np.array([p for p, _ in self.atoms]).reshape(len(self.atoms), self.dim)

    @property
    def atom_weights(self) -> np.ndarray:
        return np.array([w for _, w in self.atoms], dtype=float)

    @property
    def continuous_weight(self) -> float:
        return sum(c.weight for c in self.continuous_parts)

    def _components(self):
        comps = [("atom", p, w) for p, w in self.atoms]
        comps += [("cont", c, c.weight) for c in self.continuous_parts]
        return comps

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comps = self._components()
        probs = np.array([w for _, _, w in comps])
        which = rng.choice(len(comps), size=n, p=probs / probs.sum())
        out = np.empty((n, self.dim))
        for k, (kind, obj, _) in enumerate(comps):
            mask = which == k
            cnt = int(mask.sum())
            if not cnt:
                continue
            out[mask] = obj if kind == "atom" else np.asarray(obj.sampler(rng, cnt)).reshape(cnt, self.dim)
        return out

    def sample_continuous(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw from the continuous part alone, renormalized."""
        parts = self.continuous_parts
        if not parts:
            raise ValueError("measure has no continuous part")
        probs = np.array([c.weight for c in parts])
        which = rng.choice(len(parts), size=n, p=probs / probs.sum())
        out = np.empty((n, self.dim))
        for k, c in enumerate(parts):
            mask = which == k
            cnt = int(mask.sum())
            if cnt:
                out[mask] = np.asarray(c.sampler(rng, cnt)).reshape(cnt, self.dim)
        return out

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray], n: int = 64,
                  rng: np.random.Generator | None = None) -> float:
        """Integrate a vectorized ``fn(points) -> values``.

        Atoms are exact.  Continuous parts use their quadrature rule with
        ``n`` nodes when available, otherwise a Monte-Carlo mean over ``n``
        draws from ``rng``.
        """
        total = 0.0
        for p, w in self.atoms:
            total += w * float(np.asarray(fn(p[None, :]))[0])
        for c in self.continuous_parts:
            if c.quadrature is not None:
                pts, wts = c.quadrature(n)
                total += c.weight * float(np.dot(wts, fn(np.asarray(pts).reshape(-1, self.dim))))
            else:
                if rng is None:
                    raise ValueError("Monte-Carlo integration needs an rng")
                pts = np.asarray(c.sampler(rng, n)).reshape(n, self.dim)
                total += c.weight * float(np.mean(fn(pts)))
        return total


def uniform_box_part(low: Sequence[float], high: Sequence[float], weight: float,
                     fixed: dict[int, float] | None = None) -> ContinuousPart:
    """Uniform law on an axis-aligned box, with optional frozen coordinates.

    Coordinates listed in ``fixed`` are held at a constant value; the rest
    are uniform on ``[low, high]``.  Quadrature is Gauss-Legendre in the free
    coordinates (tensor product).
    """
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    fixed = dict(fixed or {})
    dim = low.size
    free = [k for k in range(dim) if k not in fixed]

    def sampler(rng, n):
        pts = rng.uniform(low, high, size=(n, dim))
        for k, val in fixed.items():
            pts[:, k] = val
        return pts

    def quadrature(n):
        nodes, wts = np.polynomial.legendre.leggauss(n)
        grids = [0.5 * (high[k] - low[k]) * nodes + 0.5 * (high[k] + low[k]) for k in free]
        mesh = np.meshgrid(*grids, indexing="ij")
        wmesh = np.meshgrid(*([wts / 2.0] * len(free)), indexing="ij")
        pts = np.empty((mesh[0].size, dim))
        for idx, k in enumerate(free):
            pts[:, k] = mesh[idx].ravel()
        for k, val in fixed.items():
            pts[:, k] = val
        w = np.prod([m.ravel() for m in wmesh], axis=0)
        return pts, w

    return ContinuousPart(sampler=sampler, weight=weight, quadrature=quadrature)


@dataclass(frozen=True)
class HMMFactorization:
    """Separable form r(u, v, x, y) = transition(u, x, y) * emission(v, u).

    ``emission(., u)`` must be a nu-density (it integrates to one) and
    ``sample_emission(u, rng)`` must draw from it exactly.  When the hidden
    transition ignores the previous observation, set
    ``transition_uses_y=False`` so filter updates reuse one matrix.
    """

    transition: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    emission: Callable[[np.ndarray, np.ndarray], np.ndarray]
    sample_emission: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    transition_uses_y: bool = True


@dataclass(frozen=True)
class StoppingModel:
    dim_x: int
    dim_y: int
    horizon: int
    density_r: Density
    lambda_measure: MixedMeasure
    nu_measure: MixedMeasure
    performance_h: Reward
    r_sup: float
    r_lip: float
    delta: float
    h_sup: float
    h_lip: float
    initial_state: tuple[np.ndarray, np.ndarray]
    beta_moment: float = 1.0
    factorization: HMMFactorization | None = None
    name: str = "custom"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon < 1:
            raise ModelDefinitionError("horizon must be at least 1")
        for attr in ("r_sup", "r_lip", "delta"):
            if not getattr(self, attr) > 0:
                raise ModelDefinitionError(f"{attr} must be positive")
        if self.h_sup < 0 or self.h_lip < 0:
            raise ModelDefinitionError("h_sup and h_lip must be nonnegative")
        if self.lambda_measure.dim != self.dim_x or self.nu_measure.dim != self.dim_y:
            raise ModelDefinitionError("reference measure dimensions do not match the model")
        x0, y0 = self.initial_state
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        y0 = np.atleast_1d(np.asarray(y0, dtype=float))
        if x0.shape != (self.dim_x,) or y0.shape != (self.dim_y,):
            raise ModelDefinitionError("initial state has the wrong dimension")
        object.__setattr__(self, "initial_state", (x0, y0))

    @property
    def x0(self) -> np.ndarray:
        return self.initial_state[0]

    @property
    def y0(self) -> np.ndarray:
        return self.initial_state[1]

    def density(self, u, v, x, y) -> np.ndarray:
        """Vectorized r with the nonnegativity contract enforced."""
        val = np.asarray(self.density_r(np.asarray(u, float), np.asarray(v, float),
                                        np.asarray(x, float), np.asarray(y, float)), dtype=float)
        if np.any(val < 0) or np.any(np.isnan(val)):
            raise ModelDefinitionError("density r returned a negative or NaN value")
        return val

    def reward(self, x, y) -> np.ndarray:
        return np.asarray(self.performance_h(np.asarray(x, float), np.asarray(y, float)), dtype=float)


def eval_density(model: StoppingModel, u, v, x, y) -> float:
    """r(u, v, x, y) at single points."""
    pts = [np.atleast_1d(np.asarray(a, dtype=float))[None, :] for a in (u, v, x, y)]
    dims = (model.dim_x, model.dim_y, model.dim_x, model.dim_y)
    for p, d in zip(pts, dims):
        if p.shape[-1] != d:
            raise ValueError("point dimension does not match the model")
    return float(model.density(*pts)[0])


def eval_density_mixed(model: StoppingModel, measure_on_u, v, theta, y,
                       support: np.ndarray | None = None, n_quad: int = 64,
                       rng: np.random.Generator | None = None) -> float:
    """r(mu, v, theta, y) = sum_i sum_j mu_i theta_j r(u_i, v, x_j, y).

    ``theta`` is a probability vector over ``support`` (the grid points it
    lives on).  ``measure_on_u`` is a WeightedGrid, or a MixedMeasure
    integrated by its quadrature rule.  When ``support`` is omitted the
    grid of ``measure_on_u`` is used.
    """
    from qstop.quantize import WeightedGrid

    theta = np.asarray(theta, dtype=float)
    if support is None:
        if not isinstance(measure_on_u, WeightedGrid):
            raise ValueError("support points are required when the measure is not a grid")
        support = measure_on_u.points
    support = np.asarray(support, dtype=float).reshape(-1, model.dim_x)
    if theta.shape != (support.shape[0],):
        raise ValueError(f"theta has length {theta.size} but support has {support.shape[0]} points")
    if abs(theta.sum() - 1.0) > 1e-9:
        raise ValueError("theta must sum to one")
    v = np.atleast_1d(np.asarray(v, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))

    def inner(upts):
        upts = np.asarray(upts).reshape(-1, model.dim_x)
        dens = model.density(upts[:, None, :], v[None, None, :], support[None, :, :], y[None, None, :])
        return dens @ theta

    if isinstance(measure_on_u, WeightedGrid):
        return float(measure_on_u.weights @ inner(measure_on_u.points))
    return measure_on_u.integrate(inner, n=n_quad, rng=rng)


def eval_performance_ext(model: StoppingModel, gamma, y, support: np.ndarray) -> float:
    """H(psi) = sum_j gamma_j H(x_j, y) for psi = (gamma, y) over ``support``."""
    gamma = np.asarray(gamma, dtype=float)
    support = np.asarray(support, dtype=float).reshape(-1, model.dim_x)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    vals = model.reward(support, np.broadcast_to(y, (support.shape[0], model.dim_y)))
    return float(gamma @ vals)


def reward_matrix(model: StoppingModel, support: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Matrix H(x_j, y_k) with rows indexed by observations ``ys``."""
    support = np.asarray(support, dtype=float).reshape(-1, model.dim_x)
    ys = np.asarray(ys, dtype=float).reshape(-1, model.dim_y)
    shape = (ys.shape[0], support.shape[0])
    return np.broadcast_to(model.reward(support[None, :, :], ys[:, None, :]), shape).copy()


@dataclass
class ProbeReport:
    n_probes: int
    max_density: float
    max_abs_reward: float
    lipschitz_ratio: float
    kernel_mass: float
    kernel_mass_se: float
    min_lower_integral: float
    violations: list[str]


def validate_assumptions(model: StoppingModel, rng: np.random.Generator, n_probes: int = 10_000,
                         n_mass: int = 20, n_inner: int = 20_000) -> ProbeReport:
    """Spot-check the regularity assumptions by sampling.

    Sampling can refute but not prove the assumptions, so violations are
    emitted as ``AssumptionWarning`` and returned, never raised.
    """
    lam, nu = model.lambda_measure, model.nu_measure
    u, x = lam.sample(rng, n_probes), lam.sample(rng, n_probes)
    v, y = nu.sample(rng, n_probes), nu.sample(rng, n_probes)
    r = model.density(u, v, x, y)
    h = model.reward(x, y)
    violations = []
    if r.max() > model.r_sup * (1 + 1e-12):
        violations.append(f"density exceeds r_sup ({r.max():.6g} > {model.r_sup:.6g})")
    if np.abs(h).max() > model.h_sup * (1 + 1e-12):
        violations.append(f"reward exceeds h_sup ({np.abs(h).max():.6g} > {model.h_sup:.6g})")

    u2, x2, y2 = lam.sample(rng, n_probes), lam.sample(rng, n_probes), nu.sample(rng, n_probes)
    r2 = model.density(u2, v, x2, y2)
    dist = (np.linalg.norm(u - u2, axis=1) + np.linalg.norm(x - x2, axis=1)
            + np.linalg.norm(y - y2, axis=1))
    ok = dist > 0
    ratio = float(np.max(np.abs(r - r2)[ok] / dist[ok])) if ok.any() else 0.0
    if ratio > model.r_lip * (1 + 1e-12):
        violations.append(f"Lipschitz ratio {ratio:.6g} exceeds r_lip {model.r_lip:.6g}")

    worst_mass, worst_se, min_lower = 1.0, 0.0, np.inf
    xs, ys = lam.sample(rng, n_mass), nu.sample(rng, n_mass)
    for k in range(n_mass):
        uu, vv = lam.sample(rng, n_inner), nu.sample(rng, n_inner)
        vals = model.density(uu, vv, xs[k][None, :], ys[k][None, :])
        mean, se = vals.mean(), vals.std(ddof=1) / np.sqrt(n_inner)
        if abs(mean - 1.0) > 3 * se + 1e-12:
            violations.append(f"kernel mass {mean:.4f} +- {se:.4f} at probe {k} differs from 1")
        if abs(mean - 1.0) > abs(worst_mass - 1.0):
            worst_mass, worst_se = mean, se
        # lower bound check: r(lambda, v, x, y) >= 1/delta
        vfix = nu.sample(rng, 1)
        low = model.density(uu, vfix, xs[k][None, :], ys[k][None, :])
        lmean, lse = low.mean(), low.std(ddof=1) / np.sqrt(n_inner)
        min_lower = min(min_lower, lmean)
        if lmean < 1.0 / model.delta - 3 * lse:
            violations.append(f"lower bound r(lambda, v, x, y) = {lmean:.4g} below 1/delta")

    for msg in violations:
        warnings.warn(msg, AssumptionWarning, stacklevel=2)
    return ProbeReport(n_probes, float(r.max()), float(np.abs(h).max()), ratio,
                       float(worst_mass), float(worst_se), float(min_lower), violations)
