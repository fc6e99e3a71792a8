"""Water-tank benchmark: cover a rain-fed tank when its level is near a target.

The hidden level is extended to (x1, x2) with x2 = +1 when full, -1 when
empty and 0 otherwise, so the two boundary atoms are isolated points of the
hidden space.  Inflow is exponential, measurement noise is Gaussian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from qstop.model import (HMMFactorization, MixedMeasure, ModelDefinitionError, StoppingModel,
                         uniform_box_part)


@dataclass(frozen=True)
class WaterTankParams:
    capacity: float = 1.0
    target: float = 0.5
    inflow_rate: float = 5.0
    noise_sigma: float = 0.03
    horizon: int = 10
    x0: tuple[float, float] = (0.0, -1.0)
    y0: float = 0.0

    def __post_init__(self):
        if not 0 < self.target < self.capacity:
            raise ModelDefinitionError("target must lie strictly inside (0, capacity)")
        if self.inflow_rate <= 0 or self.noise_sigma <= 0:
            raise ModelDefinitionError("inflow_rate and noise_sigma must be positive")
        if self.horizon < 1:
            raise ModelDefinitionError("horizon must be at least 1")
        if not self.inflow_cdf(self.capacity) < 1:
            raise ModelDefinitionError("need F(K) < 1")
        if not self.noise_cdf(0.0) < 1 or not self.noise_cdf(-self.capacity) > 0:
            raise ModelDefinitionError("need G(0) < 1 and G(-K) > 0")

    # f, F: exponential inflow; g, G: centered Gaussian noise
    def inflow_pdf(self, s):
        s = np.asarray(s, dtype=float)
        return np.where(s >= 0, self.inflow_rate * np.exp(-self.inflow_rate * np.maximum(s, 0.0)), 0.0)

    def inflow_cdf(self, s):
        s = np.asarray(s, dtype=float)
        return np.where(s >= 0, -np.expm1(-self.inflow_rate * np.maximum(s, 0.0)), 0.0)

    def inflow_sf(self, s):
        s = np.asarray(s, dtype=float)
        return np.where(s >= 0, np.exp(-self.inflow_rate * np.maximum(s, 0.0)), 1.0)

    def noise_pdf(self, s):
        s = np.asarray(s, dtype=float) / self.noise_sigma
        return np.exp(-0.5 * s * s) / (self.noise_sigma * math.sqrt(2 * math.pi))

    def noise_cdf(self, s):
        return ndtr(np.asarray(s, dtype=float) / self.noise_sigma)

    def noise_sf(self, s):
        return ndtr(-np.asarray(s, dtype=float) / self.noise_sigma)

    @property
    def g_lower(self) -> float:
        """Minimum of g on [-K, K]."""
        return float(self.noise_pdf(self.capacity))


def _kind(u: np.ndarray) -> np.ndarray:
    """0 = empty atom, 1 = interior, 2 = full atom (read from the second coordinate)."""
    u2 = u[..., 1]
    return np.where(u2 < -0.5, 0, np.where(u2 > 0.5, 2, 1))


def _level(u: np.ndarray, K: float) -> np.ndarray:
    kind = _kind(u)
    return np.where(kind == 0, 0.0, np.where(kind == 2, K, u[..., 0]))


def hidden_factor(p: WaterTankParams, u: np.ndarray, x: np.ndarray) -> np.ndarray:
    """lambda-density of the next extended level u given the current level x."""
    K = p.capacity
    kind = _kind(u)
    u1, x1 = u[..., 0], x[..., 0]
    inside = (u1 > 0) & (u1 < K)
    empty = 4.0 * p.inflow_cdf(-x1)
    interior = np.where(inside, 2 * K * p.inflow_pdf(u1 - x1), 0.0)
    full = 4.0 * p.inflow_sf(K - x1)
    return np.where(kind == 0, empty, np.where(kind == 2, full, interior))


def obs_factor(p: WaterTankParams, v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """nu-density of the observation v given the extended level u."""
    K = p.capacity
    w = _level(u, K)
    v1 = v[..., 0]
    at0 = 4.0 * p.noise_cdf(-w)
    atK = 4.0 * p.noise_sf(K - w)
    mid = 2 * K * p.noise_pdf(v1 - w)
    return np.where(v1 == 0.0, at0, np.where(v1 == K, atK, np.where((v1 > 0) & (v1 < K), mid, 0.0)))


def density(p: WaterTankParams, u, v, x, y) -> np.ndarray:
    # the kernel ignores the previous observation y
    u, v, x = np.asarray(u, float), np.asarray(v, float), np.asarray(x, float)
    return hidden_factor(p, u, x) * obs_factor(p, v, u)


def performance(p: WaterTankParams, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return p.capacity - np.abs(x[..., 0] - p.target)


def sample_obs(p: WaterTankParams, u: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = np.asarray(u, dtype=float).reshape(-1, 2)
    w = _level(u, p.capacity)
    v = np.clip(w + p.noise_sigma * rng.standard_normal(w.shape), 0.0, p.capacity)
    return v[:, None]


def constants(p: WaterTankParams) -> dict[str, float]:
    """Closed-form regularity constants of the water-tank kernel."""
    K = p.capacity
    f_sup = p.inflow_rate
    L_f = p.inflow_rate ** 2
    g_sup = float(p.noise_pdf(0.0))
    L_g = float(p.noise_pdf(p.noise_sigma)) / p.noise_sigma
    cg = 8 + 2 * K * g_sup
    r_sup = (8 + 2 * K * f_sup) * cg
    a_term = 2 * K * (L_f * cg + f_sup * (8 * g_sup + 2 * K * L_g))
    b_term = max(2 * K * f_sup * (8 * g_sup + 2 * K * L_g), (4 + 2 * K * f_sup + 2 * K * L_f) * cg)
    r_lip = max(a_term, b_term, 8 * cg / (K + 2), cg * (8 * f_sup + 2 * K * L_f))
    low = min(4 * float(p.noise_cdf(-K)), 2 * K * p.g_lower, 4 * float(p.noise_sf(0.0)))
    delta = 1.0 / (float(p.inflow_sf(K)) * low)
    return {"r_sup": r_sup, "r_lip": r_lip, "delta": delta, "h_sup": K, "h_lip": 1.0,
            "f_sup": f_sup, "L_f": L_f, "g_sup": g_sup, "L_g": L_g, "g_lower": p.g_lower}


def lambda_measure(p: WaterTankParams) -> MixedMeasure:
    K = p.capacity
    cont = uniform_box_part([0.0, 0.0], [K, 0.0], 0.5, fixed={1: 0.0})
    return MixedMeasure(2, atoms=(((0.0, -1.0), 0.25), ((K, 1.0), 0.25)), continuous_parts=(cont,))


def nu_measure(p: WaterTankParams) -> MixedMeasure:
    K = p.capacity
    cont = uniform_box_part([0.0], [K], 0.5)
    return MixedMeasure(1, atoms=(((0.0,), 0.25), ((K,), 0.25)), continuous_parts=(cont,))


def build_watertank(params: WaterTankParams = WaterTankParams()) -> StoppingModel:
    c = constants(params)
    fact = HMMFactorization(
        transition=lambda u, x, y: hidden_factor(params, u, x),
        emission=lambda v, u: obs_factor(params, v, u),
        sample_emission=lambda u, rng: sample_obs(params, u, rng),
        transition_uses_y=False,
    )
    return StoppingModel(
        dim_x=2, dim_y=1, horizon=params.horizon,
        density_r=lambda u, v, x, y: density(params, u, v, x, y),
        lambda_measure=lambda_measure(params), nu_measure=nu_measure(params),
        performance_h=lambda x, y: performance(params, x, y),
        r_sup=c["r_sup"], r_lip=c["r_lip"], delta=c["delta"], h_sup=c["h_sup"], h_lip=c["h_lip"],
        initial_state=(np.array(params.x0, float), np.array([params.y0], float)),
        beta_moment=1.0, factorization=fact, name="watertank", metadata={"params": params, **c},
    )


def simulate_truth(params: WaterTankParams, n_steps: int, rng: np.random.Generator,
                   x1_start: float | None = None, xi: np.ndarray | None = None,
                   psi: np.ndarray | None = None, y_start: float | None = None) -> np.ndarray:
    """Run the truncated dynamics; rows are (x1, x2, y) for t = 0..n_steps.

    ``xi`` and ``psi`` override the inflow and noise draws when given.  A
    custom ``x1_start`` without ``y_start`` starts the observation at x1.
    """
    K = params.capacity
    x1 = params.x0[0] if x1_start is None else float(x1_start)
    if xi is None:
        xi = rng.exponential(1.0 / params.inflow_rate, size=n_steps)
    if psi is None:
        psi = params.noise_sigma * rng.standard_normal(n_steps)
    out = np.empty((n_steps + 1, 3))
    if x1_start is None:
        x2, y0 = params.x0[1], params.y0
    else:
        x2, y0 = float(x1 >= K) - float(x1 <= 0), x1
    out[0] = (x1, x2, y0 if y_start is None else float(y_start))
    for t in range(n_steps):
        x1 = min(max(x1 + xi[t], 0.0), K)
        y = min(max(x1 + psi[t], 0.0), K)
        out[t + 1] = (x1, float(x1 == K) - float(x1 == 0.0), y)
    return out
