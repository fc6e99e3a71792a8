"""Explicit error-bound constants for the two-stage approximation.

The water-tank constants make these bounds astronomically large (delta is
around 6e244), far beyond float64, so everything here is evaluated with
mpmath at ``PRECISION`` significant digits.  Results are mpf numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import mpmath

PRECISION = 60


def _mp(x) -> mpmath.mpf:
    return mpmath.mpf(x)


def k1_constant(r_sup, r_lip, delta) -> mpmath.mpf:
    """K1 = L_r (1 + 2 r L_r) + delta r [r + L_r (2 + 2 delta r)]."""
    with mpmath.workdps(PRECISION):
        r, L, d = _mp(r_sup), _mp(r_lip), _mp(delta)
        return +(L * (1 + 2 * r * L) + d * r * (r + L * (2 + 2 * d * r)))


def bellman_factor(r_sup, r_lip, delta) -> mpmath.mpf:
    """Growth factor (r + L_r)(1 + delta r (1 + r delta)) of the Lipschitz bound."""
    with mpmath.workdps(PRECISION):
        r, L, d = _mp(r_sup), _mp(r_lip), _mp(delta)
        return +((r + L) * (1 + d * r * (1 + r * d)))


def bellman_norm_recursion(h_sup, h_lip, r_sup, r_lip, delta, n0: int) -> list[mpmath.mpf]:
    """Upper bounds on ||B^k H|| (sup + Lipschitz), k = 0..n0-1.

    Each Bellman step keeps the sup bound at max(h_sup, previous sup) and
    bounds the Lipschitz constant by ||H|| + ||f|| * bellman_factor.
    """
    if n0 < 1:
        raise ValueError("n0 must be at least 1")
    with mpmath.workdps(PRECISION):
        hs, hl = _mp(h_sup), _mp(h_lip)
        h_norm = hs + hl
        fac = bellman_factor(r_sup, r_lip, delta)
        sup, norm = hs, h_norm
        out = [+norm]
        for _ in range(1, n0):
            lip = h_norm + norm * fac
            sup = max(hs, sup)
            norm = sup + lip
            out.append(+norm)
        return out


def lipschitz_recursion(n_hidden: int, r_sup, r_lip, delta, h_sup, h_lip, n0: int) -> list[mpmath.mpf]:
    """Lipschitz constants L_t of the approximate value functions, t = 0..n0."""
    if n0 < 1 or n_hidden < 1:
        raise ValueError("n0 and n_hidden must be at least 1")
    with mpmath.workdps(PRECISION):
        r, L, d = _mp(r_sup), _mp(r_lip), _mp(delta)
        hs, hl = _mp(h_sup), _mp(h_lip)
        root = mpmath.sqrt(n_hidden)
        tail = 2 * root * (hs + hl)
        out = [None] * (n0 + 1)
        out[n0] = +tail
        for t in range(n0 - 1, -1, -1):
            out[t] = +(4 * root * ((1 + 2 * r) * hs + 2 * r * d * (1 + 2 * r * d) * out[t + 1]) * (r + L) + tail)
        return out


def growth_envelope(n_hidden: int, r_sup, r_lip, delta) -> mpmath.mpf:
    """Ratio 8 sqrt(N) r delta (1 + 2 r delta)(r + L_r) bounding L_t / L_{t+1}."""
    with mpmath.workdps(PRECISION):
        r, L, d = _mp(r_sup), _mp(r_lip), _mp(delta)
        return +(8 * mpmath.sqrt(n_hidden) * r * d * (1 + 2 * r * d) * (r + L))


def precondition_holds(epsilon_n, r_lip, delta) -> bool:
    """epsilon_N <= (1 / (2 L_r)) min(1, 1 / delta)."""
    with mpmath.workdps(PRECISION):
        return _mp(epsilon_n) <= min(_mp(1), 1 / _mp(delta)) / (2 * _mp(r_lip))


def stage_bounds(epsilon_n, k1, bellman_norms, lip_v, chain_errors, r_lip, delta):
    """Returns (stage1, stage2, total, precondition_ok)."""
    if len(lip_v) != len(chain_errors):
        raise ValueError("need one chain error per Lipschitz constant")
    with mpmath.workdps(PRECISION):
        stage1 = _mp(k1) * _mp(epsilon_n) * mpmath.fsum(bellman_norms)
        stage2 = mpmath.fsum(_mp(l) * _mp(e) for l, e in zip(lip_v, chain_errors))
        return +stage1, +stage2, +(stage1 + stage2), precondition_holds(epsilon_n, r_lip, delta)


@dataclass
class ErrorReport:
    epsilon_n: float
    epsilon_se: float
    k1: mpmath.mpf
    bellman_norms: list
    lip_v: list
    chain_errors: list[float]
    chain_error_se: list[float]
    stage1: mpmath.mpf
    stage2: mpmath.mpf
    total: mpmath.mpf
    precondition_ok: bool
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "epsilon_n": self.epsilon_n, "epsilon_se": self.epsilon_se, "k1": fmt(self.k1),
            "bellman_norms": [fmt(x) for x in self.bellman_norms], "lip_v": [fmt(x) for x in self.lip_v],
            "chain_errors": list(self.chain_errors), "chain_error_se": list(self.chain_error_se),
            "stage1": fmt(self.stage1), "stage2": fmt(self.stage2), "total": fmt(self.total),
            "precondition_ok": self.precondition_ok, **self.extra,
        }


def fmt(x) -> str:
    """Deterministic 17-significant-digit text for an mpf (handles huge exponents)."""
    return mpmath.nstr(_mp(x), 17, min_fixed=-4, max_fixed=17)


def error_report(model, n_hidden: int, epsilon_n: float, epsilon_se: float,
                 chain_errors: list[tuple[float, float]]) -> ErrorReport:
    r, L, d = model.r_sup, model.r_lip, model.delta
    n0 = model.horizon
    k1 = k1_constant(r, L, d)
    norms = bellman_norm_recursion(model.h_sup, model.h_lip, r, L, d, n0)
    lips = lipschitz_recursion(n_hidden, r, L, d, model.h_sup, model.h_lip, n0)
    errs = [float(e) for e, _ in chain_errors]
    s1, s2, tot, ok = stage_bounds(epsilon_n, k1, norms, lips, errs, L, d)
    return ErrorReport(float(epsilon_n), float(epsilon_se), k1, norms, lips, errs,
                       [float(s) for _, s in chain_errors], s1, s2, tot, ok)
