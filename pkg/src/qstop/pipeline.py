"""End-to-end experiment: quantize lambda, simulate, quantize the chain, solve, bound."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from importlib import metadata

import numpy as np

from qstop.bounds import ErrorReport, error_report, fmt
from qstop.chain import QuantizedChain, chain_quant_errors, quantize_chain
from qstop.config import RunConfig
from qstop.dp import ValueTable, check_table, solve
from qstop.filtering import PathEnsemble, simulate_paths
from qstop.finite import bundled_specs
from qstop.model import StoppingModel
from qstop.quantize import WeightedGrid, quantize_measure
from qstop.watertank import WaterTankParams, build_watertank

log = logging.getLogger(__name__)

CSV_COLUMNS = ["N", "M", "n_paths", "seed", "value", "epsilon_n", "stage1_bound", "stage2_bound",
               "total_bound", "runtime_s", "precondition_ok", "version", "config_hash"]

# stage identifiers mixed into the seed sequence
HIDDEN, PATHS, CHAIN, FRESH, HELDOUT = 1, 2, 3, 4, 5


def version_string() -> str:
    try:
        return "qstop-" + metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "qstop-unknown"


def stage_seed(master: int, stage: int, *keys: int) -> int:
    return int(np.random.SeedSequence([master, stage, *keys]).generate_state(1, np.uint64)[0])


def build_model(cfg: RunConfig) -> StoppingModel:
    mc = cfg.model
    if mc.preset == "watertank":
        params = WaterTankParams(capacity=mc.capacity, target=mc.target, inflow_rate=mc.inflow_rate,
                                 noise_sigma=mc.noise_sigma,
                                 horizon=10 if mc.horizon is None else mc.horizon)
        return build_watertank(params)
    hmm = finite_spec(cfg)
    return hmm.to_model()


def finite_spec(cfg: RunConfig):
    from dataclasses import replace

    specs = {h.name: h for h in bundled_specs()}
    if cfg.model.finite_name not in specs:
        from qstop.config import ConfigError
        raise ConfigError(f"unknown finite model {cfg.model.finite_name!r}; choose from {sorted(specs)}")
    hmm = specs[cfg.model.finite_name]
    if cfg.model.reward_constant is not None:
        hmm = replace(hmm, reward=np.full_like(hmm.reward, cfg.model.reward_constant))
    return hmm if cfg.model.horizon is None else replace(hmm, horizon=cfg.model.horizon)


def hidden_grid(cfg: RunConfig, model: StoppingModel, n: int) -> WeightedGrid:
    if cfg.model.preset == "finite":
        return finite_spec(cfg).hidden_grid()
    return quantize_measure(model.lambda_measure, n, stage_seed(cfg.seed, HIDDEN, n), cfg.clvq, pin=model.x0)


def paths(cfg: RunConfig, model: StoppingModel, grid: WeightedGrid, n: int, fresh: bool = False,
          stage: int | None = None) -> PathEnsemble:
    stage = stage or (FRESH if fresh else PATHS)
    count = cfg.n_fresh_paths if fresh else cfg.n_paths
    return simulate_paths(model, grid, count, stage_seed(cfg.seed, stage, n), jobs=cfg.jobs)


def chain_for(cfg: RunConfig, ens: PathEnsemble, grid: WeightedGrid, n: int, m: int,
              model: StoppingModel | None = None) -> QuantizedChain:
    held = None
    if cfg.chain.heldout_transitions:
        held = paths(cfg, model, grid, n, stage=HELDOUT)
    return quantize_chain(ens, m, grid, cfg.chain, stage_seed(cfg.seed, CHAIN, n, m), transition_ensemble=held)


@dataclass
class PairResult:
    n: int
    m: int
    value: float
    report: ErrorReport
    timings: dict = field(default_factory=dict)
    table: ValueTable | None = None
    chain: QuantizedChain | None = None

    def record(self, cfg: RunConfig) -> dict:
        rep = self.report
        rt = ""
        if cfg.timings:
            rt = f"{sum(self.timings.values()):.3f}"
        return {
            "N": self.n, "M": self.m, "n_paths": cfg.n_paths, "seed": cfg.seed,
            "value": repr(self.value), "epsilon_n": repr(rep.epsilon_n),
            "stage1_bound": fmt(rep.stage1), "stage2_bound": fmt(rep.stage2), "total_bound": fmt(rep.total),
            "runtime_s": rt, "precondition_ok": rep.precondition_ok,
            "version": version_string(), "config_hash": cfg.config_hash(),
        }

    def full_record(self, cfg: RunConfig) -> dict:
        out = self.record(cfg)
        out["error_report"] = self.report.to_dict()
        if cfg.timings:
            out["timings"] = {k: round(v, 3) for k, v in self.timings.items()}
        return out


def solve_pair(cfg: RunConfig, model: StoppingModel, grid: WeightedGrid, ens: PathEnsemble,
               fresh: PathEnsemble, n: int, m: int, keep: bool = False) -> PairResult:
    timings = {}
    t0 = time.perf_counter()
    chain = chain_for(cfg, ens, grid, n, m, model)
    timings["chain"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    table = solve(model, chain)
    chain.check()
    check_table(table, model.h_sup, chain)
    timings["dp"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    errs = chain_quant_errors(chain, fresh)
    rep = error_report(model, grid.size, grid.distortion_l2, grid.distortion_se or 0.0, errs)
    timings["bounds"] = time.perf_counter() - t0
    return PairResult(n, m, table.value_at_origin, rep, timings, table if keep else None, chain if keep else None)


def run_sweep(cfg: RunConfig, keep: bool = False, on_error=None) -> list[PairResult | Exception]:
    """Solve every (N, M) pair in the config, reusing grid and paths for each N.

    Errors in one pair are returned in its slot instead of aborting the sweep.
    """
    model = build_model(cfg)
    results: list[PairResult | Exception] = []
    for n in cfg.n_hidden_points:
        try:
            t0 = time.perf_counter()
            grid = hidden_grid(cfg, model, n)
            t_grid = time.perf_counter() - t0
            t0 = time.perf_counter()
            ens = paths(cfg, model, grid, grid.size)
            fresh = paths(cfg, model, grid, grid.size, fresh=True)
            t_sim = time.perf_counter() - t0
        except Exception as exc:  # noqa: BLE001 - reported per pair
            if on_error:
                on_error(n, None, exc)
            results.extend(exc for _ in cfg.m_chain_points)
            continue
        for m in cfg.m_chain_points:
            try:
                res = solve_pair(cfg, model, grid, ens, fresh, grid.size, m, keep)
                res.timings = {"hidden": t_grid, "simulate": t_sim, **res.timings}
                results.append(res)
                log.info("N=%d M=%d value=%.6f", n, m, res.value)
            except Exception as exc:  # noqa: BLE001
                if on_error:
                    on_error(n, m, exc)
                results.append(exc)
        del ens, fresh
    return results
