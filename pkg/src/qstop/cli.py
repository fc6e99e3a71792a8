"""Command-line front end.

Exit codes: 0 success, 1 configuration error, 2 model degeneracy or a
missing upstream artifact, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from qstop import pipeline
from qstop.bounds import error_report
from qstop.chain import load_chain, save_chain
from qstop.config import ConfigError, RunConfig, load_config
from qstop.filtering import DegenerateObservationError, MissingInitialPointError, ObservationSamplingError
from qstop.filtering import load_ensemble, save_ensemble
from qstop.model import ModelDefinitionError
from qstop.quantize import load_grid, save_grid

log = logging.getLogger("qstop")


class MissingArtifact(RuntimeError):
    pass


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return 1
    if isinstance(exc, (DegenerateObservationError, ObservationSamplingError, ModelDefinitionError,
                        MissingInitialPointError, MissingArtifact)):
        return 2
    if isinstance(exc, OSError):
        return 3
    return 2


def _need(path: str | None, stage: str, flag: str) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"missing upstream artifact {p} (produced by '{stage}')")
    return p


def render(records: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(records, indent=2, sort_keys=True, default=str) + "\n"
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=pipeline.CSV_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in records:
        w.writerow(r)
    return buf.getvalue()


def emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def config_from_args(args) -> RunConfig:
    cfg = load_config(args.config)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        over["out"] = args.out
    if getattr(args, "format", None) is not None:
        over["output_format"] = args.format
    if getattr(args, "jobs", None) is not None:
        over["jobs"] = args.jobs
    if getattr(args, "timings", False):
        over["timings"] = True
    try:
        return replace(cfg, **over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _records(cfg, results, full: bool):
    recs, first_error = [], None
    for r in results:
        if isinstance(r, Exception):
            log.error("pair failed: %s", r)
            first_error = first_error or r
            continue
        recs.append(r.full_record(cfg) if full else r.record(cfg))
    return recs, first_error


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    results = pipeline.run_sweep(cfg)
    recs, err = _records(cfg, results, cfg.output_format == "json")
    emit(render(recs, cfg.output_format), cfg.out)
    return exit_code(err) if err else 0


def cmd_table(args) -> int:
    cfg = config_from_args(args)
    results = pipeline.run_sweep(cfg)
    recs, err = _records(cfg, results, False)
    if cfg.out is not None:
        Path(cfg.out).write_text(render(recs, "csv"))
    ns = sorted({r["N"] for r in recs})
    lines = ["M      | " + " | ".join(f"N={n:<6d}" for n in ns)]
    for m in cfg.m_chain_points:
        cells = []
        for n in ns:
            hit = [r for r in recs if r["N"] == n and r["M"] == m]
            cells.append(f"{float(hit[0]['value']):.4f}  " if hit else " " * 8)
        lines.append(f"{m:<6d} | " + " | ".join(cells))
    sys.stdout.write("\n".join(lines) + "\n")
    return exit_code(err) if err else 0


def _n_points(args, cfg) -> int:
    return args.n if args.n is not None else cfg.n_hidden_points[0]


def cmd_quantize(args) -> int:
    cfg = config_from_args(args)
    model = pipeline.build_model(cfg)
    grid = pipeline.hidden_grid(cfg, model, _n_points(args, cfg))
    if args.out is None:
        raise ConfigError("--out is required")
    save_grid(grid, args.out)
    return 0


def cmd_simulate(args) -> int:
    cfg = config_from_args(args)
    grid = load_grid(_need(args.grid, "quantize-measure", "--grid"))
    model = pipeline.build_model(cfg)
    if args.out is None:
        raise ConfigError("--out is required")
    save_ensemble(pipeline.paths(cfg, model, grid, grid.size), args.out)
    save_ensemble(pipeline.paths(cfg, model, grid, grid.size, fresh=True), _fresh_path(args.out))
    return 0


def _fresh_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".fresh" + p.suffix)


def cmd_solve(args) -> int:
    cfg = config_from_args(args)
    grid = load_grid(_need(args.grid, "quantize-measure", "--grid"))
    ens_path = _need(args.paths, "simulate", "--paths")
    ens = load_ensemble(ens_path)
    fresh = load_ensemble(_need(str(_fresh_path(ens_path)), "simulate", "--paths"))
    model = pipeline.build_model(cfg)
    m = args.m if args.m is not None else cfg.m_chain_points[0]
    res = pipeline.solve_pair(cfg, model, grid, ens, fresh, grid.size, m, keep=True)
    if args.chain_out:
        chain = res.chain
        chain.provenance["fresh_errors"] = [list(map(float, e)) for e in
                                            zip(res.report.chain_errors, res.report.chain_error_se)]
        save_chain(chain, args.chain_out)
    rec = res.full_record(cfg) if cfg.output_format == "json" else res.record(cfg)
    emit(render([rec], cfg.output_format), cfg.out)
    return 0


def cmd_bounds(args) -> int:
    cfg = config_from_args(args)
    chain = load_chain(_need(args.chain, "solve", "--chain"))
    model = pipeline.build_model(cfg)
    errs = chain.provenance.get("fresh_errors") or chain.quant_errors
    g = chain.hidden_grid
    rep = error_report(model, g.size, g.distortion_l2, g.distortion_se or 0.0, [tuple(e) for e in errs])
    emit(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n", cfg.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--format", choices=["csv", "json"])
    common.add_argument("--jobs", type=int)
    common.add_argument("--timings", action="store_true", help="fill runtime_s (output no longer byte-stable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qstop", description="Quantized optimal stopping under partial observation")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="full pipeline for every (N, M) pair").set_defaults(fn=cmd_run)
    sub.add_parser("table", parents=[common], help="sweep and print a value table").set_defaults(fn=cmd_table)
    q = sub.add_parser("quantize-measure", parents=[common], help="quantize the hidden reference measure")
    q.add_argument("-N", "--n", type=int, dest="n")
    q.set_defaults(fn=cmd_quantize)
    s = sub.add_parser("simulate", parents=[common], help="simulate filter paths on a hidden grid")
    s.add_argument("--grid")
    s.set_defaults(fn=cmd_simulate)
    v = sub.add_parser("solve", parents=[common], help="quantize the chain and run the DP")
    v.add_argument("--grid")
    v.add_argument("--paths")
    v.add_argument("-M", "--m", type=int, dest="m")
    v.add_argument("--chain-out")
    v.set_defaults(fn=cmd_solve)
    b = sub.add_parser("bounds", parents=[common], help="error report for a solved chain")
    b.add_argument("--chain")
    b.set_defaults(fn=cmd_bounds)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
