"""Sweep the water-tank value over (N, M) for several seeds and print a median table.

    python3 scripts/reproduce_table1.py --seeds 0 1 2 3 4 --out table1.csv
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import replace

import numpy as np

from qstop.config import RunConfig
from qstop.pipeline import CSV_COLUMNS, run_sweep

# published reference values, keyed by (N, M)
REFERENCE = {(12, 125): 0.9323, (12, 10000): 0.9416, (25, 10000): 0.9578, (50, 10000): 0.9686,
             (100, 10000): 0.9771}


def protocol_config(seed: int, n_values, m_values, n_paths: int) -> RunConfig:
    return replace(RunConfig(), seed=seed, n_hidden_points=tuple(n_values), m_chain_points=tuple(m_values),
                   n_paths=n_paths, timings=True)


def cells_for(n_values, m_values, reference_only: bool):
    if reference_only:
        return [c for c in REFERENCE if c[0] in n_values and c[1] in m_values]
    return [(n, m) for n in n_values for m in m_values]


def run(seeds, n_values, m_values, n_paths, reference_only=True, progress=None):
    """Returns {(N, M): [record per seed]} for the requested cells."""
    wanted = set(cells_for(n_values, m_values, reference_only))
    out = {c: [] for c in sorted(wanted)}
    for seed in seeds:
        for n in n_values:
            ms = sorted({m for (nn, m) in wanted if nn == n})
            if not ms:
                continue
            cfg = protocol_config(seed, [n], ms, n_paths)
            t0 = time.perf_counter()
            for res in run_sweep(cfg):
                if isinstance(res, Exception):
                    raise res
                out[(res.n, res.m)].append(res.record(cfg))
            if progress:
                progress(f"seed={seed} N={n} M={ms} done in {time.perf_counter() - t0:.0f}s")
    return out


def median_table(results) -> list[tuple[int, int, float, float | None]]:
    return [(n, m, float(np.median([float(r["value"]) for r in recs])), REFERENCE.get((n, m)))
            for (n, m), recs in sorted(results.items())]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--n", type=int, nargs="+", default=[12, 25, 50, 100])
    p.add_argument("--m", type=int, nargs="+", default=[125, 10000])
    p.add_argument("--n-paths", type=int, default=50_000)
    p.add_argument("--all-cells", action="store_true", help="every (N, M) pair, not just the reference cells")
    p.add_argument("--out", help="CSV with one row per (cell, seed)")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    results = run(args.seeds, args.n, args.m, args.n_paths, not args.all_cells, progress=logging.info)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            for recs in results.values():
                w.writerows(recs)
    sys.stdout.write(f"{'N':>4} {'M':>6} {'median':>8} {'reference':>9} {'diff':>8}\n")
    for n, m, med, ref in median_table(results):
        ref_s = f"{ref:9.4f}" if ref is not None else " " * 9
        diff = f"{med - ref:+8.4f}" if ref is not None else ""
        sys.stdout.write(f"{n:>4} {m:>6} {med:8.4f} {ref_s} {diff}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
