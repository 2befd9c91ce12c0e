"""Wall time of one fixed-spectrum diffusion step as the grid is refined.

Usage::

    python3 scripts/step_scaling.py [--Ks 64 128 256 512 1024] [--iters 10]

The optimizer runs a fixed number of unpreconditioned iterations so the work
per step is comparable across grids.  Prints the best of ``--repeats`` timings.
"""
from __future__ import annotations

import argparse
import time
import warnings
from dataclasses import replace
from pathlib import Path

import probspec
from probspec.driver import build_initial, build_pde, step_options
from probspec.errors import CoverageWarning
from probspec.filter import solve_step_fixed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--Ks", type=int, nargs="+", default=[64, 128, 256, 512, 1024])
    ap.add_argument("--iters", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()
    warnings.simplefilter("ignore", CoverageWarning)
    cfg, _ = probspec.load_config(Path(probspec.__file__).parent / "configs" / "diffusion_fixed.cfg")
    pde = build_pde(cfg)
    prev = None
    print("K, seconds, iterations, factor")
    for K in args.Ks:
        c = replace(cfg, grid=replace(cfg.grid, K=K))
        init = build_initial(c, pde)
        opts = replace(step_options(c), max_iter=args.iters, gtol=1e-300, ftol=0.0, precondition=False)
        solve_step_fixed(init, pde, c.delta, opts)
        best = float("inf")
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            res = solve_step_fixed(init, pde, c.delta, opts)
            best = min(best, time.perf_counter() - t0)
        factor = "" if prev is None else f"{best / prev:.2f}"
        print(f"{K}, {best:.5f}, {res.iterations}, {factor}")
        prev = best


if __name__ == "__main__":
    main()
