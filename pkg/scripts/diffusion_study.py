"""Diffusion experiments: one-step errors, calibration across step sizes, spectrum trend.

Usage::

    python3 scripts/diffusion_study.py --out runs/diffusion_study

Writes ``one_step.csv``, ``calibration.csv`` and ``power.csv`` and the SVG
figures of the bundled adaptive run into ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import warnings
from pathlib import Path

import numpy as np

import probspec
from probspec.baselines import analytic_diffusion, trapezoidal_step
from probspec.driver import build_initial, build_pde, execute_run, step_options
from probspec.errors import CoverageWarning
from probspec.filter import empirical_bayes_posterior, solve_step_adaptive, solve_step_fixed
from probspec.grid import synthesize
from probspec.plotting import plot_run

CONFIGS = Path(probspec.__file__).parent / "configs"


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/diffusion_study")
    ap.add_argument("--deltas", type=float, nargs="+", default=[0.01, 0.02, 0.04, 0.08])
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    warnings.simplefilter("ignore", CoverageWarning)

    fcfg, _ = probspec.load_config(CONFIGS / "diffusion_fixed.cfg")
    acfg, araw = probspec.load_config(CONFIGS / "diffusion_adaptive.cfg")
    pde = build_pde(fcfg)
    init = build_initial(fcfg, pde)
    K, nu = fcfg.grid.K, fcfg.pde.nu
    v0 = synthesize(init.u[:, 0], K)

    one_step, calib = [], []
    for delta in args.deltas:
        truth = synthesize(analytic_diffusion(init.u[:, 0], nu, delta), K)
        err = lambda v: float(np.linalg.norm(v - truth) / np.linalg.norm(truth))  # noqa: E731
        fixed = solve_step_fixed(init, pde, delta, step_options(fcfg))
        adaptive = solve_step_adaptive(init, pde, delta, step_options(acfg))
        trap = trapezoidal_step(v0, pde, delta)
        one_step.append([delta, err(synthesize(fixed.state.u[:, 0], K)),
                         err(synthesize(adaptive.state.u[:, 0], K)), err(trap)])
        eb = empirical_bayes_posterior(init, pde, delta, adaptive.state.spectrum.tau, opts=step_options(acfg))
        resid = np.abs(truth - eb.mean_field)
        calib.append([delta, float(np.mean(resid <= 3 * eb.std_field)), float(eb.std_field.mean()),
                      float(resid.max())])
        print(f"delta={delta:g}: errors fixed {one_step[-1][1]:.3e} adaptive {one_step[-1][2]:.3e} "
              f"trapezoidal {one_step[-1][3]:.3e}; within 3 std {calib[-1][1]:.4f}")
    write_csv(out / "one_step.csv", ["delta", "fixed", "adaptive", "trapezoidal"], one_step)
    write_csv(out / "calibration.csv", ["delta", "fraction_within_3std", "posterior_std", "max_abs_residual"],
              calib)

    outcome = execute_run(acfg, araw, out / "adaptive_run", overwrite=True)
    rows = outcome.store.read_metrics()
    write_csv(out / "power.csv", ["step", "time", "total_power"],
              [[r["step"], r["time"], r["total_power"]] for r in rows])
    power = np.array([float(r["total_power"]) for r in rows])
    print(f"adaptive run: {int(np.sum(np.diff(power) <= 0))}/{power.size - 1} non-increasing power steps")
    for kind in ("step", "evolution", "spectra", "calibration"):
        plot_run(out / "adaptive_run", kind, out / f"adaptive_{kind}.svg")


if __name__ == "__main__":
    main()
