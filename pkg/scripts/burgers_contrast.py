"""Burgers: adaptive spectrum versus spectra fitted to the RK4 reference.

Usage::

    python3 scripts/burgers_contrast.py --out runs/burgers_contrast [--steps 80]

Runs both bundled Burgers configs, writes their per-step relative errors to
``errors.csv`` and renders ``errors.svg`` plus the spectra of both runs.
"""
from __future__ import annotations

import argparse
import csv
import re
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

import probspec  # noqa: E402
from probspec.driver import execute_run  # noqa: E402
from probspec.errors import CoverageWarning  # noqa: E402
from probspec.plotting import plot_run  # noqa: E402

CONFIGS = Path(probspec.__file__).parent / "configs"


def load(name: str, steps: int):
    text = re.sub(r"(?m)^run\.steps = \d+$", f"run.steps = {steps}", (CONFIGS / name).read_text())
    return probspec.parse_config_text(text, CONFIGS), text.encode()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/burgers_contrast")
    ap.add_argument("--steps", type=int, default=80)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    warnings.simplefilter("ignore", CoverageWarning)

    errors = {}
    for name in ("burgers_adaptive", "burgers_truth_spectrum"):
        cfg, raw = load(f"{name}.cfg", args.steps)
        outcome = execute_run(cfg, raw, out / name, overwrite=True,
                              on_step=lambda r: print(f"{name} step {r.step}", flush=True))
        rows = outcome.store.read_metrics()
        errors[name] = np.array([float(r["rel_l2_error_vs_reference"]) for r in rows])
        plot_run(out / name, "spectra", out / f"{name}_spectra.svg")
        plot_run(out / name, "step", out / f"{name}_last_step.svg")

    t = 0.003 * np.arange(1, args.steps + 1)
    with open(out / "errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time", "adaptive", "truth_spectrum"])
        for i in range(args.steps):
            w.writerow([i + 1, t[i], errors["burgers_adaptive"][i], errors["burgers_truth_spectrum"][i]])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.semilogy(t, errors["burgers_adaptive"], label="adaptive spectrum")
    ax.semilogy(t, errors["burgers_truth_spectrum"], label="spectra from the reference")
    ax.axhline(1.0, color="gray", ls=":", lw=1)
    ax.set_xlabel("t")
    ax.set_ylabel("relative L2 error")
    ax.legend(fontsize=8)
    with matplotlib.rc_context({"svg.hashsalt": "probspec"}):
        fig.savefig(out / "errors.svg", metadata={"Date": None})
    above = np.nonzero(errors["burgers_adaptive"] > 1.0)[0]
    if above.size:
        h = int(above[0]) + 1
        print(f"adaptive error first exceeds 1.0 at step {h}; "
              f"truth-spectrum error there {errors['burgers_truth_spectrum'][h - 1]:.4f}")
    print(f"max truth-spectrum error {errors['burgers_truth_spectrum'].max():.4f}")


if __name__ == "__main__":
    main()
