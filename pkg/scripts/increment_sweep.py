"""Sweep the spectrum increment scale for the adaptive diffusion run.

Usage::

    python3 scripts/increment_sweep.py [--sigma-tau 0.5 1 2 4]

For each ``increment.sigma_tau`` it reruns the bundled adaptive diffusion
config and counts the non-increasing steps of the total inferred power.
"""
from __future__ import annotations

import argparse
import re
import tempfile
import warnings
from pathlib import Path

import numpy as np

import probspec
from probspec.driver import execute_run
from probspec.errors import CoverageWarning

CONFIGS = Path(probspec.__file__).parent / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sigma-tau", type=float, nargs="+", default=[0.5, 1.0, 2.0, 4.0])
    args = ap.parse_args()
    warnings.simplefilter("ignore", CoverageWarning)
    base = (CONFIGS / "diffusion_adaptive.cfg").read_text()
    print("sigma_tau, non_increasing, max_rel_error")
    with tempfile.TemporaryDirectory() as tmp:
        for s in args.sigma_tau:
            text = re.sub(r"(?m)^increment\.sigma_tau = .*$", f"increment.sigma_tau = {s!r}", base)
            cfg = probspec.parse_config_text(text, CONFIGS)
            outcome = execute_run(cfg, text.encode(), Path(tmp) / f"s{s}")
            rows = outcome.store.read_metrics()
            power = np.array([float(r["total_power"]) for r in rows])
            err = max(float(r["rel_l2_error_vs_reference"]) for r in rows)
            print(f"{s:g}, {int(np.sum(np.diff(power) <= 0))}/{power.size - 1}, {err:.3e}", flush=True)


if __name__ == "__main__":
    main()
