"""Command line: ``probspec run | reference | spectrum-from-truth | compare | plot``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import OUTPUT_ROOT_ENV, default_output_root, load_config
from .errors import ConfigError, ContractError, DimensionError, NumericalError

__all__ = ["main", "parse_steps"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("probspec")


def parse_steps(text: str) -> range:
    """``"N"`` or ``"A:B"`` (inclusive) as a range of transition indices; ``"3:2"`` is empty."""
    try:
        if ":" in text:
            a, b = text.split(":", 1)
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(text)
    except ValueError:
        raise ConfigError(f"'--steps': expected N or A:B, got {text!r}") from None
    if lo < 1:
        raise ConfigError(f"'--steps': transitions are numbered from 1, got {lo}")
    return range(lo, hi + 1)


def _out_dir(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.out:
        return cfg.resolve(cfg.out)
    return default_output_root() / cfg.name


def _cmd_run(args) -> int:
    from .driver import execute_run

    cfg, raw = load_config(args.config)
    if args.spectrum_file:
        if cfg.spectrum.mode == "adaptive":
            raise ConfigError("'--spectrum-file': not compatible with spectrum.mode = adaptive")
        cfg = replace(cfg, spectrum=replace(cfg.spectrum, mode="file", file=str(Path(args.spectrum_file).resolve())))
        if not cfg.resolve(cfg.spectrum.file).is_file():
            raise ConfigError(f"'--spectrum-file': file not found: {args.spectrum_file}")
    out = _out_dir(args, cfg)
    outcome = execute_run(cfg, raw, out, seed=args.seed, overwrite=args.overwrite)
    print(outcome.message)
    return outcome.status


def _cmd_reference(args) -> int:
    from .driver import execute_reference

    cfg, raw = load_config(args.config)
    out = _out_dir(args, cfg)
    store = execute_reference(cfg, raw, out, overwrite=args.overwrite)
    print(f"reference with {len(store.steps())} snapshots written to {store.root}")
    return EXIT_OK


def _cmd_spectrum(args) -> int:
    from .driver import spectra_from_reference

    n = spectra_from_reference(Path(args.reference), parse_steps(args.steps), Path(args.out))
    print(f"{n} spectra written to {args.out}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    from .driver import compare_runs

    summary = compare_runs(Path(args.run), args.reference, Path(args.out))
    frac = summary["calibration_fraction"]
    worst = max((r["rel_l2"] for r in summary["per_step"]), default=0.0)
    print(f"max relative L2 {worst:.3e}; calibration fraction "
          + ("n/a" if frac is None else f"{frac:.4f}"))
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .plotting import plot_run

    plot_run(Path(args.run), args.kind, Path(args.out), step=args.step)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="probspec", description=__doc__.splitlines()[0],
                                epilog=f"Default output root: ${OUTPUT_ROOT_ENV} or ./runs")
    p.add_argument("-v", "--verbose", action="store_true", help="log optimizer warnings")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a simulation from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="run directory")
    r.add_argument("--seed", type=int, help="overrides run.seed")
    r.add_argument("--spectrum-file", help="per-step spectra table or single spectrum (fixed spectra)")
    r.add_argument("--overwrite", action="store_true")
    r.set_defaults(func=_cmd_run)

    ref = sub.add_parser("reference", help="store the config's reference solution as a trajectory")
    ref.add_argument("--config", required=True)
    ref.add_argument("--out", help="output directory")
    ref.add_argument("--overwrite", action="store_true")
    ref.set_defaults(func=_cmd_reference)

    s = sub.add_parser("spectrum-from-truth", help="per-transition spectra of a stored reference")
    s.add_argument("--reference", required=True)
    s.add_argument("--steps", required=True, help="N or A:B (inclusive)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_spectrum)

    c = sub.add_parser("compare", help="residuals of a run against a reference")
    c.add_argument("--run", required=True)
    c.add_argument("--reference", required=True, help="run or reference directory, or 'analytic'")
    c.add_argument("--out", required=True, help="CSV path; the summary goes next to it as .json")
    c.set_defaults(func=_cmd_compare)

    pl = sub.add_parser("plot", help="render an SVG figure from a stored run")
    pl.add_argument("--run", required=True)
    pl.add_argument("--kind", required=True, choices=["step", "evolution", "spectra", "calibration"])
    pl.add_argument("--out", required=True)
    pl.add_argument("--step", type=int, help="snapshot for kind=step (default: last)")
    pl.set_defaults(func=_cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except (ConfigError, ContractError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
