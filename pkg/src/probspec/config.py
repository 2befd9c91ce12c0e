"""Run configuration: flat ``section.key = value`` text files with a schema.

Example::

    # diffusion with a fixed |k|^-6 spectrum
    grid.K = 128
    pde.name = diffusion
    pde.nu = 0.01
    run.steps = 10
    run.delta = 0.04

Values are Python literals (numbers, strings, lists, booleans); bare words
are read as strings.  Unknown keys, wrong types and failed checks raise
:class:`ConfigError` naming the key and line.
"""
from __future__ import annotations

import ast
import hashlib
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .spectrum import SpectrumHyper

__all__ = [
    "GridConfig",
    "PdeConfig",
    "SpectrumConfig",
    "SolverConfig",
    "InitialConfig",
    "ReferenceConfig",
    "RunConfig",
    "parse_config_text",
    "load_config",
    "config_hash",
    "default_output_root",
    "OUTPUT_ROOT_ENV",
]

OUTPUT_ROOT_ENV = "PROBSPEC_OUTPUT_ROOT"


@dataclass(frozen=True)
class GridConfig:
    K: int = 128


@dataclass(frozen=True)
class PdeConfig:
    name: str = "diffusion"
    nu: float = 0.01
    order: int = 2


@dataclass(frozen=True)
class SpectrumConfig:
    """Spectrum source for the run.

    ``mode`` is ``fixed`` (power law), ``file`` (single spectrum or per-step
    table written by ``spectrum-from-truth``), ``truth`` (per-transition MAP
    spectra of the reference, computed on the fly) or ``adaptive``.
    """

    mode: str = "fixed"
    exponent: float = -6.0
    amplitude: float = 1.0
    L: int = 500
    n_max: int = 100
    file: str = ""
    truth_coupled: bool = False


@dataclass(frozen=True)
class SolverConfig:
    gtol: float = 1e-9
    max_iter: int = 500
    memory: int = 20
    ftol: float = 1e-13
    threshold: float = 1e-12
    v_mode: str = "sample"
    rebase_every: int = 50
    max_step: float = 20.0


@dataclass(frozen=True)
class InitialConfig:
    profile: str = "gaussian"
    amplitude: float = 1.0
    width: float = 0.05
    center: float = 0.5


@dataclass(frozen=True)
class ReferenceConfig:
    """Ground truth: ``analytic`` (diffusion), ``rk4`` (Burgers) or ``none``."""

    kind: str = "analytic"
    K_ref: int = 1024
    dt_divisor: int = 100


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    seed: int = 0
    steps: int = 10
    delta: float = 0.04
    deltas: tuple = ()
    policy: str = "abort"
    out: str = ""
    grid: GridConfig = field(default_factory=GridConfig)
    pde: PdeConfig = field(default_factory=PdeConfig)
    spectrum: SpectrumConfig = field(default_factory=SpectrumConfig)
    increment: SpectrumHyper = field(default_factory=lambda: SpectrumHyper(
        sigma_tau=1.0, offset=0.0, slope=0.0, offset_std=1.0, slope_std=1.0))
    truth: SpectrumHyper = field(default_factory=lambda: SpectrumHyper(
        sigma_tau=1.0, offset=0.0, slope=-3.0, offset_std=10.0, slope_std=3.0))
    solver: SolverConfig = field(default_factory=SolverConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    base_dir: str = "."

    @property
    def schedule(self) -> list[float]:
        """Time steps ``delta_1 .. delta_N``."""
        if self.deltas:
            return [float(d) for d in self.deltas]
        return [float(self.delta)] * int(self.steps)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


_SECTIONS = {
    "grid": GridConfig,
    "pde": PdeConfig,
    "spectrum": SpectrumConfig,
    "increment": SpectrumHyper,
    "truth": SpectrumHyper,
    "solver": SolverConfig,
    "initial": InitialConfig,
    "reference": ReferenceConfig,
}
_RUN_KEYS = {"name", "seed", "steps", "delta", "deltas", "policy", "out"}

_CHOICES = {
    "pde.name": ("diffusion", "burgers", "static"),
    "spectrum.mode": ("fixed", "file", "truth", "adaptive"),
    "solver.v_mode": ("sample", "mean"),
    "initial.profile": ("gaussian",),
    "reference.kind": ("analytic", "rk4", "none"),
    "run.policy": ("abort", "continue"),
}


def _field_types(cls) -> dict[str, Any]:
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}


def _coerce(key: str, raw: Any, want: type, lineno: int):
    where = f"'{key}' (line {lineno})"
    if want is bool:
        if isinstance(raw, bool):
            return raw
        raise ConfigError(f"{where}: expected true/false, got {raw!r}")
    if want is int:
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConfigError(f"{where}: expected an integer, got {raw!r}")
        return raw
    if want is float:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {raw!r}")
        return float(raw)
    if want is str:
        return str(raw)
    if want is tuple:
        if not isinstance(raw, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {raw!r}")
        return tuple(raw)
    return raw


def _literal(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str, base_dir: str | os.PathLike = ".") -> RunConfig:
    """Parse and validate configuration text."""
    top: dict[str, Any] = {}
    sec: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if key in seen:
            raise ConfigError(f"'{key}' (line {lineno}): duplicate key, first set on line {seen[key]}")
        seen[key] = lineno
        parts = key.split(".")
        raw = _literal(value)
        if len(parts) != 2:
            raise ConfigError(f"'{key}' (line {lineno}): keys have the form section.name")
        section, name = parts
        if key in _CHOICES and raw not in _CHOICES[key]:
            raise ConfigError(f"'{key}' (line {lineno}): must be one of {', '.join(_CHOICES[key])}, "
                              f"got {raw!r}")
        if section == "run":
            if name not in _RUN_KEYS:
                raise ConfigError(f"'{key}' (line {lineno}): unknown key")
            top[name] = _coerce(key, raw, _field_types(RunConfig)[name], lineno)
        elif section in _SECTIONS:
            types = _field_types(_SECTIONS[section])
            if name not in types:
                raise ConfigError(f"'{key}' (line {lineno}): unknown key")
            sec[section][name] = _coerce(key, raw, types[name], lineno)
        else:
            raise ConfigError(f"'{key}' (line {lineno}): unknown section '{section}'")
    base = RunConfig()
    built = {}
    for name, cls in _SECTIONS.items():
        try:
            built[name] = replace(getattr(base, name), **sec[name])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"section '{name}': {exc}") from None
    cfg = replace(base, **top, **built, base_dir=str(base_dir))
    _validate(cfg, seen)
    return cfg


def _validate(cfg: RunConfig, seen: dict[str, int]):
    def bad(key, msg):
        line = seen.get(key)
        loc = f"'{key}'" + (f" (line {line})" if line else "")
        raise ConfigError(f"{loc}: {msg}")

    K = cfg.grid.K
    if K < 4 or K % 2:
        bad("grid.K", f"must be an even integer >= 4, got {K}")
    if cfg.steps < 0:
        bad("run.steps", "must be non-negative")
    if any(not d > 0 for d in cfg.schedule):
        bad("run.deltas" if cfg.deltas else "run.delta", "time steps must be positive")
    if cfg.pde.name in ("diffusion", "burgers") and not cfg.pde.nu > 0:
        bad("pde.nu", "must be positive")
    if cfg.pde.name != "static" and cfg.pde.order != 2:
        bad("pde.order", f"{cfg.pde.name} is second order")
    if cfg.spectrum.L < 2:
        bad("spectrum.L", "must be at least 2")
    if cfg.spectrum.n_max < 1:
        bad("spectrum.n_max", "must be at least 1")
    if not cfg.spectrum.amplitude > 0:
        bad("spectrum.amplitude", "must be positive")
    if cfg.spectrum.mode == "file":
        if not cfg.spectrum.file:
            bad("spectrum.file", "required when spectrum.mode = file")
        if not cfg.resolve(cfg.spectrum.file).is_file():
            bad("spectrum.file", f"file not found: {cfg.resolve(cfg.spectrum.file)}")
    if cfg.spectrum.mode == "truth" and cfg.reference.kind == "none":
        bad("reference.kind", "spectrum.mode = truth needs a reference solution")
    if cfg.reference.kind == "analytic" and cfg.pde.name != "diffusion":
        bad("reference.kind", "the analytic reference exists only for diffusion")
    if cfg.reference.kind == "rk4":
        if cfg.pde.name != "burgers":
            bad("reference.kind", "the rk4 reference integrates Burgers only")
        if cfg.reference.K_ref % K or cfg.reference.K_ref < 4 * K:
            bad("reference.K_ref", f"must be a multiple of grid.K with K_ref >= 4K, got {cfg.reference.K_ref}")
        if cfg.reference.dt_divisor < 50:
            bad("reference.dt_divisor", "must be at least 50")
    s = cfg.solver
    if not s.gtol > 0 or s.max_iter < 0 or s.memory < 1 or s.threshold < 0 or s.rebase_every < 0\
            or not s.max_step > 0:
        bad("solver", "invalid solver settings")
    if not cfg.initial.width > 0:
        bad("initial.width", "must be positive")


def load_config(path: str | os.PathLike) -> tuple[RunConfig, bytes]:
    """Read a config file; returns the parsed config and the raw bytes."""
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ConfigError(f"config {p} is not valid UTF-8") from None
    return parse_config_text(text, p.parent), raw


def config_hash(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
