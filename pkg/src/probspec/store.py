"""On-disk trajectories: manifest, per-step snapshots and a metrics table.

Layout of a run directory::

    manifest.json          config hash, seed, code version, kind, grid size
    config.cfg             the configuration, byte for byte
    steps/step_00000.json  scalar step data (time, telemetry, lineage)
    steps/step_00000.csv   modes: u and v as re/im column pairs, g, mode std
    steps/step_00000_spectrum.csv
    metrics.csv
    truth.csv              reference field on the grid (when available)

Every file is written to a temporary name and renamed into place, so readers
never see partial files.  Floats use 17 significant digits.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError
from .prior import SimState
from .spectrum import read_spectrum_csv, write_spectrum_csv

__all__ = ["TrajectoryStore", "StoreError", "METRIC_COLUMNS", "fmt", "atomic_write"]

METRIC_COLUMNS = ["step", "time", "rel_l2_error_vs_reference", "total_power", "optimizer_iters",
                  "grad_norm", "converged"]


class StoreError(OSError):
    """A run directory is missing, incomplete or inconsistent."""


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    return format(float(x), ".17g")


def atomic_write(path: Path, data: str | bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: list[str], rows, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        for line in comment.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except OSError as exc:
        raise StoreError(f"cannot read {path}: {exc.strerror}") from None
    rows = list(csv.reader(lines))
    if not rows:
        raise StoreError(f"{path} has no header row")
    return rows[0], rows[1:]


class TrajectoryStore:
    """A run directory; see the module docstring for the layout."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    # -- creation ----------------------------------------------------------
    @classmethod
    def create(cls, root, config_raw: bytes, *, seed: int, version: str, kind: str = "trajectory",
               config_sha256: str, extra: dict | None = None, overwrite: bool = False) -> "TrajectoryStore":
        store = cls(root)
        if (store.root / "manifest.json").exists() and not overwrite:
            raise StoreError(f"{store.root} already holds a run (use --overwrite to replace it)")
        if overwrite and store.root.exists():
            for p in sorted(store.root.glob("steps/*")) + [store.root / "metrics.csv", store.root / "truth.csv"]:
                if p.is_file():
                    p.unlink()
        store.root.mkdir(parents=True, exist_ok=True)
        manifest = {"kind": kind, "config_sha256": config_sha256, "seed": int(seed), "version": version}
        manifest.update(extra or {})
        atomic_write(store.root / "config.cfg", config_raw)
        atomic_write(store.root / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return store

    @property
    def manifest(self) -> dict:
        p = self.root / "manifest.json"
        try:
            return json.loads(p.read_text(encoding="utf-8"))
        except OSError:
            raise StoreError(f"{self.root} is not a run directory (no manifest.json)") from None
        except json.JSONDecodeError as exc:
            raise StoreError(f"{p} is not valid JSON: {exc}") from None

    def verify(self):
        """Check the stored config against the manifest hash and that steps are contiguous."""
        import hashlib

        m = self.manifest
        digest = hashlib.sha256((self.root / "config.cfg").read_bytes()).hexdigest()
        if digest != m.get("config_sha256"):
            raise StoreError(f"{self.root}: config.cfg does not match the manifest hash")
        steps = self.steps()
        if steps != list(range(len(steps))):
            raise StoreError(f"{self.root}: step files are not contiguous: {steps}")

    # -- snapshots --------------------------------------------------------------
    def _step_base(self, step: int) -> Path:
        return self.root / "steps" / f"step_{int(step):05d}"

    def write_state(self, step: int, state: SimState, g: np.ndarray, info: dict,
                    mode_std: np.ndarray | None = None):
        base = self._step_base(step)
        u, v = state.u, state.v
        o = u.shape[1] - 1
        header = ["k"]
        header += [f"u{c}_{p}" for c in range(o + 1) for p in ("re", "im")]
        header += [f"v{c}_{p}" for c in range(1, o + 1) for p in ("re", "im")]
        header += ["g_re", "g_im", "mode_std"]
        std = np.full(u.shape[0], np.nan) if mode_std is None else mode_std
        rows = []
        for k in range(u.shape[0]):
            r = [k]
            for c in range(o + 1):
                r += [u[k, c].real, u[k, c].imag]
            for c in range(o):
                r += [v[k, c].real, v[k, c].imag]
            r += [g[k].real, g[k].imag, std[k]]
            rows.append(r)
        comment = ("half-spectrum modes k = 0..K/2 on the unit periodic domain; u<c> is the c-th spatial "
                   "derivative, v<c> its time derivative, g the pde right-hand side")
        atomic_write(base.with_suffix(".csv"), _csv_text(header, rows, comment))
        write_spectrum_csv(Path(f"{base}_spectrum.csv"), state.spectrum)
        meta = {"step": int(step), "time": float(state.time), "lineage": state.lineage}
        meta.update(info)
        atomic_write(base.with_suffix(".json"), json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n")

    def steps(self) -> list[int]:
        d = self.root / "steps"
        if not d.is_dir():
            return []
        return sorted(int(p.stem.split("_")[1]) for p in d.glob("step_*.json"))

    def read_step(self, step: int) -> tuple[SimState, np.ndarray, np.ndarray, dict]:
        """Returns ``(state, g, mode_std, info)``."""
        base = self._step_base(step)
        try:
            info = json.loads(base.with_suffix(".json").read_text(encoding="utf-8"))
        except OSError:
            raise StoreError(f"{self.root}: step {step} is missing") from None
        header, rows = _read_csv(base.with_suffix(".csv"))
        a = np.array(rows, dtype=float)
        col = {h: i for i, h in enumerate(header)}
        o = sum(1 for h in header if h.startswith("u") and h.endswith("_re")) - 1
        u = np.stack([a[:, col[f"u{c}_re"]] + 1j * a[:, col[f"u{c}_im"]] for c in range(o + 1)], axis=1)
        v = np.stack([a[:, col[f"v{c}_re"]] + 1j * a[:, col[f"v{c}_im"]] for c in range(1, o + 1)], axis=1) \
            if o else np.zeros((a.shape[0], 0), dtype=complex)
        g = a[:, col["g_re"]] + 1j * a[:, col["g_im"]]
        spec, _, _ = read_spectrum_csv(Path(f"{base}_spectrum.csv"))
        state = SimState(float(info["time"]), u, v, spec, lineage=info.get("lineage", ""))
        return state, g, a[:, col["mode_std"]], info

    # -- tables ----------------------------------------------------------------
    def write_metrics(self, rows: list[dict]):
        text = _csv_text(METRIC_COLUMNS, [[r.get(c) for c in METRIC_COLUMNS] for r in rows],
                         "time dimensionless; errors relative L2 on the grid; total_power = sum_k |sigma(k)|^2, "
                         "k = 1..K/2")
        atomic_write(self.root / "metrics.csv", text)

    def read_metrics(self) -> list[dict]:
        p = self.root / "metrics.csv"
        if not p.exists():
            raise StoreError(f"{self.root}: metrics.csv is missing")
        header, rows = _read_csv(p)
        return [dict(zip(header, r)) for r in rows]

    def write_truth(self, times, values: np.ndarray):
        """Reference field on the ``K``-point grid, one row per step and grid point."""
        values = np.asarray(values, dtype=float)
        K = values.shape[1]
        rows = [[j, times[j], i / K, values[j, i]] for j in range(values.shape[0]) for i in range(K)]
        atomic_write(self.root / "truth.csv",
                     _csv_text(["step", "time", "x", "value"], rows, "x in [0, 1) on the unit periodic domain"))

    def read_truth(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.root / "truth.csv"
        if not p.exists():
            raise StoreError(f"{self.root}: truth.csv is missing")
        _, rows = _read_csv(p)
        a = np.array(rows, dtype=float)
        if a.size == 0:
            return np.zeros(0), np.zeros((0, 0))
        steps = a[:, 0].astype(int)
        n = steps.max() + 1
        K = int(np.sum(steps == 0))
        if a.shape[0] != n * K:
            raise DimensionError(f"{p}: ragged truth table")
        return a[::K, 1], a[:, 3].reshape(n, K)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else repr(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if obj is None or isinstance(obj, (str, int, bool)):
        return obj
    raise ContractError(f"cannot serialise {type(obj).__name__}")
