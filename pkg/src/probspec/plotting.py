"""SVG figures rendered from a stored run.

Output is deterministic: a fixed SVG hash salt and no date metadata.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .baselines import trapezoidal_step  # noqa: E402
from .driver import _store_config, build_pde, pointwise_std  # noqa: E402
from .grid import synthesize  # noqa: E402
from .store import StoreError, TrajectoryStore  # noqa: E402

__all__ = ["PLOT_KINDS", "plot_run"]

PLOT_KINDS = ("step", "evolution", "spectra", "calibration")


def _load(store: TrajectoryStore):
    metrics = store.read_metrics()
    if not metrics:
        raise StoreError(f"{store.root}: metrics.csv has no rows")
    K = int(store.manifest["K"])
    steps = store.steps()
    if not steps:
        raise StoreError(f"{store.root}: no step snapshots")
    data = []
    for j in steps:
        st, _, ms, info = store.read_step(j)
        std = pointwise_std(ms, K) if np.all(np.isfinite(ms)) else np.nan
        data.append((st, synthesize(st.u[:, 0], K), std))
    truth = store.read_truth() if (store.root / "truth.csv").exists() else None
    return K, data, truth


def _save(fig, out: Path):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "probspec", "svg.fonttype": "path"}):
        fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)


def _plot_step(store, K, data, truth, step):
    j = len(data) - 1 if step is None else step
    if not 0 <= j < len(data):
        raise StoreError(f"{store.root}: step {j} not stored")
    x = np.arange(K) / K
    st, mean, std = data[j]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if truth is not None:
        ax.plot(x, truth[1][j], color="tab:green", label="ground truth")
    if j > 0 and truth is not None:
        pde = build_pde(_store_config(store))
        base = trapezoidal_step(truth[1][j - 1], pde, st.time - data[j - 1][0].time)
        ax.plot(x, base, color="black", lw=1, label="trapezoidal rule")
    ax.plot(x, mean, color="tab:blue", label="posterior mean")
    if np.isfinite(std):
        ax.fill_between(x, mean - 2 * std, mean + 2 * std, color="tab:blue", alpha=0.25, lw=0,
                        label="±2 std")
    ax.set_xlabel("x")
    ax.set_ylabel("s(x)")
    ax.set_title(f"step {j}, t = {st.time:.4g}")
    ax.legend(fontsize=8)
    return fig


def _plot_evolution(store, K, data, truth, step):
    x = np.arange(K) / K
    fig, ax = plt.subplots(figsize=(6, 3.5))
    cmap = plt.get_cmap("viridis")
    n = len(data)
    for j, (st, mean, _) in enumerate(data):
        ax.plot(x, mean, color=cmap(j / max(n - 1, 1)), lw=1)
    sm = plt.cm.ScalarMappable(cmap=cmap, norm=plt.Normalize(data[0][0].time, data[-1][0].time))
    fig.colorbar(sm, ax=ax, label="t")
    ax.set_xlabel("x")
    ax.set_ylabel("posterior mean")
    return fig


def _plot_spectra(store, K, data, truth, step):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    cmap = plt.get_cmap("viridis")
    n = len(data)
    for j, (st, _, _) in enumerate(data):
        spec = st.spectrum
        k = np.exp(spec.l_grid)
        ax.loglog(k, np.exp(2 * spec.tau), color=cmap(j / max(n - 1, 1)), lw=1)
    ax.axvline(K / 2, color="black", ls="--", lw=1, label="largest harmonic K/2")
    ax.set_xlabel("|k|")
    ax.set_ylabel("|σ(k)|²")
    ax.legend(fontsize=8)
    return fig


def _plot_calibration(store, K, data, truth, step):
    if truth is None:
        raise StoreError(f"{store.root}: calibration plot needs truth.csv")
    t = np.array([d[0].time for d in data])
    res = np.array([np.max(np.abs(d[1] - truth[1][j])) for j, d in enumerate(data)])
    std = np.array([d[2] for d in data])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(t, res, "o-", color="tab:red", label="max |mean - truth|")
    ax.plot(t, 3 * std, "--", color="tab:blue", label="3 × posterior std")
    ax.set_xlabel("t")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    return fig


_KINDS = {"step": _plot_step, "evolution": _plot_evolution, "spectra": _plot_spectra,
          "calibration": _plot_calibration}


def plot_run(run_dir: Path, kind: str, out: Path, step: int | None = None) -> Path:
    """Render one figure of a stored run to ``out`` (SVG)."""
    if kind not in _KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {', '.join(PLOT_KINDS)}")
    store = TrajectoryStore(run_dir)
    K, data, truth = _load(store)
    plt.rcdefaults()
    fig = _KINDS[kind](store, K, data, truth, step)
    _save(fig, out)
    return Path(out)
