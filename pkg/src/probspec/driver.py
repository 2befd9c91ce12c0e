"""Experiment drivers behind the command line: runs, references, truth spectra, comparisons."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (TruthTransition, analytic_diffusion, reference_burgers,
                        restrict_values, spectrum_from_truth, truth_state)
from .config import RunConfig, config_hash, load_config
from .errors import ConfigError, ContractError, DimensionError, NumericalError
from .filter import (GaussianProfile, StepFailure, StepOptions, StepResult, initial_state_from_profile,
                     run_simulation, total_power)
from .grid import analyze, half_weights, synthesize
from .pde import PdeModel, g_eval, make_pde
from .prior import SimState
from .spectrum import (LogSpectrum, default_l_max, power_law_spectrum, read_spectra_table,
                       read_spectrum_csv, regular_l_grid, write_spectra_table)
from .store import StoreError, TrajectoryStore, atomic_write

__all__ = [
    "RunOutcome",
    "build_pde",
    "build_l_grid",
    "build_initial",
    "step_options",
    "step_times",
    "reference_fields",
    "truth_spectra",
    "execute_run",
    "execute_reference",
    "spectra_from_reference",
    "compare_runs",
    "pointwise_std",
]

log = logging.getLogger(__name__)


def build_pde(cfg: RunConfig) -> PdeModel:
    params = {"nu": cfg.pde.nu} if cfg.pde.name in ("diffusion", "burgers") else {"order": cfg.pde.order}
    return make_pde(cfg.pde.name, params)


def build_l_grid(cfg: RunConfig) -> np.ndarray:
    return regular_l_grid(cfg.spectrum.L, default_l_max(cfg.grid.K, cfg.spectrum.n_max))


def _initial_spectrum(cfg: RunConfig, l_grid) -> LogSpectrum:
    return power_law_spectrum(cfg.spectrum.exponent, cfg.spectrum.amplitude, l_grid)


def build_initial(cfg: RunConfig, pde: PdeModel, spectrum: LogSpectrum | None = None) -> SimState:
    prof = GaussianProfile(cfg.initial.amplitude, cfg.initial.width, cfg.initial.center)
    spec = spectrum if spectrum is not None else _initial_spectrum(cfg, build_l_grid(cfg))
    return initial_state_from_profile(prof, spec, cfg.grid.K, pde.order, pde)


def step_options(cfg: RunConfig) -> StepOptions:
    s = cfg.solver
    return StepOptions(gtol=s.gtol, max_iter=s.max_iter, memory=s.memory, ftol=s.ftol,
                       threshold=s.threshold, n_max=cfg.spectrum.n_max, v_mode=s.v_mode,
                       increment=cfg.increment, rebase_every=s.rebase_every, max_step=s.max_step)


def step_times(cfg: RunConfig) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(cfg.schedule)])


def _profile_values(cfg: RunConfig, K: int) -> np.ndarray:
    prof = GaussianProfile(cfg.initial.amplitude, cfg.initial.width, cfg.initial.center)
    return prof.derivatives(np.arange(K) / K, 0)[0]


@dataclass
class ReferenceFields:
    """Reference field per output time: on the run grid and at the resolution used for ``udot``."""

    times: np.ndarray
    coarse: np.ndarray
    fine: np.ndarray
    meta: dict = field(default_factory=dict)


def reference_fields(cfg: RunConfig, pde: PdeModel) -> ReferenceFields | None:
    """Ground truth at the step times, or ``None`` when the config has no reference."""
    times = step_times(cfg)
    K = cfg.grid.K
    kind = cfg.reference.kind
    if kind == "none":
        return None
    v0 = _profile_values(cfg, K)
    if kind == "analytic":
        c0 = analyze(v0, K)
        vals = np.array([synthesize(analytic_diffusion(c0, cfg.pde.nu, t), K) for t in times])
        return ReferenceFields(times, vals, vals, {"kind": "analytic"})
    delta_min = float(min(cfg.schedule)) if cfg.schedule else 1.0
    sol = reference_burgers(v0, cfg.pde.nu, times, K_ref=cfg.reference.K_ref,
                            dt_ref=delta_min / cfg.reference.dt_divisor, delta=delta_min)
    coarse = np.array([restrict_values(v, K) for v in sol.values])
    return ReferenceFields(times, coarse, sol.values, {"kind": "rk4", **sol.meta})


def _fit_transition(cfg: RunConfig, tr: TruthTransition, delta: float, l_grid, xi_prev=None,
                    tau_prev=None):
    """Truth spectrum of one transition, keeping the better of a cold and a warm start.

    The objective is not convex; a cold start occasionally settles in a poor
    local minimum, so the previous transition's excitations are tried as well.
    With ``spectrum.truth_coupled`` the fit is an increment from ``tau_prev``.
    """
    s = cfg.solver
    kw = dict(n_max=cfg.spectrum.n_max, threshold=s.threshold, gtol=s.gtol, max_iter=s.max_iter,
              memory=s.memory, ftol=s.ftol, rebase_every=s.rebase_every)
    hyper = cfg.truth
    if cfg.spectrum.truth_coupled:
        hyper = cfg.increment
        kw["tau_prev"] = tau_prev if tau_prev is not None else _initial_spectrum(cfg, l_grid).tau
    fit = spectrum_from_truth(tr, delta, hyper, l_grid, cfg.spectrum.amplitude, **kw)
    if xi_prev is not None:
        warm = spectrum_from_truth(tr, delta, hyper, l_grid, cfg.spectrum.amplitude, xi0=xi_prev, **kw)
        if warm.objective < fit.objective:
            fit = warm
    return fit


def truth_spectra(cfg: RunConfig, pde: PdeModel, ref: ReferenceFields, steps=None,
                  on_fit=None, prev_fit=None) -> dict[int, object]:
    """Per-transition MAP spectra of the reference; keys are the step entered.

    ``prev_fit`` is the fit of the transition before the first requested one,
    used as a warm start (and as ``tau_prev`` for coupled fits).  Coupled fits
    without ``prev_fit`` start the chain at step 1; all fitted steps are returned.
    """
    K = cfg.grid.K
    l_grid = build_l_grid(cfg)
    deltas = cfg.schedule
    steps = list(range(1, len(deltas) + 1) if steps is None else steps)
    if cfg.spectrum.truth_coupled and steps and steps[0] > 1 and prev_fit is None:
        steps = list(range(1, steps[-1] + 1))
    out = {}
    states = {}

    def state(j):
        if j not in states:
            states[j] = truth_state(ref.fine[j], pde, K)
        return states[j]

    for i in steps:
        up, dp = state(i - 1)
        u, d = state(i)
        prev = out.get(i - 1, prev_fit if i == steps[0] else None)
        fit = _fit_transition(cfg, TruthTransition(up, dp, u, d), deltas[i - 1], l_grid,
                              None if prev is None else prev.xi,
                              None if prev is None else prev.spectrum.tau)
        if not fit.converged:
            log.warning("truth spectrum for step %d: %s (grad norm %.3e)", i, fit.message, fit.grad_norm)
        out[i] = fit
        if on_fit is not None:
            on_fit(i, fit)
    return out


def pointwise_std(mode_std: np.ndarray, K: int) -> float:
    """Pointwise field std implied by independent per-mode marginals (the same at every x)."""
    ms = np.nan_to_num(np.asarray(mode_std, dtype=float), nan=np.nan)
    return float(np.sqrt(np.sum(half_weights(K) * ms ** 2)))


@dataclass
class RunOutcome:
    status: int
    message: str
    store: TrajectoryStore
    results: list = field(default_factory=list)


def _step_info(res: StepResult, delta: float, mode: str) -> dict:
    return {"delta": delta, "mode": mode, "converged": bool(res.converged), "message": res.message,
            "iterations": res.iterations, "evaluations": res.evaluations, "grad_norm": res.grad_norm,
            "objective": res.objective, "decrease": res.decrease, "seed": res.seed,
            "field_std": res.field_std}


def _rel_err(field_vals: np.ndarray, truth: np.ndarray) -> float:
    n = float(np.linalg.norm(truth))
    return float(np.linalg.norm(field_vals - truth) / n) if n > 0 else float(np.linalg.norm(field_vals))


def _spectra_source(cfg: RunConfig, pde: PdeModel, ref: ReferenceFields | None):
    """Spectrum for each transition in fixed-type modes, as ``spectra(step, prev)``."""
    mode = cfg.spectrum.mode
    if mode == "fixed":
        return None
    if mode == "file":
        path = cfg.resolve(cfg.spectrum.file)
        with open(path) as fh:
            table = any(ln.startswith("step,time") for ln in fh)
        if not table:
            spec, _, _ = read_spectrum_csv(path)
            return lambda i, prev: spec
        l_grid, sigma0, steps, _, taus, _ = read_spectra_table(path)
        lookup = {int(s): t for s, t in zip(steps, taus)}
        missing = [i for i in range(1, len(cfg.schedule) + 1) if i not in lookup]
        if missing:
            raise ConfigError(f"'spectrum.file': {path} has no spectrum for steps {missing[:5]}")
        return lambda i, prev: LogSpectrum(l_grid, lookup[i], sigma0)
    if mode == "truth":
        if ref is None:
            raise ConfigError("'spectrum.mode': truth spectra need a reference")
        cache = {}

        def spectra(i, prev):
            if i not in cache:
                cache.update(truth_spectra(cfg, pde, ref, steps=[i], prev_fit=cache.get(i - 1)))
            return cache[i].spectrum
        return spectra
    return None


def execute_run(cfg: RunConfig, raw: bytes, out: Path, *, seed: int | None = None,
                overwrite: bool = False, on_step=None) -> RunOutcome:
    """Run the configured simulation and persist it."""
    seed = cfg.seed if seed is None else int(seed)
    pde = build_pde(cfg)
    initial = build_initial(cfg, pde)
    ref = reference_fields(cfg, pde)
    store = TrajectoryStore.create(out, raw, seed=seed, version=__version__, config_sha256=config_hash(raw),
                                   extra={"K": cfg.grid.K, "order": pde.order, "pde": pde.name,
                                          "spectrum_mode": cfg.spectrum.mode, "steps": len(cfg.schedule),
                                          "reference": ref.meta if ref is not None else None},
                                   overwrite=overwrite)
    if ref is not None:
        store.write_truth(ref.times, ref.coarse)
    K = cfg.grid.K
    store.write_state(0, initial, g_eval(initial.u, pde, K), {"delta": 0.0, "mode": "initial"})
    mode = "adaptive" if cfg.spectrum.mode == "adaptive" else "fixed"
    deltas = cfg.schedule
    rows: list[dict] = []

    def record(res: StepResult):
        i = res.step
        g = g_eval(res.state.u, pde, K)
        store.write_state(i, res.state, g, _step_info(res, deltas[i - 1], cfg.spectrum.mode), res.mode_std)
        mean = synthesize(res.state.u[:, 0], K)
        err = _rel_err(mean, ref.coarse[i]) if ref is not None else None
        with np.errstate(all="ignore"):
            power = total_power(res.state.spectrum, K)
        rows.append({"step": i, "time": res.state.time, "rel_l2_error_vs_reference": err,
                     "total_power": power, "optimizer_iters": res.iterations,
                     "grad_norm": res.grad_norm, "converged": res.converged})
        store.write_metrics(rows)
        if on_step is not None:
            on_step(res)

    store.write_metrics(rows)
    try:
        results = run_simulation(initial, pde, deltas, mode=mode, opts=step_options(cfg), seed=seed,
                                 spectra=_spectra_source(cfg, pde, ref), on_step=record, policy=cfg.policy)
    except StepFailure as exc:
        return RunOutcome(3, str(exc), store)
    return RunOutcome(0, f"{len(results)} steps written to {store.root}", store, results)


# -- reference trajectories -------------------------------------------------------

def execute_reference(cfg: RunConfig, raw: bytes, out: Path, *, overwrite: bool = False) -> TrajectoryStore:
    """Persist the configured reference as a trajectory store tagged ``kind: reference``."""
    pde = build_pde(cfg)
    ref = reference_fields(cfg, pde)
    if ref is None:
        raise ConfigError("'reference.kind': the config defines no reference")
    store = TrajectoryStore.create(out, raw, seed=cfg.seed, version=__version__, kind="reference",
                                   config_sha256=config_hash(raw),
                                   extra={"K": cfg.grid.K, "order": pde.order, "pde": pde.name,
                                          "steps": len(cfg.schedule), "reference": ref.meta})
    store.write_truth(ref.times, ref.coarse)
    l_grid = build_l_grid(cfg)
    spec = _initial_spectrum(cfg, l_grid)
    for j, t in enumerate(ref.times):
        u, d = truth_state(ref.fine[j], pde, cfg.grid.K)
        st = SimState(float(t), u, d[:, 1:], spec, lineage=f"reference:{j}")
        store.write_state(j, st, d[:, 0], {"delta": float(t - ref.times[j - 1]) if j else 0.0, "mode": "reference"})
    return store


def _store_config(store: TrajectoryStore) -> RunConfig:
    cfg, _ = load_config(store.root / "config.cfg")
    return cfg


def spectra_from_reference(ref_dir: Path, steps: range, out: Path) -> int:
    """Per-transition truth spectra from a stored reference; writes the spectra table."""
    store = TrajectoryStore(ref_dir)
    manifest = store.manifest
    if manifest.get("kind") != "reference":
        raise StoreError(f"{ref_dir} is not a reference trajectory")
    cfg = _store_config(store)
    available = set(store.steps())
    need = sorted({i - 1 for i in steps} | set(steps))
    missing = [i for i in need if i not in available]
    if missing:
        raise StoreError(f"{ref_dir}: reference steps {missing[:5]} are missing")
    l_grid = build_l_grid(cfg)
    rows = []
    cache = {}
    xi_prev = tau_prev = None
    fit_steps = list(steps)
    if cfg.spectrum.truth_coupled and fit_steps:
        # the coupled chain has to start from the initial spectrum
        fit_steps = list(range(1, fit_steps[-1] + 1))
        need = sorted(set(need) | set(range(fit_steps[-1] + 1)))
        missing = [i for i in need if i not in available]
        if missing:
            raise StoreError(f"{ref_dir}: reference steps {missing[:5]} are missing")

    def load(j):
        if j not in cache:
            st, g, _, info = store.read_step(j)
            cache[j] = (st, np.concatenate([g[:, None], st.v], axis=1), info)
        return cache[j]

    wanted = set(steps)
    for i in fit_steps:
        sp, dp, _ = load(i - 1)
        sn, dn, info = load(i)
        fit = _fit_transition(cfg, TruthTransition(sp.u, dp, sn.u, dn), sn.time - sp.time, l_grid,
                              xi_prev, tau_prev)
        xi_prev, tau_prev = fit.xi, fit.spectrum.tau
        if not fit.converged:
            log.warning("truth spectrum for step %d: %s (grad norm %.3e)", i, fit.message, fit.grad_norm)
        if i in wanted:
            rows.append((i, sn.time, fit.spectrum.tau))
    coupled = cfg.spectrum.truth_coupled
    write_spectra_table(out, l_grid, cfg.spectrum.amplitude, rows, cfg.increment if coupled else cfg.truth,
                        {"K": cfg.grid.K, "source": "reference transitions", "coupled": coupled})
    return len(rows)


# -- comparison ---------------------------------------------------------------------

def _run_fields(store: TrajectoryStore):
    K = int(store.manifest["K"])
    steps = store.steps()
    times, means, stds = [], [], []
    for j in steps:
        st, _, ms, _ = store.read_step(j)
        times.append(st.time)
        means.append(synthesize(st.u[:, 0], K))
        stds.append(pointwise_std(ms, K) if np.all(np.isfinite(ms)) else float("nan"))
    return K, np.array(times), np.array(means), np.array(stds)


def compare_runs(run_dir: Path, reference: str, out: Path) -> dict:
    """Residuals of a run against a reference; writes a CSV and a summary JSON next to it."""
    run = TrajectoryStore(run_dir)
    K, times, means, stds = _run_fields(run)
    if reference == "analytic":
        cfg = _store_config(run)
        if cfg.pde.name != "diffusion":
            raise ContractError("an analytic reference exists only for diffusion runs")
        c0 = analyze(_profile_values(cfg, K), K)
        truth = np.array([synthesize(analytic_diffusion(c0, cfg.pde.nu, t), K) for t in times])
    else:
        other = TrajectoryStore(Path(reference))
        if other.manifest.get("kind") == "reference":
            ref_times, truth = other.read_truth()
        else:
            K2, ref_times, truth, _ = _run_fields(other)
            if K2 != K:
                raise DimensionError(f"grid mismatch: run has K={K}, reference has K={K2}")
        if truth.shape[1] != K:
            raise DimensionError(f"grid mismatch: run has K={K}, reference has K={truth.shape[1]}")
        if len(ref_times) < len(times) or not np.allclose(ref_times[:len(times)], times, rtol=1e-12, atol=1e-12):
            raise DimensionError("reference time stamps do not cover the run's steps")
        truth = truth[:len(times)]
    x = np.arange(K) / K
    rows = []
    per_step = []
    inside = total = 0
    for j in range(len(times)):
        res = means[j] - truth[j]
        for i in range(K):
            rows.append([j, x[i], truth[j, i], means[j, i], res[i], stds[j]])
        n = float(np.linalg.norm(truth[j]))
        per_step.append({"step": j, "time": float(times[j]),
                         "rel_l2": float(np.linalg.norm(res) / n) if n > 0 else float(np.linalg.norm(res))})
        if j > 0 and np.isfinite(stds[j]):
            inside += int(np.sum(np.abs(res) <= 3 * stds[j]))
            total += K
    from .store import _csv_text

    atomic_write(out, _csv_text(["step", "x", "truth", "mean", "residual", "posterior_std"], rows,
                                "x in [0, 1); residual = mean - truth; posterior_std pointwise"))
    summary = {"run": str(run_dir), "reference": str(reference), "K": K, "per_step": per_step,
               "calibration_fraction": inside / total if total else None}
    atomic_write(Path(out).with_suffix(".json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
