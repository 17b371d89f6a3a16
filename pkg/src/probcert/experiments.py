"""Closed-loop comparison drivers, learning runs and CSV output."""

from __future__ import annotations

import csv
import io
import logging
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .baselines import (
    cvar_filter_batch,
    cvar_worst_case_batch,
    equality_controls,
    halfspace_filter,
    prsbc_batch,
    stocbf_batch,
)
from .certificate import SafetyCertificate, project_batch
from .errors import ConfigurationError
from .estimation import McEstimator, tabulate_field
from .field import SafeProbField
from .rl import expected_return, train_pg, train_q
from .scenario import Scenario
from .sde import augment_batch, evaluate_policy, noise_block, phi_values

log = logging.getLogger(__name__)

CONTROLLERS = ("proposed", "stocbf", "prsbc", "cvar")
MODES = ("worst-case", "switching")


def build_id() -> str:
    """Short commit hash of the working tree, or 'unknown' outside a repository."""
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# -- field estimation --------------------------------------------------------------

def build_field(scenario: Scenario, samples: int | None = None, jobs: int = 1, seed: int | None = None) -> SafeProbField:
    """Tabulate F for the scenario's estimation settings (Monte Carlo, shared noise)."""
    est = scenario.estimation
    if est.algorithm != "mc":
        raise ConfigurationError(f"estimation algorithm {est.algorithm!r} is not available for continuous systems")
    sys = scenario.build_system()
    spec = scenario.build_barrier()
    estimator = McEstimator(
        sys, spec, scenario.build_field_policy(), samples or est.samples, scenario.run.dt,
        est.seed if seed is None else seed, check_initial=est.check_initial,
        provenance={"scenario": scenario.name, "policy": est.policy.kind},
    )
    grid = scenario.grid_axes()
    if jobs > 1:
        estimator = _Parallel(estimator, jobs)
    return tabulate_field(estimator, grid, spec, sys.n, interp_order=est.interp, smoothing=est.smoothing)


@dataclass
class _Parallel:
    """Split node batches across threads; each node's noise depends only on the seed."""

    inner: McEstimator
    jobs: int

    @property
    def provenance(self):
        return self.inner.provenance

    def __call__(self, Z):
        parts = np.array_split(np.arange(Z.shape[0]), min(self.jobs, Z.shape[0]))
        with ThreadPoolExecutor(self.jobs) as pool:
            outs = list(pool.map(lambda idx: self.inner(Z[idx]), parts))
        return np.concatenate([o[0] for o in outs]), np.concatenate([o[1] for o in outs])


# -- closed loop --------------------------------------------------------------------

@dataclass
class RunResult:
    scenario: str
    mode: str
    controller: str
    t: np.ndarray
    states: np.ndarray        # (steps + 1, n_traj) first state coordinate
    F: np.ndarray             # (steps + 1, n_traj) field value along paths
    safe: np.ndarray          # (steps + 1,) fraction never outside C so far
    active: np.ndarray        # (steps,) fraction of rows where the filter changed the action
    infeasible: np.ndarray    # (steps,) rows with no admissible action
    exposed_risk: np.ndarray  # (steps,) mean exposed risk
    d_f: np.ndarray | None = None  # (steps, n_traj) D_F(Z_t, U_t) for the proposed controller
    clamped_queries: int = 0
    params: dict = dc_field(default_factory=dict)

    @property
    def n_traj(self) -> int:
        return self.states.shape[1]

    @property
    def expected_F(self) -> np.ndarray:
        return self.F.mean(axis=1) if self.n_traj else np.zeros(0)

    @property
    def mean_state(self) -> np.ndarray:
        return self.states.mean(axis=1) if self.n_traj else np.zeros(0)

    @property
    def std_state(self) -> np.ndarray:
        return self.states.std(axis=1) if self.n_traj else np.zeros(0)


def run_closed_loop(scenario: Scenario, controller: str, mode: str, n_traj: int | None = None,
                    seed: int | None = None, field: SafeProbField | None = None,
                    dt: float | None = None, T_max: float | None = None, x0=None,
                    nominal=None) -> RunResult:
    """Simulate ``n_traj`` trajectories under one controller in one mode.

    ``controller`` is one of CONTROLLERS or ``nominal`` (no filter).  The
    field is needed for the proposed controller and for the E[F] column of
    every run.
    """
    if controller not in CONTROLLERS + ("nominal",):
        raise ConfigurationError(f"unknown controller {controller!r}")
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    if field is None:
        raise ConfigurationError("a tabulated field is required")
    run = scenario.run
    n_traj = run.n_traj if n_traj is None else int(n_traj)
    seed = run.seed if seed is None else int(seed)
    dt = run.dt if dt is None else float(dt)
    T_max = run.T_max if T_max is None else float(T_max)
    steps = int(round(T_max / dt))
    sys = scenario.build_system()
    spec = scenario.build_barrier()
    nominal = scenario.build_nominal() if nominal is None else nominal
    cert = SafetyCertificate(field, sys, spec, scenario.certificate_params(clamp_to_hull=True))
    base = scenario.baseline_params(controller) if controller in CONTROLLERS[1:] else None

    x0 = np.asarray(run.x0 if x0 is None else x0, dtype=float).reshape(-1)
    X = np.tile(x0, (n_traj, 1))
    dW = noise_block(seed, np.arange(n_traj), steps, sys.xi, dt)
    level = spec.margin(0.0)

    def lookup(X, t):
        if X.shape[0] == 0:
            return np.zeros(0), 0
        Z = augment_batch(X, t, spec)
        P = field.coords(Z)
        return field.value_at(field.clamp(P)), int((~field.inside(P)).sum())

    states = np.empty((steps + 1, n_traj))
    Fs = np.empty((steps + 1, n_traj))
    safe_row = phi_values(spec, X) >= level if n_traj else np.zeros(0, dtype=bool)
    safe = np.empty(steps + 1)
    active = np.zeros(steps)
    infeasible = np.zeros(steps)
    exposed = np.zeros(steps)
    d_f = np.empty((steps, n_traj)) if controller == "proposed" else None
    states[0] = X[:, 0]
    Fs[0], clamped = lookup(X, 0.0)
    safe[0] = safe_row.mean() if n_traj else np.nan
    level_ok = bool(n_traj == 0 or Fs[0].min() > 1.0 - cert.params.epsilon)
    if controller == "proposed" and not level_ok:
        # the guarantee needs F(z0) > 1 - eps; run anyway and flag it
        log.warning("initial F = %.4f is not above 1 - eps = %.4f", Fs[0].min(), 1.0 - cert.params.epsilon)

    for k in range(steps):
        t = k * dt
        if n_traj == 0:
            continue
        N = evaluate_policy(nominal, X, sys.m)
        if controller == "proposed":
            cb = cert.constraints(augment_batch(X, t, spec))
            if mode == "worst-case":
                U = equality_controls(cb, tol=cert.params.grad_tol)
                act = np.ones(n_traj, dtype=bool)
                bad = np.linalg.norm(cb.a, axis=1) <= cert.params.grad_tol
                exp_r = np.zeros(n_traj)
            else:
                out = project_batch(N, cb, cert.params)
                U, act, bad, exp_r = out.U, out.active, ~out.feasible, out.exposed_risk
            d_f[k] = cb.drift + np.einsum("bj,bj->b", cb.a, U)
        elif controller in ("stocbf", "prsbc"):
            cb = stocbf_batch(sys, spec, base, X) if controller == "stocbf" else prsbc_batch(sys, spec, base, X, dt)
            if mode == "worst-case":
                U = equality_controls(cb)
                act = np.ones(n_traj, dtype=bool)
                bad = np.linalg.norm(cb.a, axis=1) == 0
                exp_r = np.zeros(n_traj)
            else:
                out = halfspace_filter(N, cb)
                U, act, bad, exp_r = out.U, out.active, ~out.feasible, out.exposed_risk
        elif controller == "cvar":
            if mode == "worst-case":
                U = cvar_worst_case_batch(sys, spec, base, X, dt, seed + 1, k)
                act = np.ones(n_traj, dtype=bool)
                bad = np.zeros(n_traj, dtype=bool)
                exp_r = np.zeros(n_traj)
            else:
                out = cvar_filter_batch(N, sys, spec, base, X, dt, seed + 1, k)
                U, act, bad, exp_r = out.U, out.active, ~out.feasible, out.exposed_risk
        else:
            U, act, bad, exp_r = N, np.zeros(n_traj, dtype=bool), np.zeros(n_traj, dtype=bool), np.zeros(n_traj)
        with np.errstate(all="ignore"):
            f = sys.drift(X, check=False)
            g = sys.input_matrix(X, check=False)
            s = sys.diffusion(X, check=False)
            X = X + (f + np.einsum("bij,bj->bi", g, U)) * dt + np.einsum("bij,bj->bi", s, dW[:, k, :])
        finite = np.all(np.isfinite(X), axis=1)
        if not finite.all():
            log.warning("%d trajectories diverged at step %d", int((~finite).sum()), k)
            X[~finite] = -np.inf
        safe_row &= finite & (phi_values(spec, np.where(finite[:, None], X, 0.0)) >= spec.margin(t + dt))
        states[k + 1] = X[:, 0]
        Fs[k + 1] = 0.0
        Fs[k + 1][finite], c = lookup(X[finite], t + dt)
        clamped += c
        safe[k + 1] = safe_row.mean()
        active[k] = act.mean()
        infeasible[k] = bad.sum()
        exposed[k] = exp_r.mean()
    if clamped:
        log.info("%d field lookups fell outside the grid and were clamped", clamped)
    params = _echo_params(scenario)
    params["initial_F_above_level"] = level_ok
    return RunResult(scenario.name, mode, controller, dt * np.arange(steps + 1), states, Fs, safe,
                     active, infeasible, exposed, d_f, clamped, params)


def _echo_params(scenario: Scenario) -> dict:
    c = scenario.controller
    return {
        "alpha": c.alpha, "epsilon": c.epsilon, "H": scenario.barrier.H,
        "stocbf_eta": c.stocbf_eta, "prsbc_eta": c.prsbc_eta, "prsbc_epsilon": c.prsbc_epsilon,
        "cvar_gamma": c.cvar_gamma, "cvar_beta": c.cvar_beta, "dt": scenario.run.dt,
    }


def run_worst_case(scenario, controller, n_traj=None, seed=None, field=None, **kw) -> RunResult:
    return run_closed_loop(scenario, controller, "worst-case", n_traj, seed, field, **kw)


def run_switching(scenario, controller, n_traj=None, seed=None, field=None, **kw) -> RunResult:
    return run_closed_loop(scenario, controller, "switching", n_traj, seed, field, **kw)


# -- learning -----------------------------------------------------------------------

@dataclass
class RlRun:
    kind: str
    filtered: bool
    curve: np.ndarray            # pg: mean return per iteration; q: Q(x0, .) per iteration
    extra: dict
    result: object


def run_rl(scenario: Scenario, kind: str, filtered: bool, seed: int = 0) -> RlRun:
    mdp = scenario.build_mdp()
    filt = scenario.build_filter(filtered)
    if kind == "pg":
        cfg = scenario.pg_config()
        res = train_pg(mdp, filt, cfg, seed)
        J = np.array([expected_return(mdp, th, filt, cfg.x0, cfg.H_r) for th in res.thetas[:-1]])
        return RlRun("pg", filtered, res.returns, {"expected_return": J, "theta": res.thetas}, res)
    if kind == "qlearn":
        res = train_q(mdp, filt, scenario.q_config(), seed)
        return RlRun("qlearn", filtered, res.q_x0, {"greedy_x0": res.greedy_x0, "max_abs": res.max_abs}, res)
    raise ConfigurationError(f"unknown learning run {kind!r}")


# -- output -------------------------------------------------------------------------

def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    return str(v)


def _write_csv(path: Path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue(), newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


RUN_HEADER = ["scenario", "mode", "controller", "step", "t", "mean_state", "std_state", "expected_F",
              "safe_fraction", "active_fraction", "infeasible", "exposed_risk", "mean_d_f",
              "master_seed", "build_id"]


def run_rows(r: RunResult, seed: int, build: str):
    steps = r.t.shape[0]
    for k in range(steps):
        if r.n_traj == 0:
            break
        last = k == steps - 1
        yield [r.scenario, r.mode, r.controller, k, r.t[k], r.mean_state[k], r.std_state[k], r.expected_F[k],
               r.safe[k], np.nan if last else r.active[k], np.nan if last else r.infeasible[k],
               np.nan if last else r.exposed_risk[k],
               np.nan if (last or r.d_f is None) else r.d_f[k].mean(), seed, build]


SUMMARY_HEADER = ["scenario", "mode", "controller", "n_traj", "final_expected_F", "min_expected_F",
                  "final_safe_fraction", "alpha", "epsilon", "H", "stocbf_eta", "prsbc_eta",
                  "prsbc_epsilon", "cvar_gamma", "cvar_beta", "dt", "master_seed", "build_id"]


def summary_rows(results, seed, build):
    for r in results:
        p = r.params
        final_F = r.expected_F[-1] if r.n_traj else np.nan
        min_F = r.expected_F.min() if r.n_traj else np.nan
        final_safe = r.safe[-1] if r.n_traj else np.nan
        yield [r.scenario, r.mode, r.controller, r.n_traj, final_F, min_F, final_safe,
               p.get("alpha"), p.get("epsilon"), p.get("H"), p.get("stocbf_eta"), p.get("prsbc_eta"),
               p.get("prsbc_epsilon"), p.get("cvar_gamma"), p.get("cvar_beta"), p.get("dt"), seed, build]


def emit_outputs(results, out_dir, seed: int, build: str | None = None, rl_runs=(), plots: bool = False):
    """One CSV per (scenario, mode), learning-curve CSVs and a summary table."""
    out = Path(out_dir)
    build = build_id() if build is None else build
    written = []
    groups = {}
    for r in results:
        groups.setdefault((r.scenario, r.mode), []).append(r)
    for (scen, mode), rs in groups.items():
        rows = [row for r in rs for row in run_rows(r, seed, build)]
        written.append(_write_csv(out / f"{scen}_{mode}.csv", RUN_HEADER, rows))
    if results or not rl_runs:
        written.append(_write_csv(out / "summary.csv", SUMMARY_HEADER, summary_rows(results, seed, build)))
    for run in rl_runs:
        tag = "filtered" if run.filtered else "unfiltered"
        if run.kind == "pg":
            J = run.extra["expected_return"]
            rows = [[i + 1, v, J[i], run.extra["theta"][i], seed, build] for i, v in enumerate(run.curve)]
            written.append(_write_csv(out / f"rl_pg_{tag}.csv",
                                      ["iteration", "mean_return", "expected_return", "theta", "master_seed", "build_id"],
                                      rows))
            st = run.result.states[-1]
            rows = [[e, t, x, seed, build] for e in range(st.shape[0]) for t, x in enumerate(st[e])]
            written.append(_write_csv(out / f"rl_pg_{tag}_paths.csv",
                                      ["episode", "step", "state", "master_seed", "build_id"], rows))
        else:
            rows = [[i, *q, seed, build] for i, q in enumerate(run.curve)]
            written.append(_write_csv(out / f"rl_q_{tag}.csv",
                                      ["iteration", "q_u_minus1", "q_u_0", "q_u_plus1", "master_seed", "build_id"],
                                      rows))
    if plots:
        written.extend(_plots(out, results))
    return written


def _plots(out: Path, results):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib is not installed; skipping plots")
        return []
    paths = []
    groups = {}
    for r in results:
        groups.setdefault((r.scenario, r.mode), []).append(r)
    for (scen, mode), rs in groups.items():
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        for r in rs:
            axes[0].plot(r.t, r.mean_state, label=r.controller)
            axes[1].plot(r.t, r.expected_F if mode == "worst-case" else r.safe, label=r.controller)
        axes[0].set_xlabel("t")
        axes[0].set_ylabel("mean state")
        axes[1].set_xlabel("t")
        axes[1].set_ylabel("E[F]" if mode == "worst-case" else "empirical safe probability")
        axes[1].legend()
        fig.tight_layout()
        p = out / f"{scen}_{mode}.svg"
        fig.savefig(p)
        plt.close(fig)
        paths.append(p)
    return paths


# -- thresholds ---------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str


def check_runs(results) -> list[Check]:
    """Acceptance thresholds that apply to the given closed-loop runs."""
    by = {(r.scenario, r.mode, r.controller): r for r in results}
    checks = []

    def get(s, m, c):
        return by.get((s, m, c))

    p = get("system1", "worst-case", "proposed")
    if p is not None:
        EF = p.expected_F
        checks.append(Check("system1 worst-case E[F] in [0.85, 0.95]",
                            bool(EF.min() >= 0.85 and EF.max() <= 0.95),
                            f"min {EF.min():.4f} max {EF.max():.4f}"))
        finals = {c: get("system1", "worst-case", c) for c in CONTROLLERS[1:]}
        if all(v is not None for v in finals.values()):
            fp = EF[-1]
            fb = {c: v.expected_F[-1] for c, v in finals.items()}
            checks.append(Check("system1 worst-case baselines end >= 0.15 below proposed",
                                all(fp - v >= 0.15 for v in fb.values()),
                                " ".join(f"{c}={v:.4f}" for c, v in fb.items()) + f" proposed={fp:.4f}"))
            checks.append(Check("system1 worst-case ordering stocbf <= prsbc <= cvar (0.02)",
                                fb["stocbf"] <= fb["prsbc"] + 0.02 and fb["prsbc"] <= fb["cvar"] + 0.02,
                                " ".join(f"{c}={v:.4f}" for c, v in fb.items())))
    p = get("system1", "switching", "proposed")
    if p is not None:
        others = {c: get("system1", "switching", c) for c in CONTROLLERS[1:]}
        if all(v is not None for v in others.values()):
            s = {c: v.safe[-1] for c, v in others.items()}
            checks.append(Check("system1 switching proposed safest",
                                all(p.safe[-1] > v for v in s.values()),
                                f"proposed={p.safe[-1]:.3f} " + " ".join(f"{c}={v:.3f}" for c, v in s.items())))
    p = get("system2", "worst-case", "proposed")
    if p is not None:
        EF = p.expected_F
        checks.append(Check("system2 worst-case E[F] in [0.7, 0.9]",
                            bool(EF.min() >= 0.7 and EF.max() <= 0.9), f"min {EF.min():.4f} max {EF.max():.4f}"))
    for c in CONTROLLERS[1:]:
        r = get("system2", "worst-case", c)
        if r is not None:
            checks.append(Check(f"system2 worst-case {c} E[F] <= 0.05 at end",
                                bool(r.expected_F[-1] <= 0.05), f"{r.expected_F[-1]:.4f}"))
        r = get("system2", "switching", c)
        if r is not None:
            checks.append(Check(f"system2 switching {c} safe fraction <= 0.1",
                                bool(r.safe[-1] <= 0.1), f"{r.safe[-1]:.3f}"))
    p = get("system2", "switching", "proposed")
    if p is not None:
        checks.append(Check("system2 switching proposed safe fraction >= 0.7",
                            bool(p.safe[-1] >= 0.7), f"{p.safe[-1]:.3f}"))
    r = get("nn", "switching", "nominal")
    if r is not None:
        checks.append(Check("nn unfiltered unsafe fraction >= 0.5", bool(1 - r.safe[-1] >= 0.5),
                            f"unsafe {1 - r.safe[-1]:.3f}"))
    r = get("nn", "switching", "proposed")
    if r is not None:
        eps = r.params.get("epsilon", 0.1)
        checks.append(Check("nn filtered safe fraction >= 1 - eps - 0.05", bool(r.safe[-1] >= 1 - eps - 0.05),
                            f"safe {r.safe[-1]:.3f}"))
    return checks


def check_rl(runs) -> list[Check]:
    checks = []
    by = {(r.kind, r.filtered): r for r in runs}
    pg_u = by.get(("pg", False))
    if pg_u is not None:
        rho = spearmanr(np.arange(pg_u.curve.size), pg_u.curve)[0]
        checks.append(Check("pg unfiltered reward up-trend (Spearman > 0.9)", bool(rho > 0.9), f"rho {rho:.4f}"))
        top = int(pg_u.result.states.max())
        checks.append(Check("pg unfiltered trajectories reach x = 10", top == 10, f"max state {top}"))
    pg_f = by.get(("pg", True))
    if pg_f is not None:
        top = int(pg_f.result.states.max())
        checks.append(Check("pg filtered states stay <= 7", top <= 7, f"max state {top}"))
    qu, qf = by.get(("qlearn", False)), by.get(("qlearn", True))
    for q in (qu, qf):
        if q is not None:
            delta = float(np.abs(q.curve[-1] - q.curve[-2]).max())
            checks.append(Check(f"q {'filtered' if q.filtered else 'unfiltered'} converged (last change < 1e-3)",
                                delta < 1e-3, f"{delta:.2e}"))
    if qu is not None and qf is not None:
        checks.append(Check("q filtered Q(x0, .) strictly below unfiltered",
                            bool(np.all(qf.curve[-1] < qu.curve[-1])),
                            f"filtered {np.round(qf.curve[-1], 4)} unfiltered {np.round(qu.curve[-1], 4)}"))
        checks.append(Check("q unfiltered greedy action at x0 is +1", qu.extra["greedy_x0"] == 2,
                            f"argmax index {qu.extra['greedy_x0']}"))
    return checks
