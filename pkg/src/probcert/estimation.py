"""Monte Carlo and importance-sampling estimates of safe/reach probabilities.

Every trajectory draws its noise from the counter-based stream
``trajectory_rng(seed, i)``, so two estimators called with the same seed see
the same Brownian paths (common random numbers).  Fields tabulated node by
node therefore share their noise across nodes, which makes them far smoother
than independent per-node estimates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.interpolate import make_smoothing_spline

from .errors import ConfigurationError, ProbCertError, WeightOverflow
from .field import SafeProbField, z_axis_names
from .sde import (
    AugmentedState,
    BarrierSpec,
    Policy,
    SdeSystem,
    em_step_batch,
    evaluate_policy,
    noise_block,
    phi_values,
)

log = logging.getLogger(__name__)

# rows x steps x noise-dim floats generated per chunk
_CHUNK_BUDGET = 4_000_000


@dataclass(frozen=True)
class Estimate:
    """A probability estimate; unpacks as ``(estimate, stderr)``."""

    estimate: float
    stderr: float
    n_sample: int
    ess: float = float("nan")
    clamped: bool = False
    diverged: int = 0
    raw: float = float("nan")

    def __iter__(self):
        yield self.estimate
        yield self.stderr


@dataclass
class _Batch:
    """Per-row outcome of a batch of simulated trajectories."""

    s: np.ndarray
    log_w: np.ndarray
    diverged: np.ndarray


def horizon_steps(T: float, dt: float) -> int:
    steps = int(round(T / dt))
    if steps < 1:
        raise ConfigurationError(f"horizon {T} is shorter than one step of {dt}")
    return steps


def _check_type(spec: BarrierSpec, allowed=(1, 3)):
    if spec.safety_type not in allowed:
        raise ConfigurationError(
            f"safety type {spec.safety_type} is not supported here (expected one of {allowed})"
        )


def _simulate_indicators(
    sys: SdeSystem,
    spec: BarrierSpec,
    policy: Policy,
    X0: np.ndarray,
    L0: np.ndarray,
    steps: np.ndarray,
    dt: float,
    dW: np.ndarray,
    check_initial: bool,
    target: Policy | None = None,
    quad_sign: float = -1.0,
    bridge: bool = False,
) -> _Batch:
    """Roll out rows of X0 under ``policy`` with given increments.

    Row r is judged over its own ``steps[r]`` steps.  When ``target`` is given
    the Girsanov log-weight of the target policy relative to ``policy`` is
    accumulated as sum(v.dW) + quad_sign * 1/2 |v|^2 dt with v = sigma^+ g (target - policy).
    With ``bridge`` each step also accounts for the Brownian-bridge chance of
    touching the level between samples, so the indicator estimates the
    continuously monitored event instead of the sampled one.
    """
    B = X0.shape[0]
    X = X0.copy()
    L = L0.copy()
    reach = spec.safety_type in (3, 4)
    phi = phi_values(spec, X)
    inside = phi >= L
    # type 1: probability of not having left C; type 3: of not having entered it
    if check_initial:
        keep = (inside if not reach else ~inside).astype(float)
    else:
        keep = np.ones(B)
    log_w = np.zeros(B)
    diverged = np.zeros(B, dtype=bool)
    for k in range(dW.shape[1]):
        live = k < steps
        U = evaluate_policy(policy, X, sys.m)
        if target is not None:
            Ut = evaluate_policy(target, X, sys.m)
            diff = Ut - U
            if np.any(diff):
                gd = np.einsum("bij,bj->bi", sys.input_matrix(X, check=False), diff)
                sig = sys.diffusion(X, check=False)
                v = np.einsum("bji,bj->bi", np.linalg.pinv(sig), gd)
                inc = np.einsum("bi,bi->b", v, dW[:, k, :]) + quad_sign * 0.5 * np.einsum("bi,bi->b", v, v) * dt
                log_w += np.where(live, inc, 0.0)
        if bridge:
            s_phi = np.einsum("bi,bij->bj", np.asarray(spec.grad_phi(X), dtype=float).reshape(B, sys.n),
                              sys.diffusion(X, check=False))
            var = np.einsum("bj,bj->b", s_phi, s_phi) * dt
        with np.errstate(all="ignore"):
            nxt = em_step_batch(sys, X, U, dt, dW[:, k, :], check=False)
            L_next = L + np.asarray(spec.f_ell(L), dtype=float) * dt
        bad = ~np.all(np.isfinite(nxt), axis=1)
        if bad.any():
            diverged |= bad & live
            nxt[bad] = X[bad]
        phi_next = phi_values(spec, nxt)
        ok = phi_next >= L_next
        step_keep = (ok if not reach else ~ok).astype(float)
        if bridge:
            # chance that the continuous path touched the level between samples
            gap = (phi - L) * (phi_next - L_next)
            with np.errstate(all="ignore"):
                cross = np.where((gap > 0) & (var > 0), np.exp(-2.0 * gap / np.where(var > 0, var, 1.0)), 0.0)
            step_keep *= 1.0 - cross
        keep = np.where(live & ~diverged, keep * step_keep, keep)
        X, L, phi = nxt, L_next, phi_next
    s = 1.0 - keep if reach else keep
    s = np.where(diverged & ~reach, 0.0, s)
    if diverged.any():
        log.warning("%d trajectories diverged and were counted as unsafe", int(diverged.sum()))
    return _Batch(s=s, log_w=log_w, diverged=diverged)


def _chunks(n_sample: int, steps: int, xi: int, rows_per_sample: int = 1):
    per = max(1, _CHUNK_BUDGET // max(1, steps * xi * rows_per_sample))
    for start in range(0, n_sample, per):
        yield np.arange(start, min(n_sample, start + per))


def _z_parts(z0: AugmentedState, dt: float):
    return np.asarray(z0.x, dtype=float), float(z0.L), horizon_steps(z0.T, dt)


def mc_probability(
    sys: SdeSystem,
    spec: BarrierSpec,
    nominal: Policy,
    z0: AugmentedState,
    n_sample: int,
    dt: float,
    seed: int,
    check_initial: bool = True,
    bridge: bool = False,
) -> Estimate:
    """Fraction of closed-loop trajectories that stay in (type 1) or reach (type 3) C(L).

    The horizon is ``z0.T`` (rounded to whole steps).  With ``check_initial``
    the starting state counts as the k=0 sample of the event; otherwise only
    steps 1..T_d are inspected.  ``bridge`` switches to continuous monitoring
    (see ``_simulate_indicators``); the result is then a mean of conditional
    survival probabilities rather than of 0/1 indicators.
    """
    _check_type(spec)
    if n_sample < 1:
        raise ConfigurationError("n_sample must be at least 1")
    x0, L0, T_d = _z_parts(z0, dt)
    total = 0.0
    total_sq = 0.0
    diverged = 0
    for idx in _chunks(n_sample, T_d, sys.xi):
        dW = noise_block(seed, idx, T_d, sys.xi, dt)
        B = idx.shape[0]
        out = _simulate_indicators(
            sys, spec, nominal, np.tile(x0, (B, 1)), np.full(B, L0), np.full(B, T_d), dt, dW, check_initial,
            bridge=bridge,
        )
        total += out.s.sum()
        total_sq += (out.s ** 2).sum()
        diverged += int(out.diverged.sum())
    mean = total / n_sample
    var = max(0.0, total_sq / n_sample - mean ** 2) * n_sample / max(1, n_sample - 1)
    return Estimate(mean, float(np.sqrt(var / n_sample)), n_sample, ess=float(n_sample),
                    diverged=diverged, raw=mean)


def is_probability(
    sys: SdeSystem,
    spec: BarrierSpec,
    N: Policy,
    N_s: Policy,
    z0: AugmentedState,
    n_sample: int,
    dt: float,
    seed: int,
    check_initial: bool = True,
    quad_sign: float = -1.0,
    log_w_cap: float = 50.0,
) -> Estimate:
    """Probability under N estimated from trajectories sampled under N_s.

    Each sample is weighted by the path likelihood ratio dP_N/dP_{N_s}.
    ``quad_sign`` selects the sign of the quadratic term of the log-weight;
    -1 is the exact change of measure for the Euler scheme.
    """
    _check_type(spec)
    if sys.m != sys.xi:
        raise ConfigurationError(
            f"importance sampling needs g and sigma of matching shape; got m={sys.m}, xi={sys.xi}"
        )
    if quad_sign not in (-1.0, 1.0, -1, 1):
        raise ConfigurationError("quad_sign must be +1 or -1")
    if n_sample < 1:
        raise ConfigurationError("n_sample must be at least 1")
    x0, L0, T_d = _z_parts(z0, dt)
    sw = []
    lw = []
    diverged = 0
    for idx in _chunks(n_sample, T_d, sys.xi):
        dW = noise_block(seed, idx, T_d, sys.xi, dt)
        B = idx.shape[0]
        out = _simulate_indicators(
            sys, spec, N_s, np.tile(x0, (B, 1)), np.full(B, L0), np.full(B, T_d), dt, dW,
            check_initial, target=N, quad_sign=float(quad_sign),
        )
        worst = float(np.max(out.log_w))
        if worst > log_w_cap:
            raise WeightOverflow(
                f"log-weight {worst:.3g} exceeds cap {log_w_cap}; sampling policy too far from target",
                log_w=worst,
            )
        lw.append(out.log_w)
        sw.append(out.s * np.exp(out.log_w))
        diverged += int(out.diverged.sum())
    sw = np.concatenate(sw)
    w = np.exp(np.concatenate(lw))
    raw = float(sw.mean())
    stderr = float(sw.std(ddof=1) / np.sqrt(n_sample)) if n_sample > 1 else 0.0
    w2 = float(np.sum(w ** 2))
    ess = float(w.sum() ** 2 / w2) if w2 > 0 else 0.0
    est = min(1.0, max(0.0, raw))
    clamped = est != raw
    if clamped:
        log.info("importance-sampling estimate %.6g clamped to [0, 1]", raw)
    return Estimate(est, stderr, n_sample, ess=ess, clamped=clamped, diverged=diverged, raw=raw)


# -- tabulation -----------------------------------------------------------------

@dataclass
class McEstimator:
    """Batch Monte Carlo estimator of F at many augmented states with shared noise."""

    sys: SdeSystem
    spec: BarrierSpec
    policy: Policy
    n_sample: int
    dt: float
    seed: int
    check_initial: bool = False
    provenance: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        _check_type(self.spec)
        self.provenance = {
            "algorithm": "monte-carlo",
            "samples": self.n_sample,
            "seed": self.seed,
            "dt": self.dt,
            "check_initial": self.check_initial,
            **self.provenance,
        }

    def __call__(self, Z: np.ndarray):
        """Estimates and standard errors for rows of Z (B, n+3)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        n = self.sys.n
        steps = np.array([horizon_steps(T, self.dt) for T in Z[:, 0]])
        T_max = int(steps.max())
        nodes = Z.shape[0]
        sums = np.zeros(nodes)
        sq = np.zeros(nodes)
        per_chunk = max(1, _CHUNK_BUDGET // (T_max * self.sys.xi * nodes))
        for start in range(0, self.n_sample, per_chunk):
            idx = np.arange(start, min(self.n_sample, start + per_chunk))
            dW = noise_block(self.seed, idx, T_max, self.sys.xi, self.dt)
            B = idx.shape[0]
            X0 = np.repeat(Z[:, 3:3 + n], B, axis=0)
            out = _simulate_indicators(
                self.sys, self.spec, self.policy, X0, np.repeat(Z[:, 1], B), np.repeat(steps, B),
                self.dt, np.tile(dW, (nodes, 1, 1)), self.check_initial,
            )
            s = out.s.reshape(nodes, B)
            sums += s.sum(axis=1)
            sq += (s ** 2).sum(axis=1)
        mean = sums / self.n_sample
        var = np.maximum(0.0, sq / self.n_sample - mean ** 2) * self.n_sample / max(1, self.n_sample - 1)
        return mean, np.sqrt(var / self.n_sample)


def tabulate_field(
    estimator: Callable[[np.ndarray], tuple],
    grid: Mapping[str, Sequence[float]],
    spec: BarrierSpec,
    n: int,
    interp_order: str = "cubic",
    smoothing: float | None = None,
    T: float | None = None,
    L: float | None = None,
    nodes_per_call: int = 32,
) -> SafeProbField:
    """Evaluate ``estimator`` on a tensor grid and wrap the result as a field.

    ``grid`` maps axis names (``T``, ``L``, ``x0``...) to node vectors.  Axes
    that are absent are fixed at ``T`` / ``L`` (defaulting to the barrier's
    starting horizon and margin).  ``smoothing`` fits a penalized smoothing
    spline to one-dimensional fields before interpolation; the smoothed
    node values become the stored values.
    """
    names = z_axis_names(n)
    axes = tuple(grid)
    for a in axes:
        if a not in names or a == "phi":
            raise ConfigurationError(f"cannot tabulate over axis {a!r}")
    vectors = [np.asarray(grid[a], dtype=float) for a in axes]
    mesh = np.meshgrid(*vectors, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    fixed = {}
    Tfix = spec.horizon(0.0) if T is None else float(T)
    Lfix = spec.margin(0.0) if L is None else float(L)
    Z = np.zeros((pts.shape[0], n + 3))
    Z[:, 0] = Tfix
    Z[:, 1] = Lfix
    if "T" not in axes:
        fixed["T"] = Tfix
    if "L" not in axes:
        fixed["L"] = Lfix
    x_missing = [i for i in range(n) if f"x{i}" not in axes]
    if x_missing:
        raise ConfigurationError("every state coordinate needs a grid axis")
    for j, a in enumerate(axes):
        Z[:, names.index(a)] = pts[:, j]
    Z[:, 2] = phi_values(spec, Z[:, 3:])

    values = np.empty(pts.shape[0])
    errs = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], nodes_per_call):
        sl = slice(start, min(pts.shape[0], start + nodes_per_call))
        try:
            v, e = estimator(Z[sl])
        except ProbCertError as exc:
            _locate_failure(estimator, Z[sl], axes, pts[sl], exc)
            raise
        values[sl] = np.asarray(v, dtype=float)
        errs[sl] = np.asarray(e, dtype=float)

    shape = tuple(len(v) for v in vectors)
    values = values.reshape(shape)
    errs = errs.reshape(shape)
    provenance = dict(getattr(estimator, "provenance", {}) or {})
    if smoothing is not None:
        if len(axes) != 1:
            raise ConfigurationError("smoothing is only available for one-dimensional fields")
        provenance["raw_values"] = values.tolist()
        provenance["smoothing_lambda"] = float(smoothing)
        values = make_smoothing_spline(vectors[0], values, lam=float(smoothing))(vectors[0])
    if "T" in axes:
        provenance["monotone_in_T"] = _monotone_in_T(values, errs, axes.index("T"), spec.safety_type)
    return SafeProbField(axes, vectors, values, errs, n=n, interp_order=interp_order,
                         fixed=fixed, provenance=provenance)


def _locate_failure(estimator, Z, axes, pts, exc):
    """Attach the coordinates of the first failing node to ``exc``."""
    for row in range(Z.shape[0]):
        try:
            estimator(Z[row:row + 1])
        except ProbCertError:
            coords = dict(zip(axes, pts[row].tolist()))
            exc.node = coords
            if exc.args:
                exc.args = (f"at node {coords}: {exc.args[0]}",) + exc.args[1:]
            return


def _monotone_in_T(values, errs, axis, safety_type) -> bool:
    """Whether F moves with the horizon in the expected direction within 3 stderr.

    Longer horizons can only lower an invariance probability and raise a
    reach probability.
    """
    d = np.diff(values, axis=axis)
    tol = 3 * (np.delete(errs, 0, axis=axis) + np.delete(errs, -1, axis=axis)) + 1e-12
    if safety_type in (1, 2):
        return bool(np.all(d <= tol))
    return bool(np.all(d >= -tol))
