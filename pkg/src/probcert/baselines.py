"""Comparison safety filters: stochastic CBF, probabilistic SBC and CVaR barrier."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .certificate import SATISFY_TOL, ConstraintBatch, FilterOutput, LinearConstraint
from .errors import ConfigurationError, CvarInfeasible
from .sde import (
    BarrierSpec,
    Policy,
    SdeSystem,
    _as_batch,
    evaluate_policy,
    lie_g_phi_batch,
    lie_sigma_phi_batch,
    phi_drift_batch,
    phi_values,
    trajectory_rng,
)

log = logging.getLogger(__name__)

PRSBC_SCALINGS = ("inv_sqrt_dt", "sqrt_dt", "none")


@dataclass(frozen=True)
class BaselineParams:
    eta: float = 1.0
    epsilon_prsbc: float = 0.1
    gamma_cvar: float = 0.65
    beta_cvar: float = 0.1
    cvar_samples: int = 1000
    prsbc_scaling: str = "inv_sqrt_dt"
    bisection_tol: float = 1e-6
    search_limit: float = 1e6

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError("eta must be positive")
        for name in ("epsilon_prsbc", "gamma_cvar", "beta_cvar"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {v}")
        if self.cvar_samples < 100:
            raise ConfigurationError("cvar_samples must be at least 100")
        if self.prsbc_scaling not in PRSBC_SCALINGS:
            raise ConfigurationError(f"prsbc_scaling must be one of {PRSBC_SCALINGS}")


def _as_constraint(cb: ConstraintBatch) -> LinearConstraint:
    return LinearConstraint(a=cb.a[0], b=float(cb.b[0]), meta={"phi_drift": float(cb.drift[0])})


def stocbf_batch(sys: SdeSystem, spec: BarrierSpec, params: BaselineParams, X: np.ndarray) -> ConstraintBatch:
    """L_g phi . u >= -eta phi - f_phi (f_phi includes the Ito term)."""
    fphi = phi_drift_batch(sys, spec, X)
    b = -params.eta * phi_values(spec, X) - fphi
    return ConstraintBatch(a=lie_g_phi_batch(sys, spec, X), b=b, F=np.full(X.shape[0], np.nan), drift=fphi)


def prsbc_batch(sys: SdeSystem, spec: BarrierSpec, params: BaselineParams, X: np.ndarray, dt: float) -> ConstraintBatch:
    """StoCBF condition tightened by the (1 - eps) normal quantile of the noise term.

    Over one step the generator picks up L_sigma phi dW / dt, whose standard
    deviation is |L_sigma phi| / sqrt(dt); ``prsbc_scaling`` selects that
    scaling or the alternatives |L_sigma phi| sqrt(dt) and |L_sigma phi|.
    """
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    base = stocbf_batch(sys, spec, params, X)
    spread = np.linalg.norm(lie_sigma_phi_batch(sys, spec, X), axis=1)
    scale = {"inv_sqrt_dt": 1.0 / np.sqrt(dt), "sqrt_dt": np.sqrt(dt), "none": 1.0}[params.prsbc_scaling]
    q = norm.ppf(1.0 - params.epsilon_prsbc)
    return ConstraintBatch(a=base.a, b=base.b + q * spread * scale, F=base.F, drift=base.drift)


def stocbf_constraint(sys, spec, x, params: BaselineParams = BaselineParams()) -> LinearConstraint:
    return _as_constraint(stocbf_batch(sys, spec, params, _as_batch(x, sys.n)))


def prsbc_constraint(sys, spec, params: BaselineParams, x, dt: float) -> LinearConstraint:
    return _as_constraint(prsbc_batch(sys, spec, params, _as_batch(x, sys.n), dt))


# -- CVaR ------------------------------------------------------------------------

def empirical_cvar(samples, beta: float, axis: int = -1) -> np.ndarray:
    """Mean of the worst (lowest) beta-fraction of the samples.

    Rockafellar-Uryasev sample form  max_t { t - E[(t - Y)_+] / beta },
    evaluated at its maximizer, the empirical beta-quantile.
    """
    if not 0 < beta <= 1:
        raise ConfigurationError("beta must lie in (0, 1]")
    Y = np.moveaxis(np.asarray(samples, dtype=float), axis, -1)
    n = Y.shape[-1]
    Ys = np.sort(Y, axis=-1)
    # the maximizing t is the sample at index ceil(beta n) - 1
    idx = max(0, int(np.ceil(beta * n - 1e-12)) - 1)
    t = Ys[..., idx:idx + 1]
    return t[..., 0] - np.mean(np.maximum(t - Ys, 0.0), axis=-1) / beta


def _successor_phi(sys, spec, X, U, dt, xi_samples):
    """phi at Euler successors, shape (B, S), for controls U (B, m) and shared standard normals."""
    mean = X + (sys.drift(X) + np.einsum("bij,bj->bi", sys.input_matrix(X), U)) * dt
    S = sys.diffusion(X) * np.sqrt(dt)
    Y = mean[:, None, :] + np.einsum("bij,bsj->bsi", S, xi_samples)
    B, K, n = Y.shape
    return phi_values(spec, Y.reshape(B * K, n)).reshape(B, K)


@dataclass
class _CvarProblem:
    sys: SdeSystem
    spec: BarrierSpec
    params: BaselineParams
    X: np.ndarray
    dt: float
    xi: np.ndarray
    direction: np.ndarray
    bound: np.ndarray

    def margin(self, N, kappa):
        U = N + kappa[:, None] * self.direction
        cv = empirical_cvar(_successor_phi(self.sys, self.spec, self.X, U, self.dt, self.xi), self.params.beta_cvar)
        return cv - self.bound


def _cvar_problem(sys, spec, params, X, dt, seed, step):
    rng = trajectory_rng(seed, step)
    xi = rng.standard_normal((X.shape[0], params.cvar_samples, sys.xi))
    direction = lie_g_phi_batch(sys, spec, X)
    nrm = np.linalg.norm(direction, axis=1, keepdims=True)
    direction = np.where(nrm > 0, direction / np.where(nrm > 0, nrm, 1.0), 0.0)
    bound = params.gamma_cvar * phi_values(spec, X)
    return _CvarProblem(sys, spec, params, X, dt, xi, direction, bound)


def _bisect(fn, lo, hi, tol):
    """Vectorized root bracketing for increasing fn with fn(lo) < 0 <= fn(hi)."""
    while np.any(hi - lo > tol):
        mid = 0.5 * (lo + hi)
        ok = fn(mid) >= 0
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    return hi


def cvar_filter_batch(N: np.ndarray, sys, spec, params: BaselineParams, X: np.ndarray, dt: float,
                      seed: int, step: int = 0) -> FilterOutput:
    """Smallest move of N along the phi-ascent direction that meets the CVaR barrier bound.

    Rows whose bound cannot be met within ``search_limit`` hold the nominal
    action and are reported infeasible.
    """
    prob = _cvar_problem(sys, spec, params, X, dt, seed, step)
    B = X.shape[0]
    zero = np.zeros(B)
    need = prob.margin(N, zero) < 0
    kappa = np.zeros(B)
    feasible = np.ones(B, dtype=bool)
    if need.any():
        hi = np.where(need, 1.0, 0.0)
        ok = ~need.copy()
        while True:
            ok = ok | (prob.margin(N, hi) >= 0)
            if ok.all() or hi.max() >= params.search_limit:
                break
            hi = np.where(ok, hi, hi * 2.0)
        feasible = ok
        rows = need & ok
        if rows.any():
            sub = _CvarProblem(sys, spec, params, X[rows], dt, prob.xi[rows], prob.direction[rows], prob.bound[rows])
            kappa[rows] = _bisect(lambda k: sub.margin(N[rows], k), np.zeros(rows.sum()), hi[rows],
                                  params.bisection_tol)
        if (~feasible).any():
            log.info("CVaR bound unattainable at %d states; nominal held", int((~feasible).sum()))
    U = N + kappa[:, None] * prob.direction
    return FilterOutput(U=U, kappa=kappa, active=kappa > 0, feasible=feasible,
                        exposed_risk=np.where(feasible, 0.0, -prob.margin(N, zero)))


def cvar_worst_case_batch(sys, spec, params: BaselineParams, X: np.ndarray, dt: float,
                          seed: int, step: int = 0) -> np.ndarray:
    """Controls along the phi-ascent direction meeting the CVaR bound with equality.

    Rows with no control authority (L_g phi = 0) get u = 0.
    """
    prob = _cvar_problem(sys, spec, params, X, dt, seed, step)
    B = X.shape[0]
    base = np.zeros((B, sys.m))
    has = np.linalg.norm(prob.direction, axis=1) > 0
    if not has.any():
        return base
    sub = _CvarProblem(sys, spec, params, X[has], dt, prob.xi[has], prob.direction[has], prob.bound[has])
    N = base[has]
    k = has.sum()
    lo = np.full(k, -1.0)
    hi = np.full(k, 1.0)
    while True:
        low_bad = sub.margin(N, lo) >= 0
        high_bad = sub.margin(N, hi) < 0
        if not (low_bad.any() or high_bad.any()):
            break
        if max(np.abs(lo).max(), hi.max()) >= params.search_limit:
            raise CvarInfeasible("could not bracket the CVaR equality within the search limit")
        lo = np.where(low_bad, lo * 2.0, lo)
        hi = np.where(high_bad, hi * 2.0, hi)
    kappa = _bisect(lambda q: sub.margin(N, q), lo, hi, params.bisection_tol)
    base[has] = kappa[:, None] * prob.direction[has]
    return base


def cvar_filter(nominal: Policy, sys, spec, params: BaselineParams, x, dt: float, seed: int, step: int = 0) -> np.ndarray:
    """Single-state CVaR filter; raises CvarInfeasible when no control meets the bound."""
    X = _as_batch(x, sys.n)
    N = evaluate_policy(nominal, X, sys.m)
    out = cvar_filter_batch(N, sys, spec, params, X, dt, seed, step)
    if not out.feasible[0]:
        raise CvarInfeasible(f"CVaR bound unattainable at x={X[0]}")
    return out.U[0]


def equality_controls(cb: ConstraintBatch, tol: float = 1e-12) -> np.ndarray:
    """Minimum-norm solutions of a.u = b; rows without control authority get u = 0."""
    norm2 = np.einsum("bj,bj->b", cb.a, cb.a)
    ok = np.sqrt(norm2) > tol
    return np.where(ok[:, None], cb.b[:, None] * cb.a / np.where(ok, norm2, 1.0)[:, None], 0.0)


def halfspace_filter(N: np.ndarray, cb: ConstraintBatch, tol: float = 1e-12) -> FilterOutput:
    """Project N onto a.u >= b; rows without control authority keep N."""
    norm2 = np.einsum("bj,bj->b", cb.a, cb.a)
    gap = cb.b - np.einsum("bj,bj->b", cb.a, N)
    ok = np.sqrt(norm2) > tol
    kappa = np.where(ok & (gap > 0), gap / np.where(ok, norm2, 1.0), 0.0)
    bad = ~ok & (gap > SATISFY_TOL)
    return FilterOutput(U=N + kappa[:, None] * cb.a, kappa=kappa, active=kappa > 0, feasible=~bad,
                        exposed_risk=np.where(bad, gap, 0.0))
