"""Probabilistic-invariance safety certificate and the filters built on it.

The certificate keeps the long-term safe probability F(Z_t) of the augmented
state from decaying faster than a class-K rate toward 1 - epsilon:

    D_F(z, u) >= -alpha(F(z) - (1 - epsilon)),

where D_F is the generator of the augmented diffusion applied to F.  The
condition is affine in u, so each state yields one half-space a.u >= b.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DegenerateGradient, EmptyCandidateSet, Infeasible
from .field import SafeProbField
from .sde import (
    AugmentedState,
    BarrierSpec,
    Policy,
    SdeSystem,
    evaluate_policy,
    lie_g_phi_batch,
    lie_sigma_phi_batch,
    phi_drift_batch,
)

log = logging.getLogger(__name__)

SATISFY_TOL = 1e-9


class InfeasibilityPolicy(str, enum.Enum):
    HOLD_NOMINAL = "hold_nominal"
    MAX_ASCENT = "max_ascent"
    ERROR = "error"


@dataclass(frozen=True)
class CertificateParams:
    alpha_gain: float = 1.0
    epsilon: float = 0.1
    infeasibility_policy: InfeasibilityPolicy = InfeasibilityPolicy.HOLD_NOMINAL
    alpha: Callable[[np.ndarray], np.ndarray] | None = None  # overrides the linear gain
    drop_hessian: bool = False
    grad_tol: float = 1e-8
    clamp_to_hull: bool = False
    u_max: float = 10.0  # step length of the max-ascent fallback

    def __post_init__(self):
        if not self.alpha_gain > 0:
            raise ConfigurationError("alpha_gain must be positive")
        if not 0 < self.epsilon < 1:
            raise ConfigurationError("epsilon must lie in (0, 1)")
        object.__setattr__(self, "infeasibility_policy", InfeasibilityPolicy(self.infeasibility_policy))

    def class_k(self, y):
        if self.alpha is not None:
            return np.asarray(self.alpha(y), dtype=float)
        return self.alpha_gain * np.asarray(y, dtype=float)


@dataclass(frozen=True)
class LinearConstraint:
    """The half-space {u : a.u >= b}."""

    a: np.ndarray
    b: float
    meta: dict = dc_field(default_factory=dict)

    def holds(self, u, tol: float = SATISFY_TOL) -> bool:
        return bool(self.a @ np.atleast_1d(u) >= self.b - tol)


# -- augmented dynamics -----------------------------------------------------------

def augmented_blocks(sys: SdeSystem, spec: BarrierSpec, Z: np.ndarray):
    """f~ (B, n+3), g~ (B, n+3, m) and sigma~ (B, n+3, xi) at augmented states Z."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    B = Z.shape[0]
    X = Z[:, 3:]
    dim = sys.n + 3
    ft = np.zeros((B, dim))
    ft[:, 0] = spec.horizon_mode.f_T
    ft[:, 1] = np.asarray(spec.f_ell(Z[:, 1]), dtype=float)
    ft[:, 2] = phi_drift_batch(sys, spec, X)
    ft[:, 3:] = sys.drift(X)
    gt = np.zeros((B, dim, sys.m))
    gt[:, 2, :] = lie_g_phi_batch(sys, spec, X)
    gt[:, 3:, :] = sys.input_matrix(X)
    st = np.zeros((B, dim, sys.xi))
    st[:, 2, :] = lie_sigma_phi_batch(sys, spec, X)
    st[:, 3:, :] = sys.diffusion(X)
    return ft, gt, st


@dataclass(frozen=True)
class ConstraintBatch:
    """Half-spaces a_i.u >= b_i for a batch of states, with the pieces that built them."""

    a: np.ndarray       # (B, m)
    b: np.ndarray       # (B,)
    F: np.ndarray       # (B,)
    drift: np.ndarray   # grad F . f~ + 1/2 tr(...), (B,)

    def residual(self, U: np.ndarray) -> np.ndarray:
        return np.einsum("bj,bj->b", self.a, U) - self.b


def constraint_batch(field: SafeProbField, sys: SdeSystem, spec: BarrierSpec,
                     params: CertificateParams, Z: np.ndarray) -> ConstraintBatch:
    F, grad, hess = field.query_batch(Z, clamp=params.clamp_to_hull)
    ft, gt, st = augmented_blocks(sys, spec, Z)
    drift = np.einsum("bi,bi->b", grad, ft)
    if not params.drop_hessian:
        drift = drift + 0.5 * np.einsum("bik,bjk,bij->b", st, st, hess)
    a = np.einsum("bi,bij->bj", grad, gt)
    b = -params.class_k(F - (1.0 - params.epsilon)) - drift
    return ConstraintBatch(a=a, b=b, F=F, drift=drift)


def d_f(field, sys, spec, z: AugmentedState, u, params: CertificateParams | None = None) -> float:
    """Generator of the augmented diffusion applied to F, at z under control u."""
    params = params or CertificateParams()
    cb = constraint_batch(field, sys, spec, params, z.as_vector()[None, :])
    return float(cb.drift[0] + cb.a[0] @ np.atleast_1d(np.asarray(u, dtype=float)))


def safety_constraint(field, sys, spec, params: CertificateParams, z: AugmentedState) -> LinearConstraint:
    cb = constraint_batch(field, sys, spec, params, z.as_vector()[None, :])
    return LinearConstraint(
        a=cb.a[0], b=float(cb.b[0]),
        meta={"F": float(cb.F[0]), "drift": float(cb.drift[0]), "a_norm": float(np.linalg.norm(cb.a[0]))},
    )


# -- filters ---------------------------------------------------------------------

@dataclass(frozen=True)
class FilterOutput:
    U: np.ndarray          # (B, m) executed controls
    kappa: np.ndarray      # (B,) multiplier on the correction direction
    active: np.ndarray     # (B,) filter changed the nominal action
    feasible: np.ndarray   # (B,) constraint satisfiable
    exposed_risk: np.ndarray  # (B,) b - a.N where infeasible, else 0


def _resolve_infeasible(N, A, b, bad, params, out_U):
    """Apply the infeasibility policy to rows flagged in ``bad``."""
    exposed = np.where(bad, b - np.einsum("bj,bj->b", A, N), 0.0)
    if not bad.any():
        return exposed
    pol = params.infeasibility_policy
    if pol is InfeasibilityPolicy.ERROR:
        i = int(np.flatnonzero(bad)[0])
        raise Infeasible(f"no control satisfies the certificate (exposed risk {exposed[i]:.3g})",
                         exposed_risk=float(exposed[i]))
    log.info("certificate infeasible at %d states; max exposed risk %.3g", int(bad.sum()), float(exposed.max()))
    if pol is InfeasibilityPolicy.MAX_ASCENT:
        norm = np.linalg.norm(A, axis=1)
        direction = np.where(norm[:, None] > 0, A / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
        out_U[bad] = N[bad] + params.u_max * direction[bad]
    else:
        out_U[bad] = N[bad]
    return exposed


def project_batch(N: np.ndarray, cb: ConstraintBatch, params: CertificateParams,
                  weight: np.ndarray | None = None) -> FilterOutput:
    """Minimal change of N in the (weighted) Euclidean norm that satisfies each half-space.

    With ``weight`` = H the correction is kappa * H^{-1} a; without it the
    correction is kappa * a, which is also the additive-modification filter.
    """
    A, b = cb.a, cb.b
    direction = A if weight is None else np.linalg.solve(np.asarray(weight, dtype=float), A.T).T
    scale = np.einsum("bj,bj->b", A, direction)
    gap = b - np.einsum("bj,bj->b", A, N)
    degenerate = np.linalg.norm(A, axis=1) <= params.grad_tol
    kappa = np.where(degenerate | (gap <= 0), 0.0, gap / np.where(scale > 0, scale, 1.0))
    U = N + kappa[:, None] * direction
    bad = degenerate & (gap > SATISFY_TOL)
    exposed = _resolve_infeasible(N, A, b, bad, params, U)
    return FilterOutput(U=U, kappa=kappa, active=kappa > 0, feasible=~bad, exposed_risk=exposed)


def worst_case_batch(cb: ConstraintBatch, params: CertificateParams) -> np.ndarray:
    """Minimum-norm controls meeting every half-space with equality."""
    norm2 = np.einsum("bj,bj->b", cb.a, cb.a)
    if np.any(np.sqrt(norm2) <= params.grad_tol):
        i = int(np.flatnonzero(np.sqrt(norm2) <= params.grad_tol)[0])
        raise DegenerateGradient(f"constraint coefficient vanishes at row {i}")
    return cb.b[:, None] * cb.a / norm2[:, None]


def _single(field, sys, spec, params, z):
    cb = constraint_batch(field, sys, spec, params, z.as_vector()[None, :])
    N_in = np.asarray(z.state)[None, :]
    return cb, N_in


def additive_filter(nominal: Policy, field, sys, spec, params: CertificateParams, z: AugmentedState) -> np.ndarray:
    """N(x) + kappa a^T with the smallest kappa >= 0 that satisfies the certificate."""
    cb, X = _single(field, sys, spec, params, z)
    N = evaluate_policy(nominal, X, sys.m)
    return project_batch(N, cb, params).U[0]


def qp_filter(nominal: Policy, field, sys, spec, params: CertificateParams, z: AugmentedState,
              weight=None) -> np.ndarray:
    """argmin (u - N)^T H (u - N) subject to the certificate (H = I by default)."""
    cb, X = _single(field, sys, spec, params, z)
    N = evaluate_policy(nominal, X, sys.m)
    return project_batch(N, cb, params, weight=weight).U[0]


def worst_case_control(field, sys, spec, params: CertificateParams, z: AugmentedState) -> np.ndarray:
    cb, _ = _single(field, sys, spec, params, z)
    return worst_case_batch(cb, params)[0]


def mpc_filter(nominal_cost: Callable, field, sys, spec, params: CertificateParams, z: AugmentedState,
               dt: float = 0.1, horizon: int = 1, nominal: Policy | None = None,
               points: int = 201, radius: float | None = None) -> np.ndarray:
    """One-step MPC: minimize cost(mean next state, u) over a candidate grid inside the half-space.

    The mean next state is the Euler prediction x + (f + g u) dt.  Longer
    horizons would roll this prediction forward over a control sequence; only
    the single-step case is provided.  ``nominal`` centers the candidate grid
    and is held when the constraint is infeasible.  The grid half-width
    defaults to twice the distance from the center to the constraint
    boundary; a given ``radius`` is widened tenfold once if it misses.
    """
    if horizon != 1:
        raise ConfigurationError("only horizon 1 is supported")
    cb, X = _single(field, sys, spec, params, z)
    a, b = cb.a[0], float(cb.b[0])
    center = evaluate_policy(nominal, X, sys.m)[0] if nominal is not None else np.zeros(sys.m)
    if np.linalg.norm(a) <= params.grad_tol and b - a @ center > SATISFY_TOL:
        U = center[None, :].copy()
        _resolve_infeasible(center[None, :], cb.a, cb.b, np.array([True]), params, U)
        return U[0]
    f = sys.drift(X)[0]
    g = sys.input_matrix(X)[0]
    if radius is None:
        radius = max(1.0, 2.0 * abs(b - a @ center) / max(np.linalg.norm(a), params.grad_tol))
    for attempt in range(2):
        axes = [np.linspace(c - radius, c + radius, points if sys.m == 1 else 21) for c in center]
        cand = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
        ok = cand @ a >= b - SATISFY_TOL
        if ok.any():
            cand = cand[ok]
            nxt = X[0] + (f + cand @ g.T) * dt
            costs = np.array([nominal_cost(nx, u) for nx, u in zip(nxt, cand)])
            return cand[int(np.argmin(costs))]
        radius *= 10.0
    raise EmptyCandidateSet("candidate grid misses the feasible half-space")


@dataclass(frozen=True)
class SafetyCertificate:
    """A tabulated field bound to its system, barrier and certificate parameters."""

    field: SafeProbField
    sys: SdeSystem
    spec: BarrierSpec
    params: CertificateParams = CertificateParams()

    def constraints(self, Z: np.ndarray) -> ConstraintBatch:
        return constraint_batch(self.field, self.sys, self.spec, self.params, Z)

    def constraint(self, z: AugmentedState) -> LinearConstraint:
        return safety_constraint(self.field, self.sys, self.spec, self.params, z)

    def filter(self, N: np.ndarray, Z: np.ndarray) -> FilterOutput:
        return project_batch(N, self.constraints(Z), self.params)

    def worst_case(self, Z: np.ndarray) -> np.ndarray:
        return worst_case_batch(self.constraints(Z), self.params)
