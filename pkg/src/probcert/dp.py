"""Approximate reach-avoid dynamic programming with Gaussian-kernel LP fits.

Each backward step fits nonnegative kernel weights so that the fitted value
dominates the one-step Bellman backup at sampled states while having the
smallest integral over the domain.  The safe-set indicator is kept outside
the fit:

    avoid  F_k(x) = 1(x in C) * K_k(x)
    reach  F_k(x) = 1(x in C) + 1(x not in C) * K_k(x)

so the kernels only have to represent the smooth part of the value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, LpInfeasible
from .sde import BarrierSpec, SdeSystem, phi_values
from .simplex import FEAS_TOL, solve_lp


# -- transitions ----------------------------------------------------------------

class Transition(Protocol):
    n: int
    m: int

    def outcomes(self, X: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Successor states (B, K, n) and their probabilities (K,) for controls U (B, m)."""


@dataclass(frozen=True)
class ChainTransition:
    """x' = clip(x + u + w) with finitely supported additive noise w."""

    lo: float
    hi: float
    noise: tuple = (-1.0, 0.0, 1.0)
    probs: tuple = (0.08, 0.84, 0.08)
    n: int = 1
    m: int = 1

    def __post_init__(self):
        if not np.isclose(sum(self.probs), 1.0):
            raise ConfigurationError("noise probabilities must sum to 1")

    def outcomes(self, X, U):
        w = np.asarray(self.noise, dtype=float)
        Y = np.clip(X[:, None, :] + U[:, None, :] + w[None, :, None], self.lo, self.hi)
        return Y, np.asarray(self.probs, dtype=float)


@dataclass(frozen=True)
class EulerTransition:
    """One Euler-Maruyama step with the Gaussian increment replaced by Gauss-Hermite nodes."""

    sys: SdeSystem
    dt: float
    order: int = 7

    @property
    def n(self):
        return self.sys.n

    @property
    def m(self):
        return self.sys.m

    def outcomes(self, X, U):
        z, wq = np.polynomial.hermite_e.hermegauss(self.order)
        wq = wq / wq.sum()
        xi = self.sys.xi
        grids = np.meshgrid(*([z] * xi), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=1)  # (K, xi)
        probs = np.prod(np.meshgrid(*([wq] * xi), indexing="ij"), axis=0).ravel()
        mean = X + (self.sys.drift(X) + np.einsum("bij,bj->bi", self.sys.input_matrix(X), U)) * self.dt
        S = self.sys.diffusion(X) * np.sqrt(self.dt)
        Y = mean[:, None, :] + np.einsum("bij,kj->bki", S, nodes)
        return Y, probs


# -- domains --------------------------------------------------------------------

@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box with Lebesgue measure."""

    lo: tuple
    hi: tuple

    @property
    def bounds(self):
        return np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)

    def sample(self, rng, count):
        lo, hi = self.bounds
        return rng.uniform(lo, hi, size=(count, lo.shape[0]))

    def kernel_integrals(self, model: "KernelModel") -> np.ndarray:
        lo, hi = self.bounds
        s = np.sqrt(2.0 * model.bandwidths)
        per_axis = 0.5 * (erf((hi - model.centers) / s) - erf((lo - model.centers) / s))
        return np.prod(per_axis, axis=1)


@dataclass(frozen=True)
class FiniteDomain:
    """Finite state set with counting measure."""

    states: tuple

    @property
    def points(self):
        return np.atleast_2d(np.asarray(self.states, dtype=float)).reshape(len(self.states), -1)

    @property
    def bounds(self):
        P = self.points
        return P.min(axis=0), P.max(axis=0)

    def sample(self, rng, count):
        P = self.points
        return P[rng.integers(0, P.shape[0], size=count)]

    def kernel_integrals(self, model: "KernelModel") -> np.ndarray:
        return model.basis(self.points).sum(axis=0)


# -- kernel model -----------------------------------------------------------------

@dataclass(frozen=True)
class KernelModel:
    """Weighted sum of axis-aligned Gaussian densities."""

    centers: np.ndarray     # (M, n)
    bandwidths: np.ndarray  # (M, n) variances
    weights: np.ndarray     # (M,)

    def __post_init__(self):
        if np.any(~(np.asarray(self.bandwidths) > 0)):
            raise ConfigurationError("kernel bandwidths must be positive")

    @property
    def M(self) -> int:
        return self.weights.shape[0]

    def basis(self, X: np.ndarray) -> np.ndarray:
        """Kernel values (B, M)."""
        X = np.atleast_2d(X)
        d = X[:, None, :] - self.centers[None]
        dens = np.exp(-d ** 2 / (2 * self.bandwidths)) / np.sqrt(2 * np.pi * self.bandwidths)
        return np.prod(dens, axis=2)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.basis(X) @ self.weights


@dataclass(frozen=True)
class ReachAvoidValue:
    """Fitted value at one step, with the safe-set indicator applied exactly."""

    kind: str                    # "avoid" or "reach"
    in_set: Callable[[np.ndarray], np.ndarray]
    model: KernelModel | None    # None for the terminal indicator

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        inside = self.in_set(X)
        if self.model is None:
            return inside.astype(float)
        k = np.clip(self.model(X), 0.0, 1.0)
        if self.kind == "avoid":
            return np.where(inside, k, 0.0)
        return np.where(inside, 1.0, k)


@dataclass(frozen=True)
class StepReport:
    k: int
    constraints: int
    iterations: int
    objective: float
    max_violation: float
    feasible: bool


@dataclass(frozen=True)
class DpResult:
    """Value functions F_0..F_{T_d} (index = step) and per-step LP reports."""

    values: tuple
    reports: tuple
    candidates: np.ndarray
    transition: object

    def __getitem__(self, k):
        return self.values[k]

    def backup(self, X: np.ndarray, k: int) -> np.ndarray:
        """Expected F_{k+1} after each candidate control, shape (B, K_u)."""
        return _expected_next(self.transition, self.values[k + 1], X, self.candidates)

    def greedy(self, X: np.ndarray, k: int) -> np.ndarray:
        """Candidate control maximizing the one-step backup at step k."""
        return self.candidates[np.argmax(self.backup(X, k), axis=1)]


def _expected_next(transition, value, X, candidates):
    B = X.shape[0]
    out = np.empty((B, candidates.shape[0]))
    for j, u in enumerate(candidates):
        Y, p = transition.outcomes(X, np.broadcast_to(u, (B, u.shape[0])))
        K = Y.shape[1]
        out[:, j] = (value(Y.reshape(B * K, -1)).reshape(B, K) * p).sum(axis=1)
    return out


def _sample_centers(rng, domain, in_set, region_inside, M, tries=200):
    lo, hi = domain.bounds
    found = []
    need = M
    for _ in range(tries):
        cand = rng.uniform(lo, hi, size=(max(4 * need, 64), lo.shape[0]))
        mask = in_set(cand) if region_inside else ~in_set(cand)
        found.append(cand[mask][:need])
        need -= found[-1].shape[0]
        if need <= 0:
            break
    centers = np.concatenate(found) if found else np.zeros((0, lo.shape[0]))
    if centers.shape[0] < M:
        raise ConfigurationError("could not place kernel centers in the fitting region")
    return centers[:M]


def dp_reach_avoid(
    transition: Transition,
    spec: BarrierSpec,
    domain,
    M: int = 100,
    n_s: int = 1000,
    T_d: int = 10,
    seed: int = 0,
    candidates=None,
    nu_range: tuple = (0.01, 1.0),
    L: float | None = None,
) -> DpResult:
    """Backward recursion of kernel-LP fits for safety types 2 (avoid) and 4 (reach).

    ``candidates`` is the finite control set used for the maximum in each
    backup (default: 9 evenly spaced points on [-1, 1] for scalar inputs).
    Bandwidths are drawn log-uniformly from ``nu_range`` times the squared
    domain extent on each axis.
    """
    if spec.safety_type not in (2, 4):
        raise ConfigurationError("dp_reach_avoid handles safety types 2 and 4")
    if T_d < 1 or M < 1 or n_s < 1:
        raise ConfigurationError("T_d, M and n_s must be positive")
    kind = "avoid" if spec.safety_type == 2 else "reach"
    level = spec.margin(0.0) if L is None else float(L)

    def in_set(X):
        return phi_values(spec, np.atleast_2d(X)) >= level

    if candidates is None:
        if transition.m != 1:
            raise ConfigurationError("default candidates are only defined for scalar controls")
        candidates = np.linspace(-1.0, 1.0, 9)
    candidates = np.asarray(candidates, dtype=float).reshape(-1, transition.m)

    rng = np.random.default_rng(seed)
    lo, hi = domain.bounds
    extent2 = np.maximum(hi - lo, 1e-12) ** 2
    Xs = domain.sample(rng, n_s)
    rows = in_set(Xs) if kind == "avoid" else ~in_set(Xs)
    Xfit = Xs[rows]

    values = [None] * (T_d + 1)
    values[T_d] = ReachAvoidValue(kind, in_set, None)
    reports = []
    for k in range(T_d - 1, -1, -1):
        centers = _sample_centers(rng, domain, in_set, kind == "avoid", M)
        log_nu = rng.uniform(np.log(nu_range[0]), np.log(nu_range[1]), size=centers.shape)
        bw = np.exp(log_nu) * extent2
        model = KernelModel(centers, bw, np.zeros(M))
        cost = domain.kernel_integrals(model)
        if Xfit.shape[0] == 0:
            w = np.zeros(M)
            rep = StepReport(k, 0, 0, 0.0, 0.0, True)
        else:
            target = _expected_next(transition, values[k + 1], Xfit, candidates).max(axis=1)
            A = model.basis(Xfit)
            # dual of  min cost.w  s.t.  A w >= target, w >= 0; the weights are its multipliers
            res = solve_lp(-target, A.T, cost)
            w = np.maximum(-res.duals, 0.0)
            viol = float(np.max(target - A @ w, initial=0.0))
            feasible = viol <= FEAS_TOL * max(1.0, float(np.abs(target).max()))
            rep = StepReport(k, int(A.shape[0]), res.iterations, float(cost @ w), viol, feasible)
            if not feasible:
                raise LpInfeasible(f"step {k}: fitted kernels violate the backup by {viol:.3g}")
        values[k] = ReachAvoidValue(kind, in_set, KernelModel(centers, bw, w))
        reports.append(rep)
    return DpResult(tuple(values), tuple(reversed(reports)), candidates, transition)


def tabular_reach_avoid(P: np.ndarray, inside: np.ndarray, T_d: int, kind: str) -> np.ndarray:
    """Exact finite-chain recursion; P has shape (S, A, S).  Returns V of shape (T_d+1, S)."""
    inside = np.asarray(inside, dtype=bool)
    V = np.empty((T_d + 1, P.shape[0]))
    V[T_d] = inside
    for k in range(T_d - 1, -1, -1):
        best = (P @ V[k + 1]).max(axis=1)
        V[k] = np.where(inside, best, 0.0) if kind == "avoid" else np.where(inside, 1.0, best)
    return V
