"""Control-affine SDE systems, barrier specifications and Euler-Maruyama simulation.

All system maps are batch-aware: they take states of shape ``(B, n)`` and
return ``(B, n)`` drifts, ``(B, n, m)`` input matrices and ``(B, n, xi)``
diffusion matrices.  Single-state helpers wrap the batch form.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConfigurationError, HorizonExhausted, NumericalDivergence

Array = np.ndarray
Policy = Callable[[Array], Array]


def _as_batch(x, n: int) -> Array:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim == 1:
        if x.shape[0] != n:
            raise ConfigurationError(f"state has dimension {x.shape[0]}, expected {n}")
        return x[None, :]
    if x.ndim != 2 or x.shape[1] != n:
        raise ConfigurationError(f"state batch has shape {x.shape}, expected (B, {n})")
    return x


@dataclass(frozen=True)
class SdeSystem:
    """dX = (f(X) + g(X) U) dt + sigma(X) dW with batch-aware maps."""

    n: int
    m: int
    xi: int
    f: Callable[[Array], Array]
    g: Callable[[Array], Array]
    sigma: Callable[[Array], Array]
    name: str = ""

    @classmethod
    def constant(cls, f, g, sigma, name: str = "") -> "SdeSystem":
        """System whose drift, input matrix and diffusion do not depend on the state."""
        f = np.atleast_1d(np.asarray(f, dtype=float))
        g = np.asarray(g, dtype=float).reshape(f.shape[0], -1)
        sigma = np.asarray(sigma, dtype=float).reshape(f.shape[0], -1)
        n, m, xi = f.shape[0], g.shape[1], sigma.shape[1]
        return cls(
            n, m, xi,
            f=lambda X: np.broadcast_to(f, (X.shape[0], n)).copy(),
            g=lambda X: np.broadcast_to(g, (X.shape[0], n, m)).copy(),
            sigma=lambda X: np.broadcast_to(sigma, (X.shape[0], n, xi)).copy(),
            name=name,
        )

    def _checked(self, name: str, value, shape: tuple, check: bool) -> Array:
        value = np.asarray(value, dtype=float)
        if value.shape != shape:
            try:
                value = np.broadcast_to(value, shape).astype(float)
            except ValueError:
                raise ConfigurationError(
                    f"{self.name or 'system'}.{name} returned shape {value.shape}, expected {shape}"
                ) from None
        if check and not np.all(np.isfinite(value)):
            raise NumericalDivergence(f"{name} returned a non-finite value", component=name)
        return value

    def drift(self, X: Array, check: bool = True) -> Array:
        return self._checked("f", self.f(X), (X.shape[0], self.n), check)

    def input_matrix(self, X: Array, check: bool = True) -> Array:
        return self._checked("g", self.g(X), (X.shape[0], self.n, self.m), check)

    def diffusion(self, X: Array, check: bool = True) -> Array:
        return self._checked("sigma", self.sigma(X), (X.shape[0], self.n, self.xi), check)


class HorizonMode(str, enum.Enum):
    """How the outlook horizon T_t evolves.

    FIXED keeps a window of constant length H ahead of the current time
    (dT/dt = 0).  RECEDING shrinks the window toward the end time H
    (T = H - t, dT/dt = -1).
    """

    FIXED = "fixed"
    RECEDING = "receding"

    @property
    def f_T(self) -> float:
        return 0.0 if self is HorizonMode.FIXED else -1.0


def _zero_rate(L):
    return np.zeros_like(np.asarray(L, dtype=float))


@dataclass(frozen=True)
class BarrierSpec:
    """Barrier phi with derivatives, margin dynamics and horizon settings."""

    phi: Callable[[Array], Array]
    grad_phi: Callable[[Array], Array]
    hess_phi: Callable[[Array], Array]
    f_ell: Callable[[Array], Array] = _zero_rate
    ell0: float = 0.0
    horizon_mode: HorizonMode = HorizonMode.FIXED
    H: float = 10.0
    safety_type: int = 1

    def __post_init__(self):
        if self.safety_type not in (1, 2, 3, 4):
            raise ConfigurationError(f"safety_type must be 1..4, got {self.safety_type}")
        if not self.H > 0:
            raise ConfigurationError("horizon H must be positive")
        object.__setattr__(self, "horizon_mode", HorizonMode(self.horizon_mode))

    @classmethod
    def affine(cls, coef, offset: float = 0.0, **kwargs) -> "BarrierSpec":
        """phi(x) = coef . x + offset."""
        c = np.atleast_1d(np.asarray(coef, dtype=float))
        n = c.shape[0]
        return cls(
            phi=lambda X: X @ c + offset,
            grad_phi=lambda X: np.broadcast_to(c, (X.shape[0], n)).copy(),
            hess_phi=lambda X: np.zeros((X.shape[0], n, n)),
            **kwargs,
        )

    def margin(self, t_elapsed: float) -> float:
        """L(t) obtained by integrating dL/dt = f_ell(L) from ell0."""
        if t_elapsed == 0:
            return float(self.ell0)
        if self.f_ell is _zero_rate:
            return float(self.ell0)
        sol = solve_ivp(
            lambda _t, y: np.asarray(self.f_ell(y), dtype=float).ravel(),
            (0.0, float(t_elapsed)), [float(self.ell0)], rtol=1e-10, atol=1e-12,
        )
        return float(sol.y[0, -1])

    def horizon(self, t_elapsed: float) -> float:
        if self.horizon_mode is HorizonMode.FIXED:
            return float(self.H)
        if t_elapsed > self.H + 1e-12:
            raise HorizonExhausted(f"elapsed time {t_elapsed} exceeds horizon {self.H}")
        return float(self.H - t_elapsed)


@dataclass(frozen=True)
class AugmentedState:
    """Z = (T, L, phi(x), x)."""

    T: float
    L: float
    phi_val: float
    x: tuple

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in np.atleast_1d(self.x)))

    @property
    def state(self) -> Array:
        return np.array(self.x)

    def as_vector(self) -> Array:
        return np.array([self.T, self.L, self.phi_val, *self.x])

    @classmethod
    def at(cls, x, spec: BarrierSpec, T: float | None = None, L: float | None = None) -> "AugmentedState":
        """Build Z for state x, re-evaluating phi(x); T and L default to the t=0 values."""
        xb = np.atleast_1d(np.asarray(x, dtype=float))
        phi_val = float(np.asarray(spec.phi(xb[None, :])).ravel()[0])
        return cls(
            T=spec.horizon(0.0) if T is None else float(T),
            L=spec.margin(0.0) if L is None else float(L),
            phi_val=phi_val,
            x=tuple(xb),
        )


def augment(x, t_elapsed: float, spec: BarrierSpec) -> AugmentedState:
    """Augmented state for x after t_elapsed time units."""
    return AugmentedState.at(x, spec, T=spec.horizon(t_elapsed), L=spec.margin(t_elapsed))


def augment_batch(X: Array, t_elapsed: float, spec: BarrierSpec) -> Array:
    """Rows (T, L, phi(x), x) for a batch of states at a common elapsed time."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.empty((X.shape[0], X.shape[1] + 3))
    Z[:, 0] = spec.horizon(t_elapsed)
    Z[:, 1] = spec.margin(t_elapsed)
    Z[:, 2] = phi_values(spec, X)
    Z[:, 3:] = X
    return Z


@dataclass(frozen=True)
class Trajectory:
    dt: float
    states: Array
    controls: Array
    noise_increments: Array
    seed: int
    index: int = 0

    def __len__(self) -> int:
        return self.controls.shape[0]


# -- randomness ---------------------------------------------------------------

def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for trajectory ``index`` under master ``seed``.

    The stream depends only on (seed, index), so trajectories can be drawn in
    any order or on any worker.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def noise_block(seed: int, indices, steps: int, xi: int, dt: float) -> Array:
    """Brownian increments of shape (len(indices), steps, xi), each N(0, dt)."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((indices.shape[0], steps, xi))
    scale = np.sqrt(dt)
    for row, i in enumerate(indices):
        out[row] = trajectory_rng(seed, int(i)).standard_normal((steps, xi)) * scale
    return out


# -- dynamics -----------------------------------------------------------------

def em_step_batch(sys: SdeSystem, X: Array, U: Array, dt: float, dW: Array, check: bool = True) -> Array:
    """One Euler-Maruyama step for a batch of states."""
    f = sys.drift(X, check)
    g = sys.input_matrix(X, check)
    s = sys.diffusion(X, check)
    return X + (f + np.einsum("bij,bj->bi", g, U)) * dt + np.einsum("bij,bj->bi", s, dW)


def em_step(sys: SdeSystem, x, u, dt: float, dW) -> Array:
    """x + (f(x) + g(x) u) dt + sigma(x) dW for a single state."""
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    X = _as_batch(x, sys.n)
    U = np.asarray(u, dtype=float).reshape(1, sys.m)
    W = np.asarray(dW, dtype=float).reshape(1, sys.xi)
    with np.errstate(over="ignore", invalid="ignore"):
        out = em_step_batch(sys, X, U, dt, W)[0]
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise NumericalDivergence(f"state component {bad[0]} became non-finite", component=int(bad[0]))
    return out


def evaluate_policy(policy: Policy, X: Array, m: int) -> Array:
    U = np.asarray(policy(X), dtype=float)
    return U.reshape(X.shape[0], m)


def simulate(sys: SdeSystem, policy: Policy, x0, T_d: int, dt: float, seed: int, index: int = 0) -> Trajectory:
    """Closed-loop Euler-Maruyama trajectory with recorded controls and noise."""
    if T_d < 1:
        raise ConfigurationError("T_d must be at least 1")
    dW = noise_block(seed, [index], T_d, sys.xi, dt)[0]
    states = np.empty((T_d + 1, sys.n))
    controls = np.empty((T_d, sys.m))
    states[0] = _as_batch(x0, sys.n)[0]
    for k in range(T_d):
        X = states[k:k + 1]
        U = evaluate_policy(policy, X, sys.m)
        controls[k] = U[0]
        try:
            nxt = em_step_batch(sys, X, U, dt, dW[k:k + 1])[0]
        except NumericalDivergence as exc:
            raise NumericalDivergence(f"step {k}: {exc}", component=exc.component, step=k) from exc
        bad = np.flatnonzero(~np.isfinite(nxt))
        if bad.size:
            raise NumericalDivergence(
                f"step {k}: state component {bad[0]} became non-finite", component=int(bad[0]), step=k
            )
        states[k + 1] = nxt
    return Trajectory(dt=dt, states=states, controls=controls, noise_increments=dW, seed=seed, index=index)


def iterate_batch(sys: SdeSystem, policy: Policy, X0: Array, dt: float, dW: Array) -> Iterator[tuple]:
    """Step a batch forward, yielding ``(k, X_k, U_k, X_{k+1}, diverged)``.

    Rows that become non-finite are frozen at their last finite state and
    flagged in ``diverged`` from then on.
    """
    X = np.array(X0, dtype=float)
    diverged = np.zeros(X.shape[0], dtype=bool)
    for k in range(dW.shape[1]):
        U = evaluate_policy(policy, X, sys.m)
        with np.errstate(all="ignore"):
            nxt = em_step_batch(sys, X, U, dt, dW[:, k, :], check=False)
        bad = ~np.all(np.isfinite(nxt), axis=1) | ~np.all(np.isfinite(U), axis=1)
        if bad.any():
            diverged |= bad
            nxt[bad] = X[bad]
        yield k, X, U, nxt, diverged
        X = nxt


def phi_drift_batch(sys: SdeSystem, spec: BarrierSpec, X: Array) -> Array:
    grad = np.asarray(spec.grad_phi(X), dtype=float).reshape(X.shape[0], sys.n)
    hess = np.asarray(spec.hess_phi(X), dtype=float).reshape(X.shape[0], sys.n, sys.n)
    s = sys.diffusion(X, check=False)
    ito = 0.5 * np.einsum("bij,bkj,bik->b", s, s, hess)
    return np.einsum("bi,bi->b", grad, sys.drift(X, check=False)) + ito


def phi_drift(sys: SdeSystem, spec: BarrierSpec, x) -> float:
    """grad(phi).f + 1/2 tr(sigma sigma^T Hess phi) at a single state."""
    return float(phi_drift_batch(sys, spec, _as_batch(x, sys.n))[0])


def lie_g_phi_batch(sys: SdeSystem, spec: BarrierSpec, X: Array) -> Array:
    """Row vectors grad(phi)^T g, shape (B, m)."""
    grad = np.asarray(spec.grad_phi(X), dtype=float).reshape(X.shape[0], sys.n)
    return np.einsum("bi,bij->bj", grad, sys.input_matrix(X, check=False))


def lie_sigma_phi_batch(sys: SdeSystem, spec: BarrierSpec, X: Array) -> Array:
    """Row vectors grad(phi)^T sigma, shape (B, xi)."""
    grad = np.asarray(spec.grad_phi(X), dtype=float).reshape(X.shape[0], sys.n)
    return np.einsum("bi,bij->bj", grad, sys.diffusion(X, check=False))


def phi_values(spec: BarrierSpec, X: Array) -> Array:
    return np.asarray(spec.phi(X), dtype=float).reshape(X.shape[0])
