"""Safe policy gradient and safe Q-learning on a clipped integer chain."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace
from typing import Callable

import numpy as np

from .errors import ConfigurationError
from .sde import trajectory_rng


@dataclass(frozen=True)
class ChainMdp:
    """x' = clip(x + u + w) on {lo..hi} with reward (x - 5)/10."""

    lo: int = 0
    hi: int = 10
    actions: tuple = (-1, 0, 1)
    noise: tuple = (-1, 0, 1)
    noise_probs: tuple = (0.08, 0.84, 0.08)
    reward_center: float = 5.0
    reward_scale: float = 10.0

    def __post_init__(self):
        p = np.asarray(self.noise_probs, dtype=float)
        if np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ConfigurationError("noise probabilities must be nonnegative and sum to 1")

    @classmethod
    def from_variance(cls, variance: float = 0.16, **kw) -> "ChainMdp":
        """Three-point noise {-1, 0, 1} whose variance matches ``variance``."""
        p = variance / 2.0
        if not 0 <= p <= 0.5:
            raise ConfigurationError("variance must lie in [0, 1] for unit-step noise")
        return cls(noise_probs=(p, 1.0 - 2.0 * p, p), **kw)

    @property
    def states(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.reward(self.states))))

    def reward(self, x, u=None):
        return (np.asarray(x, dtype=float) - self.reward_center) / self.reward_scale

    def step(self, x: int, u: int, rng: np.random.Generator) -> int:
        w = self.noise[rng.choice(len(self.noise), p=self.noise_probs)]
        return int(np.clip(x + u + w, self.lo, self.hi))

    def kernel(self, actions=None) -> np.ndarray:
        """Transition probabilities P[s, a, s'] over ``actions`` (default: all)."""
        actions = self.actions if actions is None else actions
        S = self.states
        P = np.zeros((S.size, len(actions), S.size))
        for i, x in enumerate(S):
            for a, u in enumerate(actions):
                for w, p in zip(self.noise, self.noise_probs):
                    P[i, a, int(np.clip(x + u + w, self.lo, self.hi)) - self.lo] += p
        return P


@dataclass(frozen=True)
class SoftmaxPolicy:
    """pi(u | x) proportional to exp(theta x u)."""

    theta: float = 0.0
    actions: tuple = (-1, 0, 1)

    def probs(self, x) -> np.ndarray:
        logits = self.theta * float(x) * np.asarray(self.actions, dtype=float)
        logits -= logits.max()
        e = np.exp(logits)
        return e / e.sum()

    def log_prob(self, x, u) -> float:
        return float(np.log(self.probs(x)[self.actions.index(u)]))

    def score(self, x, u) -> float:
        """d/dtheta log pi(u | x) = x u - E_pi[x u']."""
        return float(x) * float(u) - float(x) * float(self.probs(x) @ np.asarray(self.actions, dtype=float))

    def sample(self, x, rng: np.random.Generator) -> int:
        return self.actions[rng.choice(len(self.actions), p=self.probs(x))]


@dataclass(frozen=True)
class SafetyFilterG:
    """Deterministic action override: above ``threshold`` the action is forced.

    Holds no reference to any policy parameters.
    """

    threshold: float | None = 5.0
    forced_action: int = -1

    @classmethod
    def identity(cls) -> "SafetyFilterG":
        return cls(threshold=None)

    @property
    def enabled(self) -> bool:
        return self.threshold is not None

    def __call__(self, x, u_hat):
        if self.threshold is not None and x > self.threshold:
            return self.forced_action
        return u_hat

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "forced_action": self.forced_action}


@dataclass(frozen=True)
class QTable:
    q: np.ndarray
    gamma: float = 0.9

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ConfigurationError("gamma must lie in [0, 1)")

    @classmethod
    def zeros(cls, mdp: ChainMdp, gamma: float = 0.9) -> "QTable":
        return cls(np.zeros((mdp.states.size, len(mdp.actions))), gamma)


@dataclass(frozen=True)
class Episode:
    x: np.ndarray      # H_r + 1 states
    u_hat: np.ndarray  # nominal actions
    u: np.ndarray      # executed actions
    R: float


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def rollout(mdp: ChainMdp, policy: SoftmaxPolicy, filt: SafetyFilterG, x0: int, H_r: int, seed) -> Episode:
    if H_r < 1:
        raise ConfigurationError("H_r must be at least 1")
    rng = _rng(seed)
    xs = np.empty(H_r + 1, dtype=int)
    uh = np.empty(H_r, dtype=int)
    us = np.empty(H_r, dtype=int)
    xs[0] = x0
    R = 0.0
    for t in range(H_r):
        uh[t] = policy.sample(xs[t], rng)
        us[t] = filt(xs[t], uh[t])
        R += float(mdp.reward(xs[t], us[t]))
        xs[t + 1] = mdp.step(int(xs[t]), int(us[t]), rng)
    return Episode(xs, uh, us, R)


def policy_gradient(episodes, policy: SoftmaxPolicy) -> float:
    """Batch mean of R(tau) times the summed score of the nominal actions."""
    if not episodes:
        return 0.0
    total = 0.0
    for ep in episodes:
        total += ep.R * sum(policy.score(x, u) for x, u in zip(ep.x[:-1], ep.u_hat))
    return total / len(episodes)


def pg_update(episodes, policy: SoftmaxPolicy, learning_rate: float) -> SoftmaxPolicy:
    return replace(policy, theta=policy.theta + learning_rate * policy_gradient(episodes, policy))


def q_update(table: QTable, transition, learning_rate: float) -> QTable:
    """One tabular Q-learning step on (x, action index, r, x')."""
    x, a, r, x_next = transition
    if not 0 <= learning_rate <= 1:
        raise ConfigurationError("learning rate must lie in [0, 1]")
    q = table.q.copy()
    # convex form so that a unit rate overwrites exactly
    q[x, a] = (1.0 - learning_rate) * q[x, a] + learning_rate * (r + table.gamma * q[x_next].max())
    return replace(table, q=q)


# -- training loops -----------------------------------------------------------------

def inverse_sqrt(i: int) -> float:
    return 1.0 / np.sqrt(i)


@dataclass(frozen=True)
class PgConfig:
    n_iter: int = 1500
    n_eps: int = 10
    H_r: int = 10
    x0: int = 0
    theta0: float = 0.0
    lr: Callable[[int], float] = inverse_sqrt


@dataclass
class PgResult:
    returns: np.ndarray      # mean return per iteration
    thetas: np.ndarray       # theta before each iteration, plus the final value
    policy: SoftmaxPolicy
    states: np.ndarray       # (n_iter, n_eps, H_r + 1) visited states
    executed: np.ndarray     # (n_iter, n_eps, H_r) executed actions


def train_pg(mdp: ChainMdp, filt: SafetyFilterG, config: PgConfig = PgConfig(), seed: int = 0) -> PgResult:
    policy = SoftmaxPolicy(config.theta0, mdp.actions)
    returns = np.empty(config.n_iter)
    thetas = np.empty(config.n_iter + 1)
    states = np.empty((config.n_iter, config.n_eps, config.H_r + 1), dtype=int)
    executed = np.empty((config.n_iter, config.n_eps, config.H_r), dtype=int)
    for i in range(config.n_iter):
        thetas[i] = policy.theta
        eps = [rollout(mdp, policy, filt, config.x0, config.H_r, trajectory_rng(seed, i * config.n_eps + e))
               for e in range(config.n_eps)]
        for e, ep in enumerate(eps):
            states[i, e] = ep.x
            executed[i, e] = ep.u
        returns[i] = np.mean([ep.R for ep in eps])
        policy = pg_update(eps, policy, config.lr(i + 1))
    thetas[-1] = policy.theta
    return PgResult(returns, thetas, policy, states, executed)


@dataclass(frozen=True)
class PowerSchedule:
    """eta_n = 1 / (n + 1)^power, indexed by the visit count n of the updated entry."""

    power: float = 0.8

    def __post_init__(self):
        # sum eta = inf needs power <= 1, sum eta^2 < inf needs power > 1/2
        if not 0.5 < self.power <= 1.0:
            raise ConfigurationError("power must lie in (1/2, 1] for the Robbins-Monro conditions")

    def __call__(self, n: int) -> float:
        return 1.0 / (n + 1.0) ** self.power


@dataclass(frozen=True)
class QConfig:
    gamma: float = 0.9
    x0: int = 0
    n_iter: int = 1500
    n_eps: int = 10
    explore: float = 0.1
    lr: PowerSchedule = dc_field(default_factory=PowerSchedule)


@dataclass
class QResult:
    table: QTable
    q_x0: np.ndarray     # (n_iter + 1, |U|) Q(x0, .) before training and after each iteration
    max_abs: float       # largest |Q| seen during training
    executed_from_above: np.ndarray  # executed actions taken from states above the filter threshold

    @property
    def greedy_x0(self) -> int:
        return int(np.argmax(self.q_x0[-1]))


def train_q(mdp: ChainMdp, filt: SafetyFilterG, config: QConfig = QConfig(), seed: int = 0) -> QResult:
    """Each iteration restarts at x0 and takes n_eps epsilon-greedy steps through the filter.

    The filter is treated as part of the environment: the table is indexed by
    the nominal action, while transitions follow the executed one.
    """
    table = QTable.zeros(mdp, config.gamma)
    q = table.q.copy()
    visits = np.zeros_like(q, dtype=int)
    hist = np.empty((config.n_iter + 1, len(mdp.actions)))
    x0 = config.x0 - mdp.lo
    hist[0] = q[x0]
    max_abs = 0.0
    above = []
    for i in range(config.n_iter):
        rng = trajectory_rng(seed, i)
        x = config.x0
        for _ in range(config.n_eps):
            s = x - mdp.lo
            if rng.random() < config.explore:
                a = int(rng.integers(len(mdp.actions)))
            else:
                a = int(np.argmax(q[s]))
            u = filt(x, mdp.actions[a])
            if filt.enabled and x > filt.threshold:
                above.append(u)
            r = float(mdp.reward(x, u))
            x_next = mdp.step(x, u, rng)
            eta = config.lr(visits[s, a])
            visits[s, a] += 1
            q[s, a] += eta * (r + config.gamma * q[x_next - mdp.lo].max() - q[s, a])
            max_abs = max(max_abs, abs(q[s, a]))
            x = x_next
        hist[i + 1] = q[x0]
    return QResult(QTable(q, config.gamma), hist, max_abs, np.asarray(above, dtype=int))


def q_value_iteration(mdp: ChainMdp, filt: SafetyFilterG, gamma: float, tol: float = 1e-12) -> np.ndarray:
    """Fixed point of the filtered Bellman operator, indexed by nominal action."""
    P_exec = mdp.kernel()
    S = mdp.states
    A = len(mdp.actions)
    P = np.empty_like(P_exec)
    R = np.empty((S.size, A))
    for i, x in enumerate(S):
        for a, u in enumerate(mdp.actions):
            ue = filt(x, u)
            P[i, a] = P_exec[i, mdp.actions.index(ue)]
            R[i, a] = mdp.reward(x, ue)
    q = np.zeros((S.size, A))
    while True:
        new = R + gamma * P @ q.max(axis=1)
        if np.max(np.abs(new - q)) < tol:
            return new
        q = new


def expected_return(mdp: ChainMdp, theta: float, filt: SafetyFilterG, x0: int, H_r: int) -> float:
    """Exact expected episode return of the filtered softmax policy (forward state distribution)."""
    policy = SoftmaxPolicy(theta, mdp.actions)
    S = mdp.states
    P = mdp.kernel()
    M = np.zeros((S.size, S.size))
    for i, x in enumerate(S):
        for a, pa in zip(mdp.actions, policy.probs(x)):
            M[i] += pa * P[i, mdp.actions.index(filt(x, a))]
    d = np.zeros(S.size)
    d[x0 - mdp.lo] = 1.0
    r = mdp.reward(S)
    J = 0.0
    for _ in range(H_r):
        J += d @ r
        d = d @ M
    return float(J)
