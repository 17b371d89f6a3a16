"""Scenario files: systems, barriers, controllers and run settings in YAML.

Drift, input and diffusion entries are expressions over the state names,
optionally piecewise::

    f:
      - - {when: "x > 1.5", value: "2"}
        - {value: "-3"}

Expressions may use numbers, state names, arithmetic (+ - * / **), comparisons
and ``and``/``or``/``not``; nothing else is evaluated.
"""

from __future__ import annotations

import ast
import copy
import operator
from dataclasses import asdict, dataclass, field as dc_field, fields
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np
import sympy
import yaml

from .baselines import BaselineParams
from .certificate import CertificateParams
from .errors import ConfigurationError
from .nominal import BlackBox, LinearNominal, NnNominal, ZeroNominal, load_command
from .rl import ChainMdp, PgConfig, PowerSchedule, QConfig, SafetyFilterG
from .sde import BarrierSpec, SdeSystem

SCHEMA_VERSION = 1

# -- expression interpreter ------------------------------------------------------------

_BIN = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
        ast.Div: operator.truediv, ast.Pow: operator.pow}
_CMP = {ast.Lt: operator.lt, ast.LtE: operator.le, ast.Gt: operator.gt,
        ast.GtE: operator.ge, ast.Eq: operator.eq, ast.NotEq: operator.ne}


def _compile_node(node, names):
    if isinstance(node, ast.Expression):
        return _compile_node(node.body, names)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        v = float(node.value)
        return lambda env: v
    if isinstance(node, ast.Name):
        if node.id not in names:
            raise ConfigurationError(f"unknown name {node.id!r} in expression")
        key = node.id
        return lambda env: env[key]
    if isinstance(node, ast.BinOp) and type(node.op) in _BIN:
        op, lhs, rhs = _BIN[type(node.op)], _compile_node(node.left, names), _compile_node(node.right, names)
        return lambda env: op(lhs(env), rhs(env))
    if isinstance(node, ast.UnaryOp):
        inner = _compile_node(node.operand, names)
        if isinstance(node.op, ast.USub):
            return lambda env: -inner(env)
        if isinstance(node.op, ast.UAdd):
            return inner
        if isinstance(node.op, ast.Not):
            return lambda env: np.logical_not(inner(env))
    if isinstance(node, ast.Compare):
        first = _compile_node(node.left, names)
        ops = [_CMP[type(o)] for o in node.ops if type(o) in _CMP]
        if len(ops) != len(node.ops):
            raise ConfigurationError("unsupported comparison operator")
        rest = [_compile_node(c, names) for c in node.comparators]

        def compare(env):
            left = first(env)
            out = True
            for op, r in zip(ops, rest):
                right = r(env)
                out = np.logical_and(out, op(left, right))
                left = right
            return out
        return compare
    if isinstance(node, ast.BoolOp):
        parts = [_compile_node(v, names) for v in node.values]
        comb = np.logical_and if isinstance(node.op, ast.And) else np.logical_or

        def boolean(env):
            out = parts[0](env)
            for p in parts[1:]:
                out = comb(out, p(env))
            return out
        return boolean
    raise ConfigurationError(f"unsupported syntax in expression: {ast.dump(node)[:60]}")


@lru_cache(maxsize=None)
def compile_expr(text: str, names: tuple) -> Callable[[dict], Any]:
    """Compile a whitelisted arithmetic expression over ``names``."""
    try:
        tree = ast.parse(str(text).strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse expression {text!r}: {exc.msg}") from None
    return _compile_node(tree, set(names))


def compile_entry(entry, names: tuple) -> Callable[[dict, int], np.ndarray]:
    """A scalar or guarded-piecewise entry as a batch function of the environment."""
    if isinstance(entry, (int, float)):
        entry = repr(float(entry))
    if isinstance(entry, str):
        fn = compile_expr(entry, names)
        return lambda env, B: np.broadcast_to(np.asarray(fn(env), dtype=float), (B,))
    if isinstance(entry, list):
        guards, values = [], []
        default = None
        for i, piece in enumerate(entry):
            if not isinstance(piece, dict) or "value" not in piece:
                raise ConfigurationError("piecewise entries need a 'value' key")
            val = compile_entry(piece["value"], names)
            if "when" in piece:
                guards.append(compile_expr(str(piece["when"]), names))
                values.append(val)
            else:
                if i != len(entry) - 1:
                    raise ConfigurationError("the unguarded piece must come last")
                default = val
        if default is None:
            raise ConfigurationError("piecewise entries need a final unguarded piece")

        def piecewise(env, B):
            out = default(env, B).copy()
            taken = np.zeros(B, dtype=bool)
            for g, v in zip(guards, values):
                hit = np.broadcast_to(np.asarray(g(env), dtype=bool), (B,)) & ~taken
                out = np.where(hit, v(env, B), out)
                taken |= hit
            return out
        return piecewise
    raise ConfigurationError(f"unsupported entry {entry!r}")


# -- scenario schema --------------------------------------------------------------------

@dataclass
class SystemDef:
    state: list = dc_field(default_factory=lambda: ["x"])
    inputs: int = 1
    noise: int = 1
    f: list = dc_field(default_factory=lambda: ["0"])
    g: list = dc_field(default_factory=lambda: [["1"]])
    sigma: list = dc_field(default_factory=lambda: [["1"]])


@dataclass
class BarrierDef:
    phi: str = "x"
    f_ell: str = "0"
    ell0: float = 0.0
    horizon_mode: str = "fixed"
    H: float = 10.0
    safety_type: int = 1


@dataclass
class NominalDef:
    kind: str = "zero"            # zero | linear | nn | command
    gain: list | None = None      # linear: m x n
    W1: list | None = None
    b1: list | None = None
    W2: list | None = None
    b2: list | None = None
    command: str | None = None    # module:function


@dataclass
class ControllerDef:
    """Certificate and baseline gains."""

    alpha: float = 1.0
    epsilon: float = 0.1
    stocbf_eta: float = 1.0
    prsbc_eta: float = 1.0
    prsbc_epsilon: float = 0.1
    prsbc_scaling: str = "inv_sqrt_dt"
    cvar_gamma: float = 0.65
    cvar_beta: float = 0.1
    cvar_samples: int = 1000
    drop_hessian: bool = False


@dataclass
class RunDef:
    x0: list = dc_field(default_factory=lambda: [3.0])
    dt: float = 0.1
    T_max: float = 10.0
    n_traj: int = 100
    seed: int = 0


@dataclass
class EstimationDef:
    algorithm: str = "mc"
    policy: NominalDef = dc_field(default_factory=NominalDef)
    grid: dict = dc_field(default_factory=lambda: {"x0": {"start": -1.0, "stop": 12.0, "step": 0.05}})
    samples: int = 10000
    smoothing: float | None = None
    check_initial: bool = False
    interp: str = "cubic"
    seed: int = 0


@dataclass
class RlDef:
    lo: int = 0
    hi: int = 10
    noise_variance: float = 0.16
    filter_threshold: float = 5.0
    forced_action: int = -1
    x0: int = 0
    pg_iterations: int = 1500
    pg_episodes: int = 10
    horizon: int = 10
    q_gamma: float = 0.9
    q_iterations: int = 1500
    q_steps: int = 10
    q_explore: float = 0.1
    q_lr_power: float = 0.8


@dataclass
class Units:
    time: str = "s"
    state: str = "1"
    control: str = "1"


@dataclass
class Scenario:
    name: str = "scenario"
    schema_version: int = SCHEMA_VERSION
    units: Units = dc_field(default_factory=Units)
    system: SystemDef = dc_field(default_factory=SystemDef)
    barrier: BarrierDef = dc_field(default_factory=BarrierDef)
    nominal: NominalDef = dc_field(default_factory=NominalDef)
    controller: ControllerDef = dc_field(default_factory=ControllerDef)
    run: RunDef = dc_field(default_factory=RunDef)
    estimation: EstimationDef = dc_field(default_factory=EstimationDef)
    rl: RlDef | None = None

    # -- serialization
    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_yaml())
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = copy.deepcopy(d)
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported scenario schema version {version}")
        est = d.get("estimation", {}) or {}
        if "policy" in est:
            est["policy"] = _build(NominalDef, est["policy"], "estimation.policy")
        return cls(
            name=d.get("name", "scenario"),
            schema_version=version,
            units=_build(Units, d.get("units"), "units"),
            system=_build(SystemDef, d.get("system"), "system"),
            barrier=_build(BarrierDef, d.get("barrier"), "barrier"),
            nominal=_build(NominalDef, d.get("nominal"), "nominal"),
            controller=_build(ControllerDef, d.get("controller"), "controller"),
            run=_build(RunDef, d.get("run"), "run"),
            estimation=_build(EstimationDef, est, "estimation"),
            rl=None if d.get("rl") is None else _build(RlDef, d["rl"], "rl"),
        )

    @classmethod
    def from_yaml(cls, text: str) -> "Scenario":
        data = yaml.safe_load(text)
        if not isinstance(data, dict):
            raise ConfigurationError("scenario file must contain a mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_yaml(Path(path).read_text())

    # -- construction
    def build_system(self) -> SdeSystem:
        return build_system(self.system, self.name)

    def build_barrier(self) -> BarrierSpec:
        return build_barrier(self.barrier, tuple(self.system.state))

    def build_nominal(self):
        return build_nominal(self.nominal, len(self.system.state), self.system.inputs)

    def build_field_policy(self):
        return build_nominal(self.estimation.policy, len(self.system.state), self.system.inputs)

    def certificate_params(self, **overrides) -> CertificateParams:
        c = self.controller
        kw = dict(alpha_gain=c.alpha, epsilon=c.epsilon, drop_hessian=c.drop_hessian)
        kw.update(overrides)
        return CertificateParams(**kw)

    def baseline_params(self, controller: str) -> BaselineParams:
        c = self.controller
        eta = c.prsbc_eta if controller == "prsbc" else c.stocbf_eta
        return BaselineParams(eta=eta, epsilon_prsbc=c.prsbc_epsilon, gamma_cvar=c.cvar_gamma,
                              beta_cvar=c.cvar_beta, cvar_samples=c.cvar_samples,
                              prsbc_scaling=c.prsbc_scaling)

    def grid_axes(self) -> dict:
        out = {}
        for axis, spec in self.estimation.grid.items():
            if isinstance(spec, dict):
                start, stop, step = float(spec["start"]), float(spec["stop"]), float(spec["step"])
                count = int(round((stop - start) / step)) + 1
                out[axis] = start + step * np.arange(count)
            else:
                out[axis] = np.asarray(spec, dtype=float)
        return out

    # -- chain experiments
    def build_mdp(self) -> ChainMdp:
        r = self._rl()
        return ChainMdp.from_variance(r.noise_variance, lo=r.lo, hi=r.hi)

    def build_filter(self, enabled: bool = True) -> SafetyFilterG:
        r = self._rl()
        return SafetyFilterG(r.filter_threshold, r.forced_action) if enabled else SafetyFilterG.identity()

    def pg_config(self) -> PgConfig:
        r = self._rl()
        return PgConfig(n_iter=r.pg_iterations, n_eps=r.pg_episodes, H_r=r.horizon, x0=r.x0)

    def q_config(self) -> QConfig:
        r = self._rl()
        return QConfig(gamma=r.q_gamma, x0=r.x0, n_iter=r.q_iterations, n_eps=r.q_steps,
                       explore=r.q_explore, lr=PowerSchedule(r.q_lr_power))

    def _rl(self) -> RlDef:
        if self.rl is None:
            raise ConfigurationError(f"scenario {self.name!r} has no rl section")
        return self.rl


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**data)


# -- builders --------------------------------------------------------------------------

def _env(names, X):
    return {name: X[:, i] for i, name in enumerate(names)}


def build_system(d: SystemDef, name: str = "") -> SdeSystem:
    names = tuple(d.state)
    n, m, xi = len(names), int(d.inputs), int(d.noise)
    if len(d.f) != n or len(d.g) != n or len(d.sigma) != n:
        raise ConfigurationError("f, g and sigma need one row per state")
    if any(len(row) != m for row in d.g) or any(len(row) != xi for row in d.sigma):
        raise ConfigurationError("g rows need one entry per input and sigma rows one per noise channel")
    f = [compile_entry(e, names) for e in d.f]
    g = [[compile_entry(e, names) for e in row] for row in d.g]
    s = [[compile_entry(e, names) for e in row] for row in d.sigma]

    def drift(X):
        env, B = _env(names, X), X.shape[0]
        return np.stack([fi(env, B) for fi in f], axis=1)

    def matrix(rows):
        def fn(X):
            env, B = _env(names, X), X.shape[0]
            return np.stack([np.stack([e(env, B) for e in row], axis=1) for row in rows], axis=1)
        return fn

    return SdeSystem(n, m, xi, drift, matrix(g), matrix(s), name=name)


def _sym_to_text(expr) -> str:
    return sympy.sstr(sympy.simplify(expr))


def build_barrier(d: BarrierDef, names: tuple) -> BarrierSpec:
    """Barrier with gradient and Hessian derived symbolically from the phi expression."""
    compile_expr(d.phi, names)  # validate before handing the text to sympy
    syms = sympy.symbols(names)
    syms = syms if isinstance(syms, tuple) else (syms,)
    local = dict(zip(names, syms))
    expr = sympy.sympify(d.phi, locals=local)
    grad = [_sym_to_text(sympy.diff(expr, s)) for s in syms]
    hess = [[_sym_to_text(sympy.diff(expr, a, b)) for b in syms] for a in syms]
    phi_fn = compile_entry(d.phi, names)
    grad_fn = [compile_entry(t, names) for t in grad]
    hess_fn = [[compile_entry(t, names) for t in row] for row in hess]
    f_ell = compile_entry(d.f_ell, ("L",))

    def phi(X):
        return phi_fn(_env(names, X), X.shape[0])

    def grad_phi(X):
        env, B = _env(names, X), X.shape[0]
        return np.stack([g(env, B) for g in grad_fn], axis=1)

    def hess_phi(X):
        env, B = _env(names, X), X.shape[0]
        return np.stack([np.stack([h(env, B) for h in row], axis=1) for row in hess_fn], axis=1)

    def margin_rate(L):
        L = np.atleast_1d(np.asarray(L, dtype=float))
        return f_ell({"L": L}, L.shape[0])

    kw = dict(ell0=float(d.ell0), horizon_mode=d.horizon_mode, H=float(d.H), safety_type=int(d.safety_type))
    if str(d.f_ell).strip() not in ("0", "0.0"):
        kw["f_ell"] = margin_rate
    return BarrierSpec(phi=phi, grad_phi=grad_phi, hess_phi=hess_phi, **kw)


def build_nominal(d: NominalDef, n: int, m: int):
    if d.kind == "zero":
        return BlackBox(ZeroNominal(m))
    if d.kind == "linear":
        K = np.asarray(d.gain, dtype=float).reshape(m, n)
        return BlackBox(LinearNominal(K))
    if d.kind == "nn":
        parts = [np.atleast_1d(np.asarray(v, dtype=float)) for v in (d.W1, d.b1, d.W2, d.b2)]
        W1 = parts[0].reshape(-1, n)
        W2 = parts[2].reshape(m, -1)
        return BlackBox(NnNominal(W1, parts[1], W2, parts[3]))
    if d.kind == "command":
        if not d.command:
            raise ConfigurationError("command nominal needs 'command: module:function'")
        return load_command(d.command)
    raise ConfigurationError(f"unknown nominal kind {d.kind!r}")


# -- packaged scenarios -----------------------------------------------------------------

BUILTIN = ("system1", "system2", "nn", "chain")


def builtin_path(name: str) -> Path:
    if name not in BUILTIN:
        raise ConfigurationError(f"unknown built-in scenario {name!r}; choose from {BUILTIN}")
    return Path(str(resources.files("probcert") / "scenarios" / f"{name}.yaml"))


def load_scenario(ref) -> Scenario:
    """Load a scenario from a path, or by built-in name."""
    p = Path(str(ref))
    if p.exists():
        return Scenario.load(p)
    return Scenario.load(builtin_path(str(ref)))
