import numpy as np
import pytest

from probcert.dp import (
    BoxDomain,
    ChainTransition,
    EulerTransition,
    FiniteDomain,
    KernelModel,
    dp_reach_avoid,
    tabular_reach_avoid,
)
from probcert.errors import ConfigurationError
from probcert.rl import ChainMdp
from probcert.sde import BarrierSpec, SdeSystem

CHAIN = ChainTransition(0.0, 10.0)
STATES = FiniteDomain(tuple(range(11)))


def _exact(kind):
    mdp = ChainMdp()
    inside = mdp.states > 5.5
    return tabular_reach_avoid(mdp.kernel(), inside, 10, kind)


@pytest.fixture(scope="module")
def chain_fits():
    out = {}
    for stype, kind in ((2, "avoid"), (4, "reach")):
        spec = BarrierSpec.affine([1.0], -5.5, safety_type=stype)
        out[kind] = dp_reach_avoid(CHAIN, spec, STATES, M=100, n_s=1000, T_d=10, seed=0, candidates=[-1, 0, 1])
    return out


@pytest.mark.parametrize("kind", ["avoid", "reach"])
def test_chain_matches_exact_dp(chain_fits, kind):
    res = chain_fits[kind]
    assert np.max(np.abs(res[0](STATES.points) - _exact(kind)[0])) <= 0.05
    assert all(r.feasible for r in res.reports)


@pytest.mark.parametrize("stype,kind", [(2, "avoid"), (4, "reach")])
def test_every_step_matches_with_narrow_kernels(stype, kind):
    # close to the terminal step the reach value jumps from 0 to 0.92 between
    # neighbouring states; resolving that needs kernels narrower than one state
    spec = BarrierSpec.affine([1.0], -5.5, safety_type=stype)
    res = dp_reach_avoid(CHAIN, spec, STATES, seed=0, candidates=[-1, 0, 1], nu_range=(1e-4, 1.0))
    V = _exact(kind)
    for k in range(11):
        assert np.max(np.abs(res[k](STATES.points) - V[k])) <= 0.05, k


def test_uncontrolled_chain_with_narrow_kernels():
    # a single candidate leaves the value with a kink at the set boundary, which
    # the default bandwidth law cannot resolve; narrower kernels can
    mdp = ChainMdp()
    P = mdp.kernel(actions=(0,))
    for stype, kind in ((2, "avoid"), (4, "reach")):
        spec = BarrierSpec.affine([1.0], -5.5, safety_type=stype)
        res = dp_reach_avoid(CHAIN, spec, STATES, T_d=10, seed=0, candidates=[0], nu_range=(1e-4, 1.0))
        V = tabular_reach_avoid(P, mdp.states > 5.5, 10, kind)
        assert np.max(np.abs(res[0](STATES.points) - V[0])) <= 0.05


def test_tabular_two_state_chain():
    # state 1 safe; it stays with probability 0.9 under action 0, 0.5 under action 1
    P = np.array([[[1.0, 0.0], [1.0, 0.0]], [[0.1, 0.9], [0.5, 0.5]]])
    V = tabular_reach_avoid(P, np.array([False, True]), 3, "avoid")
    assert np.allclose(V[:, 1], [0.9 ** 3, 0.9 ** 2, 0.9, 1.0])
    assert np.all(V[:, 0] == 0)
    R = tabular_reach_avoid(np.array([[[0.5, 0.5]], [[0.0, 1.0]]]), np.array([False, True]), 2, "reach")
    assert np.allclose(R[:, 0], [0.75, 0.5, 0.0])


@pytest.mark.parametrize("kind", ["avoid", "reach"])
def test_value_monotone_in_remaining_horizon(chain_fits, kind):
    res = chain_fits[kind]
    X = STATES.points
    vals = np.array([res[k](X) for k in range(11)])  # row k has 10 - k steps to go
    d = np.diff(vals[::-1], axis=0)  # along increasing remaining horizon
    if kind == "reach":
        assert np.all(d >= -0.05)
    else:
        assert np.all(d <= 0.05)


def test_avoid_value_vanishes_outside_set(chain_fits):
    res = chain_fits["avoid"]
    X = np.arange(0, 6, dtype=float)[:, None]
    for k in range(11):
        assert np.all(res[k](X) == 0.0)


def test_deterministic_reachability():
    sys = SdeSystem.constant(0.0, 1.0, 0.0)
    spec = BarrierSpec.affine([1.0], -1.0, safety_type=4)
    res = dp_reach_avoid(EulerTransition(sys, 1.0), spec, BoxDomain((-2.0,), (2.0,)), M=60, n_s=300, T_d=2,
                         seed=3)
    # from x = 0.3 the control u = 1 reaches C in one step
    assert res[1](np.array([[0.3]]))[0] >= 1 - 0.05
    assert res.greedy(np.array([[0.3]]), 1)[0, 0] >= 0.7


def test_kernel_model_validation():
    with pytest.raises(ConfigurationError):
        KernelModel(np.zeros((2, 1)), np.array([[1.0], [0.0]]), np.ones(2))
    m = KernelModel(np.zeros((2, 1)), np.ones((2, 1)), np.ones(2))
    assert np.all(np.isfinite(m(np.linspace(-50, 50, 11)[:, None])))


def test_box_integrals_match_quadrature():
    m = KernelModel(np.array([[0.2], [1.5]]), np.array([[0.3], [0.05]]), np.ones(2))
    dom = BoxDomain((-1.0,), (2.0,))
    x = np.linspace(-1, 2, 30001)[:, None]
    quad = np.trapezoid(m.basis(x), x[:, 0], axis=0)
    assert np.allclose(dom.kernel_integrals(m), quad, atol=1e-8)


def test_rejects_invariance_types():
    with pytest.raises(ConfigurationError):
        dp_reach_avoid(CHAIN, BarrierSpec.affine([1.0], -5.5, safety_type=1), STATES)
