import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from probcert.baselines import (
    BaselineParams,
    _cvar_problem,
    _successor_phi,
    cvar_filter,
    cvar_filter_batch,
    cvar_worst_case_batch,
    empirical_cvar,
    equality_controls,
    halfspace_filter,
    prsbc_batch,
    prsbc_constraint,
    stocbf_batch,
    stocbf_constraint,
)
from probcert.certificate import ConstraintBatch
from probcert.errors import ConfigurationError, CvarInfeasible
from probcert.nominal import LinearNominal
from probcert.sde import BarrierSpec, SdeSystem

DT = 0.1
P = BaselineParams()


def test_stocbf_system1_example(sys1, spec1):
    c = stocbf_constraint(sys1, spec1, [3.0], P)
    assert c.a == pytest.approx([1.0])
    assert c.b == pytest.approx(-4.0, abs=1e-12)


def test_stocbf_linear_barrier_ignores_sigma(spec1):
    bs = [stocbf_constraint(SdeSystem.constant(2.0, 1.0, s), spec1, [2.3], P).b for s in (0.0, 0.5, 7.0)]
    assert bs[0] == bs[1] == bs[2]


def test_stocbf_boundary(sys1, spec1):
    c = stocbf_constraint(sys1, spec1, [1.0], P)
    assert c.b == pytest.approx(-2.0, abs=1e-12)
    assert c.meta["phi_drift"] == pytest.approx(2.0)


def test_stocbf_quadratic_barrier_ito_term():
    sys = SdeSystem.constant(0.0, 1.0, 0.5)
    spec = BarrierSpec(phi=lambda X: 4.0 - X[:, 0] ** 2, grad_phi=lambda X: -2.0 * X,
                       hess_phi=lambda X: np.full((X.shape[0], 1, 1), -2.0), H=10.0)
    c = stocbf_constraint(sys, spec, [1.0], P)
    # phi = 3, L_g phi = -2, Ito term 1/2 * 0.25 * (-2)
    assert c.a == pytest.approx([-2.0])
    assert c.b == pytest.approx(-3.0 + 0.25, abs=1e-12)


def test_prsbc_quantile_example(sys1, spec1):
    c = prsbc_constraint(sys1, spec1, P, [3.0], DT)
    q = 1.2815515655446004
    assert norm.ppf(0.9) == pytest.approx(q, abs=1e-12)
    assert c.b == pytest.approx(-4.0 + q * 2.0 / np.sqrt(DT), abs=1e-9)


def test_prsbc_median_recovers_mean_condition(sys1, spec1):
    c = prsbc_constraint(sys1, spec1, BaselineParams(epsilon_prsbc=0.5), [3.0], DT)
    assert c.b == pytest.approx(stocbf_constraint(sys1, spec1, [3.0], P).b, abs=1e-12)


def test_prsbc_noiseless_equals_stocbf(spec1):
    sys = SdeSystem.constant(2.0, 1.0, 0.0)
    for x in (0.5, 1.0, 3.0):
        assert prsbc_constraint(sys, spec1, P, [x], DT).b == stocbf_constraint(sys, spec1, [x], P).b


@pytest.mark.parametrize("scaling, factor", [("inv_sqrt_dt", 1 / np.sqrt(DT)), ("sqrt_dt", np.sqrt(DT)), ("none", 1.0)])
def test_prsbc_scalings(sys1, spec1, scaling, factor):
    c = prsbc_constraint(sys1, spec1, BaselineParams(prsbc_scaling=scaling), [3.0], DT)
    assert c.b == pytest.approx(-4.0 + norm.ppf(0.9) * 2.0 * factor, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(eps=st.floats(0.01, 0.5), x=st.floats(-3, 5), s=st.floats(0.0, 3.0), dt=st.floats(1e-3, 1.0))
def test_prsbc_never_less_restrictive(eps, x, s, dt):
    sys = SdeSystem.constant(2.0, 1.0, s)
    spec = BarrierSpec.affine([1.0], -1.0, H=10.0)
    X = np.array([[x]])
    p = BaselineParams(epsilon_prsbc=eps)
    assert prsbc_batch(sys, spec, p, X, dt).b[0] >= stocbf_batch(sys, spec, p, X).b[0]


def test_prsbc_rejects_bad_dt(sys1, spec1):
    with pytest.raises(ConfigurationError):
        prsbc_constraint(sys1, spec1, P, [3.0], 0.0)


@pytest.mark.parametrize("kw", [dict(eta=0.0), dict(epsilon_prsbc=1.0), dict(gamma_cvar=0.0),
                                dict(beta_cvar=1.5), dict(cvar_samples=99), dict(prsbc_scaling="dt")])
def test_params_validation(kw):
    with pytest.raises(ConfigurationError):
        BaselineParams(**kw)


# -- empirical CVaR ---------------------------------------------------------------

def test_cvar_full_tail_is_mean(rng):
    y = rng.normal(size=1000)
    assert empirical_cvar(y, 1.0) == pytest.approx(y.mean(), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(data=st.lists(st.floats(-100, 100), min_size=1, max_size=60), k=st.integers(1, 60))
def test_cvar_worst_fraction_and_variational_form(data, k):
    y = np.asarray(data)
    k = min(k, y.size)
    beta = k / y.size
    cv = empirical_cvar(y, beta)
    assert cv == pytest.approx(np.sort(y)[:k].mean(), rel=1e-9, abs=1e-9)
    # the sample form max_t { t - E[(t - Y)_+] / beta } is attained at the returned value
    for t in np.concatenate([y, [y.min() - 1, y.max() + 1]]):
        assert t - np.mean(np.maximum(t - y, 0)) / beta <= cv + 1e-9


def test_cvar_batch_axis(rng):
    Y = rng.normal(size=(3, 500))
    out = empirical_cvar(Y, 0.1)
    assert out.shape == (3,)
    assert out[1] == empirical_cvar(Y[1], 0.1)
    assert np.allclose(empirical_cvar(Y.T, 0.1, axis=0), out)


def test_cvar_gaussian_oracle(sys1, spec1, rng):
    """Empirical CVaR of the one-step successor barrier value against the closed form."""
    X = np.array([[3.0]])
    U = LinearNominal(np.array([[-2.5]]))(X)
    n = 1000
    Y = _successor_phi(sys1, spec1, X, U, DT, rng.standard_normal((1, n, 1)))[0]
    beta = P.beta_cvar
    mu = 3.0 + (2.0 + U[0, 0]) * DT - 1.0
    sd = 2.0 * np.sqrt(DT)
    exact = mu - sd * norm.pdf(norm.ppf(beta)) / beta
    boot = np.array([empirical_cvar(Y[rng.integers(0, n, n)], beta) for _ in range(2000)])
    assert abs(empirical_cvar(Y, beta) - exact) <= 3 * boot.std(ddof=1)


# -- CVaR filter ------------------------------------------------------------------------

def test_cvar_noiseless_reduces_to_deterministic_bound(spec1):
    sys = SdeSystem.constant(2.0, 1.0, 0.0)
    X = np.array([[3.0], [1.5]])
    N = np.array([[-40.0], [-30.0]])
    out = cvar_filter_batch(N, sys, spec1, P, X, DT, seed=0)
    assert out.active.all() and out.feasible.all()
    nxt = X[:, 0] + (2.0 + out.U[:, 0]) * DT - 1.0
    assert np.allclose(nxt, P.gamma_cvar * (X[:, 0] - 1.0), atol=1e-6)


def test_cvar_identity_when_nominal_satisfies(sys1, spec1):
    X = np.array([[3.0], [4.0]])
    N = np.array([[5.0], [0.0]])
    out = cvar_filter_batch(N, sys1, spec1, P, X, DT, seed=3)
    assert not out.active.any()
    assert np.array_equal(out.U, N)


def test_cvar_filter_single_matches_batch(sys1, spec1):
    nominal = LinearNominal(np.array([[-2.5]]))
    u = cvar_filter(nominal, sys1, spec1, P, [3.0], DT, seed=7, step=4)
    out = cvar_filter_batch(nominal(np.array([[3.0]])), sys1, spec1, P, np.array([[3.0]]), DT, seed=7, step=4)
    assert np.array_equal(u, out.U[0])


def test_cvar_filter_meets_bound(sys1, spec1):
    X = np.array([[3.0], [1.2], [2.0]])
    N = LinearNominal(np.array([[-2.5]]))(X)
    out = cvar_filter_batch(N, sys1, spec1, P, X, DT, seed=11, step=2)
    prob = _cvar_problem(sys1, spec1, P, X, DT, 11, 2)
    margin = prob.margin(out.U, np.zeros(3))
    assert np.all(margin >= -1e-9)
    # minimal: backing off the correction by more than the tolerance breaks the bound
    back = prob.margin(out.U - 1e-4 * prob.direction, np.zeros(3))
    assert np.all(back[out.active] < 0)


def test_cvar_no_authority_is_infeasible(spec1):
    sys = SdeSystem.constant(-1.0, 0.0, 1.0)
    with pytest.raises(CvarInfeasible):
        cvar_filter(lambda X: np.zeros((1, 1)), sys, spec1, P, [1.1], DT, seed=0)
    out = cvar_filter_batch(np.zeros((1, 1)), sys, spec1, P, np.array([[1.1]]), DT, seed=0)
    assert not out.feasible[0] and out.exposed_risk[0] > 0
    assert out.U[0, 0] == 0.0


def test_cvar_worst_case_equality(sys1, spec1):
    X = np.array([[3.0], [1.3], [2.2], [0.9]])
    U = cvar_worst_case_batch(sys1, spec1, P, X, DT, seed=5, step=1)
    prob = _cvar_problem(sys1, spec1, P, X, DT, 5, 1)
    # |d margin / du| = dt here, so a 1e-6 bisection width bounds the residual by 1e-7
    assert np.all(np.abs(prob.margin(U, np.zeros(4))) <= 1e-4)


def test_cvar_worst_case_without_authority(spec1):
    sys = SdeSystem.constant(2.0, 0.0, 1.0)
    assert np.array_equal(cvar_worst_case_batch(sys, spec1, P, np.array([[2.0]]), DT, seed=0), np.zeros((1, 1)))


# -- closed-form half-space helpers ---------------------------------------------------------

def _cb(a, b):
    a = np.asarray(a, dtype=float)
    return ConstraintBatch(a=a, b=np.asarray(b, dtype=float), F=np.full(len(b), np.nan), drift=np.zeros(len(b)))


def test_equality_controls_residual(rng):
    cb = _cb(rng.normal(size=(500, 3)), rng.normal(scale=10, size=500))
    U = equality_controls(cb)
    assert np.max(np.abs(cb.residual(U))) <= 1e-9


def test_equality_controls_stocbf_system1(sys1, spec1):
    X = np.linspace(0.5, 5, 10)[:, None]
    cb = prsbc_batch(sys1, spec1, P, X, DT)
    assert np.max(np.abs(cb.residual(equality_controls(cb)))) <= 1e-9


def test_equality_controls_no_authority():
    assert np.array_equal(equality_controls(_cb([[0.0]], [3.0])), [[0.0]])


def test_halfspace_filter():
    cb = _cb([[1.0, 1.0], [2.0, 0.0], [0.0, 0.0], [0.0, 0.0]], [1.0, -1.0, 0.5, -0.5])
    N = np.zeros((4, 2))
    out = halfspace_filter(N, cb)
    assert np.allclose(out.U[0], [0.5, 0.5])
    assert np.array_equal(out.U[1:], N[1:])
    assert out.active.tolist() == [True, False, False, False]
    assert out.feasible.tolist() == [True, True, False, True]
    assert out.exposed_risk[2] == 0.5


@settings(max_examples=60, deadline=None)
@given(a=st.lists(st.floats(-5, 5), min_size=2, max_size=2), b=st.floats(-10, 10),
       n=st.lists(st.floats(-10, 10), min_size=2, max_size=2))
def test_halfspace_filter_properties(a, b, n):
    cb = _cb([a], [b])
    N = np.array([n])
    out = halfspace_filter(N, cb)
    if np.linalg.norm(a) > 1e-6:
        assert cb.residual(out.U)[0] >= -1e-9 * (1 + abs(b))
    if cb.residual(N)[0] >= 0:
        assert np.array_equal(out.U, N)
