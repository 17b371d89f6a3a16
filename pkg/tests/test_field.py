import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probcert.errors import ConfigurationError, OutOfHull
from probcert.field import SafeProbField
from probcert.sde import AugmentedState, BarrierSpec


def _field_1d(values, order="cubic"):
    x = np.linspace(0.0, 4.0, len(values))
    return SafeProbField(("x0",), (x,), np.asarray(values, dtype=float), 0.01, n=1, interp_order=order)


def _z(x, T=10.0, L=0.0):
    return np.array([[T, L, x - 1.0, x]])


@pytest.mark.parametrize("order", ["linear", "cubic"])
def test_value_at_nodes_is_exact(order, rng):
    vals = rng.uniform(0, 1, 9)
    f = _field_1d(vals, order)
    for x, v in zip(f.grid[0], vals):
        F, _, _ = f.query_batch(_z(x))
        assert F[0] == pytest.approx(v, abs=1e-12)


def test_two_dimensional_nodes_exact(rng):
    T = np.linspace(1, 10, 5)
    x = np.linspace(-1, 3, 7)
    vals = rng.uniform(0, 1, (5, 7))
    f = SafeProbField(("T", "x0"), (T, x), vals, 0.0, n=1)
    for i, t in enumerate(T):
        for j, xv in enumerate(x):
            assert f.value_at(np.array([[t, xv]]))[0] == pytest.approx(vals[i, j], abs=1e-12)


@pytest.mark.parametrize("order", ["linear", "cubic"])
def test_linear_ramp_has_constant_gradient(order):
    x = np.linspace(0.0, 4.0, 9)
    f = SafeProbField(("x0",), (x,), 0.1 + 0.2 * x, 0.0, n=1, interp_order=order)
    for q in np.linspace(0.0, 4.0, 23):
        F, g, h = f.query_batch(_z(q))
        assert g[0, 3] == pytest.approx(0.2, abs=1e-9)
        assert abs(h[0, 3, 3]) < 1e-9
        # T, L and phi are not tabulated: their components vanish
        assert np.all(g[0, :3] == 0)


_SMOOTH = SafeProbField(("T", "x0"), (np.linspace(1, 10, 8), np.linspace(-1, 3, 11)),
                        0.5 + 0.4 * np.sin(np.add.outer(np.linspace(1, 10, 8) / 5, np.linspace(-1, 3, 11))),
                        0.0, n=1)


@settings(max_examples=60, deadline=None)
@given(st.floats(1.01, 9.99), st.floats(-0.99, 2.99))
def test_derivatives_match_finite_differences_of_interpolant(T, x):
    h = 1e-6
    z = np.array([[T, 0.0, x - 1.0, x]])
    _, g, H = _SMOOTH.query_batch(z)
    for i in (0, 3):
        e = np.zeros((1, 4))
        e[0, i] = h
        up = _SMOOTH._eval(_SMOOTH.coords(z + e), [0, 0])[0]
        dn = _SMOOTH._eval(_SMOOTH.coords(z - e), [0, 0])[0]
        assert g[0, i] == pytest.approx((up - dn) / (2 * h), rel=1e-6, abs=1e-8)
        gu = _SMOOTH.query_batch(z + e)[1][0]
        gd = _SMOOTH.query_batch(z - e)[1][0]
        assert np.allclose(H[0, i], (gu - gd) / (2 * h), rtol=1e-6, atol=1e-7)


def test_values_clamped_and_counted():
    f = _field_1d([-0.2, 0.1, 0.5, 1.3, 0.9])
    assert f.clamped_nodes == 2
    assert f.values.min() == 0.0 and f.values.max() == 1.0


def test_out_of_hull_reports_nearest_point():
    f = _field_1d(np.linspace(0, 1, 6))
    with pytest.raises(OutOfHull) as exc:
        f.query_batch(_z(5.0))
    assert np.array_equal(exc.value.nearest, [4.0])
    F, _, _ = f.query_batch(_z(5.0), clamp=True)
    assert F[0] == pytest.approx(1.0)


def test_query_single_state():
    f = _field_1d(np.linspace(0, 1, 6))
    spec = BarrierSpec.affine([1.0], -1.0)
    F, g, h = f.query(AugmentedState.at([2.0], spec))
    assert F == pytest.approx(0.5)
    assert g.shape == (4,) and h.shape == (4, 4)


def test_save_load_roundtrip(tmp_path, rng):
    f = _field_1d(rng.uniform(0, 1, 7))
    f.provenance = {"algorithm": "monte-carlo", "samples": 100, "seed": 4}
    f.fixed = {"T": 10.0, "L": 0.0}
    path = f.save(tmp_path / "a.field")
    assert path.read_text().startswith("PROBCERT-FIELD 1\n")
    g = SafeProbField.load(path)
    assert np.array_equal(f.values, g.values) and np.array_equal(f.stderr, g.stderr)
    assert g.provenance == f.provenance and g.fixed == f.fixed
    q = np.linspace(0, 4, 17)[:, None]
    assert np.array_equal(f.value_at(q), g.value_at(q))


def test_load_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.field"
    p.write_text("{}\n")
    with pytest.raises(ConfigurationError):
        SafeProbField.load(p)


def test_rejects_bad_grids():
    with pytest.raises(ConfigurationError):
        SafeProbField(("x0",), (np.array([0.0, 1.0, 1.0, 2.0]),), np.zeros(4), 0.0, n=1)
    with pytest.raises(ConfigurationError):
        SafeProbField(("x0",), (np.arange(3.0),), np.zeros(3), 0.0, n=1)
    with pytest.raises(ConfigurationError):
        SafeProbField(("y",), (np.arange(5.0),), np.zeros(5), 0.0, n=1)
