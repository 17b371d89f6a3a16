import time

import numpy as np
import pytest

from probcert.experiments import build_field
from probcert.scenario import load_scenario
from probcert.sde import BarrierSpec, SdeSystem

_FIELDS = {}


@pytest.fixture
def sys1():
    return SdeSystem.constant(2.0, 1.0, 2.0, name="system1")


@pytest.fixture
def spec1():
    return BarrierSpec.affine([1.0], -1.0, H=10.0)


def _key(sc):
    return repr((sc.system, sc.barrier, sc.estimation, sc.run.dt))


def scenario_field(name):
    """Field for a built-in scenario, tabulated once per session.

    Scenarios that share the system and estimation settings share the field.
    """
    sc = load_scenario(name)
    if _key(sc) not in _FIELDS:
        _FIELDS[_key(sc)] = build_field(sc, jobs=4)
    return sc, _FIELDS[_key(sc)]


def timed_scenario_field(name):
    """Single-threaded tabulation with its wall time; the field joins the session cache."""
    sc = load_scenario(name)
    start = time.perf_counter()
    field = build_field(sc, jobs=1)
    _FIELDS[_key(sc)] = field
    return sc, field, time.perf_counter() - start


@pytest.fixture(scope="session")
def system1_field():
    return scenario_field("system1")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance lines, filled by test_acceptance and printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
