import numpy as np
import pytest

from ecoinf.core import IndividualTable, UnitAggregate, aggregate
from ecoinf.synth import GeneratorConfig, generate


def constant_p_units(pi, N=40, n=1000, seed=0):
    """Units whose joint counts follow pi exactly in expectation: n_uij = x_ui * pi_ij."""
    pi = np.asarray(pi, dtype=float)
    R = pi.shape[0]
    rng = np.random.default_rng(seed)
    units, tables = [], []
    for k in range(N):
        # x chosen so x_ui * pi_ij is integral
        x = rng.integers(1, n // (R * 20), size=R) * 20
        counts = np.rint(x[:, None] * pi).astype(int)
        tab = IndividualTable(f"c{k:03d}", counts)
        tables.append(tab)
        units.append(aggregate(tab))
    return units, tables


@pytest.fixture(scope="session")
def nobias_pop():
    cfg = GeneratorConfig(N=600, pi0=[[0.7, 0.2, 0.1], [0.3, 0.5, 0.2], [0.2, 0.3, 0.5]],
                          size_mean=1000, concentration=[3.0, 3.0, 3.0], seed=11)
    return generate(cfg)


@pytest.fixture(scope="session")
def small_pop():
    cfg = GeneratorConfig(N=60, pi0=[[0.6, 0.4], [0.3, 0.7], [0.5, 0.5]], size_mean=400,
                          bias=np.zeros((3, 1, 3)), seed=3)
    return generate(cfg)


@pytest.fixture
def table1_units():
    from ecoinf.synth import table1_fixture

    return table1_fixture(20)


def unit(uid, x, y):
    return UnitAggregate(uid, x, y)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance") or sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
