import math

import numpy as np
import pytest
from scipy.stats import norm

from stochsol.model import PiecewiseLinearTable, PowerLaw, VolatilityModel

BS_CALL_ATM = 2 * norm.cdf(0.5) - 1  # zero-rate Black-Scholes, unit vol, S = K = T = 1
INV_BESSEL3_MEAN = 2 * norm.cdf(1.0) - 1  # E[1/R_1] for a 3-d Bessel process from 1
INV_BESSEL3_DEFECT = 2 * (1 - norm.cdf(1.0))


def rough_table_knots(per_octave=4, octaves=14, noise=0.005, seed=7):
    """sigma(x) = x sampled on a geometric grid with seeded multiplicative noise."""
    rng = np.random.default_rng(seed)
    x = np.exp2(np.arange(-octaves * per_octave, octaves * per_octave + 1) / per_octave)
    y = x * (1 + rng.uniform(-noise, noise, x.size))
    return [[float(a), float(b)] for a, b in zip(x, y)]


@pytest.fixture
def gbm():
    return VolatilityModel(PowerLaw(1.0))


@pytest.fixture
def cev2():
    return VolatilityModel(PowerLaw(2.0))


@pytest.fixture
def sqrt_model():
    return VolatilityModel(PowerLaw(0.5))


@pytest.fixture
def rough_table():
    return VolatilityModel(PiecewiseLinearTable(tuple(map(tuple, rough_table_knots()))))


def within(value, ref, se, k=3.0):
    return abs(value - ref) <= k * se


def combined(*ses):
    return math.sqrt(sum(s * s for s in ses))


# acceptance results, echoed in the terminal summary
ACCEPTANCE = {}


def record(number, name, ok, detail=""):
    line = f"criterion {number:2d} {name}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
