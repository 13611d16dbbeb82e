import numpy as np
import pytest

from glotvoc.glottal import build_wavetables


@pytest.fixture(scope="session")
def default_tables():
    """The production 100 x 2048 table."""
    return build_wavetables()


@pytest.fixture(scope="session")
def small_tables():
    """Cheap table for lookup/gradient tests."""
    return build_wavetables(16, 256)


@pytest.fixture()
def rng():
    return np.random.default_rng(0xC0FFEE)


def random_stable_coeffs(rng, m, r_lo=0.2, r_hi=0.9):
    """Direct-form a1..aM with all poles of radius < r_hi (< 1)."""
    poly = np.array([1.0])
    for _ in range(m // 2):
        r = rng.uniform(r_lo, r_hi)
        theta = rng.uniform(0.0, np.pi)
        poly = np.convolve(poly, [1.0, -2.0 * r * np.cos(theta), r * r])
    if m % 2:
        poly = np.convolve(poly, [1.0, -rng.uniform(-r_hi, r_hi)])
    return poly[1:]
