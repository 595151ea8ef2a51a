"""Shared fixtures: the expensive scale decompositions are built once."""

import pytest

from wsaw4.cov_decomp import build_decomposition, coefficient_sequences
from wsaw4.lattice_green import LatticeSpec


@pytest.fixture(scope="session")
def spec4():
    return LatticeSpec.window(4)


@pytest.fixture(scope="session")
def dec0_J48(spec4):
    """Massless d=4 decomposition, L=2, J=48."""
    return build_decomposition(spec4, L=2, m2=0.0, J=48, grid=32)


@pytest.fixture(scope="session")
def coeffs0(dec0_J48):
    return coefficient_sequences(dec0_J48)


@pytest.fixture(scope="session")
def decomp_at(spec4):
    """Factory with a session cache: decomposition at (m2, J, grid)."""
    cache = {}

    def get(m2, J=32, grid=32):
        key = (m2, J, grid)
        if key not in cache:
            cache[key] = build_decomposition(spec4, L=2, m2=m2, J=J, grid=grid)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def coeffs_at(decomp_at):
    cache = {}

    def get(m2, J=32, grid=32):
        key = (m2, J, grid)
        if key not in cache:
            cache[key] = coefficient_sequences(decomp_at(m2, J, grid))
        return cache[key]

    return get
