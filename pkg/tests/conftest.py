"""Shared fixtures for the kdvlab test suite."""

import math
import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from kdvlab.numerics import NewtonConfig  # noqa: E402
from kdvlab.services import OutputService  # noqa: E402
from kdvlab.spectral import eig_B, lowest_modes  # noqa: E402


@pytest.fixture
def newton_config():
    return NewtonConfig()


@pytest.fixture(scope="session")
def spectrum_pi():
    """Eigenpairs 1..10 of B at L = pi."""
    return eig_B(math.pi, 1, 10)


@pytest.fixture(scope="session")
def modes_five():
    """The 16 lowest eigenpairs of B at L = 5."""
    return lowest_modes(5.0, 16)


@pytest.fixture
def output(tmp_path):
    return OutputService(tmp_path / "out")
