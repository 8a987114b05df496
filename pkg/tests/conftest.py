"""Shared fixtures: the 2-D benchmark plant used throughout the tests."""
import numpy as np
import pytest

from etplan.et_filter import FilterParams


@pytest.fixture
def iso2d_params() -> FilterParams:
    """Single-integrator 2-D plant with sigma_w = 0.07, sigma_v = 0.03."""
    eye = np.eye(2)
    return FilterParams(F=eye, G=eye, H=eye, Q=(0.07**2) * eye, R=(0.03**2) * eye)
