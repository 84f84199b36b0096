import numpy as np
import pytest

from shl.grid import Field, make_grid
from shl.randfield import CoefficientField, KernelSpec, synthesize_coefficient


@pytest.fixture(scope="session")
def coeff_2d():
    """Small random 2D coefficient field, symmetric map."""
    grid = make_grid(2, 8.0, 64)
    return synthesize_coefficient(grid, KernelSpec(rho=1.0), 0.25, "scalar-sigmoid", 101, 0)


@pytest.fixture(scope="session")
def coeff_2d_skew():
    """Small random 2D coefficient field with a skew part."""
    grid = make_grid(2, 8.0, 64)
    return synthesize_coefficient(
        grid, KernelSpec(rho=1.0, kappa=2), 0.25, "skew-sigmoid", 55, 0
    )


@pytest.fixture(scope="session")
def coeff_1d():
    grid = make_grid(1, 64.0, 512)
    return synthesize_coefficient(grid, KernelSpec(rho=1.0), 0.25, "scalar-sigmoid", 7, 0)


def constant_coefficient(grid, c: float) -> CoefficientField:
    d = grid.d
    data = np.zeros((d, d) + grid.shape)
    for i in range(d):
        data[i, i] = c
    return CoefficientField(Field(grid, data), min(c, 1.0))
