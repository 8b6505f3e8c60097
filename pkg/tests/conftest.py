import numpy as np
import pytest

from bubblelab.profiles import build_profile_set, reference_grid
from bubblelab.radial import RadialGrid


@pytest.fixture(scope="session")
def ref_grid():
    return reference_grid()


@pytest.fixture(scope="session")
def profiles(ref_grid):
    return build_profile_set(ref_grid)


@pytest.fixture(scope="session")
def work_grid():
    """Moderate grid for field-level tests: resolves r ~ 0.01 .. 100."""
    return RadialGrid.geometric(4096, 100.0, r_core=0.01)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260810)


def smooth_bump(grid, center=2.0, width=0.7, amp=1.0):
    """Even, rapidly decaying bump (smooth as a radial function)."""
    r2 = grid.r**2
    return amp * np.exp(-((r2 - center**2) ** 2) / (2.0 * width**2 * center**2))
