import numpy as np
import pytest

from prost.grid import Intrinsics, make_canonical_grid
from prost.phantoms import gaussian_blobs


def smooth_scene(dims=16, det=16, K=32, seed=0, n_blobs=6):
    """Tapered blob phantom, 128 mm across, with a CIOS grid."""
    vol = gaussian_blobs((dims,) * 3, n_blobs=n_blobs, seed=seed, spacing=(128.0 / dims,) * 3)
    grid = make_canonical_grid(Intrinsics.cios(det), vol.meta, K)
    return vol, grid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scene():
    return smooth_scene()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
