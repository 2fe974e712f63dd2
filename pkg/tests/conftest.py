import numpy as np
import pytest

from pointrt.pipeline import prepare
from pointrt.scene import MaterialParams, build_scene
from pointrt.synthgen import SynthSpec, generate, generate_with_truth

CONCRETE = {0: MaterialParams(5.3, 0.2, 0.2)}

# acceptance outcomes, criterion number -> (verdict, title, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        verdict, title, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d} {verdict}  {title}: {detail}")


def grid_plane(z=0.0, half=1.0, step=0.01, surface=0, material=0, normal=(0, 0, 1)):
    """Regular square grid of points on the plane ``z = const``."""
    xs = np.arange(-half, half + step / 2, step)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    n = X.size
    return np.column_stack([X.ravel(), Y.ravel(), np.full(n, z), np.tile(normal, (n, 1)),
                            np.full(n, surface), np.full(n, material)])


def plane_scene(**kw):
    return build_scene(grid_plane(**kw), transmitters=[[0, 0, 1]], receivers=[[0.5, 0, 1]], materials=CONCRETE)


@pytest.fixture(scope="session")
def plane():
    return plane_scene()


@pytest.fixture(scope="session")
def plane_prep(plane):
    return prepare(plane)


@pytest.fixture(scope="session")
def corner_truth():
    return generate_with_truth(SynthSpec("corner"))


@pytest.fixture(scope="session")
def corner_prep(corner_truth):
    return prepare(corner_truth[0])


@pytest.fixture(scope="session")
def room():
    return generate(SynthSpec("room5mat", density=1024))
