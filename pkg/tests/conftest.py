import numpy as np
import pytest

from pairpose.geom3d import RigidTransform, matrix_from_quat
from pairpose.solver import CorrespondenceSet

_CRITERIA = []


def random_pose(rng, scale=0.1, depth=0.7):
    return RigidTransform(matrix_from_quat(rng.normal(size=4)), rng.uniform(-scale, scale, 3) + [0, 0, depth])


def clean_correspondences(rng, n, T, spread=0.05):
    """Model points in a ball, random unit normals, camera side = exact image under T."""
    m = rng.normal(size=(n, 3)) * spread
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return CorrespondenceSet.from_arrays(T.apply(m), T.rotate(nrm), m, nrm)


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, title, passed, detail)``."""

    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}" + (f" -- {detail}" if detail else "")
        _CRITERIA.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
