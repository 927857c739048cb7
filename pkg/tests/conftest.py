import numpy as np
import pytest

from screamloc.localizer import MicArray

EDGE_M = 20.0


def tetrahedron(edge: float = EDGE_M, center=(0.0, 0.0, 0.0)) -> MicArray:
    verts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) * edge / np.sqrt(8)
    return MicArray(("1", "2", "3", "4"), verts + np.asarray(center))


def inside_tetrahedron(array: MicArray, rng: np.random.Generator, shrink: float = 0.8) -> np.ndarray:
    """Random point in the convex hull, pulled towards the centroid."""
    b = rng.dirichlet(np.ones(len(array)))
    p = b @ array.positions
    return array.centroid + shrink * (p - array.centroid)


@pytest.fixture
def tetra() -> MicArray:
    return tetrahedron()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
