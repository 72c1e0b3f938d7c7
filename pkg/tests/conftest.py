import numpy as np
import pytest
import torch

from meshrl import tasks
from meshrl.mesh import TriMesh

torch.set_num_threads(1)


def make_unit_square() -> TriMesh:
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    tags = {(0, 1): "outer", (1, 2): "outer", (2, 3): "outer", (0, 3): "outer"}
    return TriMesh(verts, tris, tags)


def make_scalene() -> TriMesh:
    # BC is strictly the longest edge
    verts = np.array([[0.0, 0.0], [1.2, 0.0], [0.3, 1.0]])
    tris = np.array([[0, 1, 2]])
    tags = {(0, 1): "outer", (1, 2): "outer", (0, 2): "outer"}
    return TriMesh(verts, tris, tags)


def brute_force_assignment(mesh: TriMesh, points: np.ndarray, tol: float = 1e-12) -> set:
    """Independent all-pairs point-in-triangle scan; returns {(point, elem)}."""
    hits = set()
    verts = mesh.vertices
    for ei, (ia, ib, ic) in enumerate(mesh.triangles):
        a, b, c = verts[ia], verts[ib], verts[ic]
        total = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        for pi, p in enumerate(points):
            d0 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
            d1 = (c[0] - b[0]) * (p[1] - b[1]) - (c[1] - b[1]) * (p[0] - b[0])
            d2 = (a[0] - c[0]) * (p[1] - c[1]) - (a[1] - c[1]) * (p[0] - c[0])
            if d0 >= -tol * total and d1 >= -tol * total and d2 >= -tol * total:
                hits.add((pi, ei))
    return hits


@pytest.fixture(scope="session")
def tiny_laplace() -> tasks.TaskInstance:
    """Small square-hole task: ~40 initial elements, R=2 reference."""
    return tasks.instantiate(tasks.sample_task("laplace", 123), 2, target_size=0.25)


@pytest.fixture(scope="session")
def tiny_poisson() -> tasks.TaskInstance:
    return tasks.instantiate(tasks.sample_task("poisson", 7), 2, target_size=0.25)
