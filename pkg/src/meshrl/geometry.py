"""Point location and point-to-element assignment.

The innermost numeric loops live in a compiled Cython extension
(``meshrl._kernels``) with a pure-NumPy twin (``meshrl._kernels_py``). The
compiled module is preferred when importable; set ``MESHRL_PURE_PYTHON=1`` to
force the fallback. Both expose the same functions and produce identical
results, which the test suite checks pair by pair.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.spatial import cKDTree

if os.environ.get("MESHRL_PURE_PYTHON", "") not in ("", "0"):
    from meshrl import _kernels_py as kernels
else:
    try:
        from meshrl import _kernels as kernels  # type: ignore
    except ImportError:
        from meshrl import _kernels_py as kernels

#: 1e-12 on the normalized barycentric coordinates: points this close to an
#: edge count as lying on it and are assigned to every adjacent element.
EDGE_TOL = 1e-12

#: Secondary acceptance band for points that miss every element at EDGE_TOL
#: (vertices slightly outside due to rounding); beyond this it is an error.
LOOSE_TOL = 1e-9


class PointLocationError(ValueError):
    pass


def _gather_coords(mesh, elems):
    tri = mesh.triangles[elems]
    v = mesh.vertices
    a, b, c = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    return tuple(np.ascontiguousarray(x) for x in (a[:, 0], a[:, 1], b[:, 0], b[:, 1], c[:, 0], c[:, 1]))


def pair_contains(mesh, points_xy, pair_point, pair_elem, tol=EDGE_TOL):
    """Containment mask for explicit (point index, element index) pairs."""
    ax, ay, bx, by, cx, cy = _gather_coords(mesh, pair_elem)
    px = np.ascontiguousarray(points_xy[pair_point, 0])
    py = np.ascontiguousarray(points_xy[pair_point, 1])
    return kernels.pair_contains(px, py, ax, ay, bx, by, cx, cy, tol)


def interpolate_pairs(mesh, nodal_values, points_xy, pair_point, pair_elem):
    """Interpolate a P1 field at each pair's point inside the pair's element."""
    tri = mesh.triangles[pair_elem]
    ax, ay, bx, by, cx, cy = _gather_coords(mesh, pair_elem)
    px = np.ascontiguousarray(points_xy[pair_point, 0])
    py = np.ascontiguousarray(points_xy[pair_point, 1])
    va = np.ascontiguousarray(nodal_values[tri[:, 0]])
    vb = np.ascontiguousarray(nodal_values[tri[:, 1]])
    vc = np.ascontiguousarray(nodal_values[tri[:, 2]])
    return kernels.pair_interpolate(px, py, ax, ay, bx, by, cx, cy, va, vb, vc)


def assign_points(mesh, points_xy, tree: cKDTree | None = None):
    """Assign every query point to all mesh elements containing it.

    Candidate pairs come from per-element ball queries against a k-d tree
    over the points (built here unless passed in): every point of an element
    lies within the element's max centroid-to-vertex distance, so the
    candidate set is complete. Points on shared edges land in both adjacent
    elements.

    Returns (pair_point, pair_elem, pair_weight) with weight = 1/k for a
    point contained in k elements. Raises PointLocationError if any point
    lies outside the mesh beyond LOOSE_TOL.
    """
    points_xy = np.asarray(points_xy, dtype=np.float64)
    if tree is None:
        tree = cKDTree(points_xy)
    centroids = mesh.element_midpoints
    tri_xy = mesh.vertices[mesh.triangles]
    radii = np.sqrt(((tri_xy - centroids[:, None, :]) ** 2).sum(axis=2)).max(axis=1)
    ball = tree.query_ball_point(centroids, radii * (1.0 + 1e-12) + 1e-15)

    counts = np.fromiter((len(b) for b in ball), dtype=np.int64, count=len(ball))
    pair_elem = np.repeat(np.arange(len(ball), dtype=np.int64), counts)
    pair_point = np.concatenate([np.sort(b) for b in ball]) if len(ball) else np.empty(0, np.int64)
    pair_point = pair_point.astype(np.int64, copy=False)

    inside = pair_contains(mesh, points_xy, pair_point, pair_elem)
    pair_point, pair_elem = pair_point[inside], pair_elem[inside]
    return _finalize_pairs(mesh, points_xy, pair_point, pair_elem)


def locate_in_parents(mesh, points_xy, pair_point, parent_children):
    """Relocate points previously assigned to parents among their children.

    ``pair_point``: point index per old pair; ``parent_children``: for every
    old pair, the array of child element indices to test. Used when stepping
    a refinement: an old element's points can only land in its children.
    """
    counts = np.fromiter((len(c) for c in parent_children), dtype=np.int64, count=len(parent_children))
    cand_elem = np.concatenate(parent_children) if len(parent_children) else np.empty(0, np.int64)
    cand_point = np.repeat(pair_point, counts)
    inside = pair_contains(mesh, points_xy, cand_point, cand_elem)
    return cand_point[inside], cand_elem[inside]


def recount_weights(mesh, points_xy, pair_point, pair_elem, n_points):
    """Re-derive 1/k weights after merging pair lists; rescues lost points."""
    return _finalize_pairs(mesh, points_xy, pair_point, pair_elem, n_points)


def _finalize_pairs(mesh, points_xy, pair_point, pair_elem, n_points=None):
    if n_points is None:
        n_points = len(points_xy)
    hits = np.bincount(pair_point, minlength=n_points)
    if (hits == 0).any():
        missing = np.flatnonzero(hits == 0)
        pp, pe = _rescue_points(mesh, points_xy, missing)
        if pp is None:
            p = points_xy[missing[0]]
            raise PointLocationError(
                f"point ({p[0]!r}, {p[1]!r}) lies outside every element (>{LOOSE_TOL} tolerance)"
            )
        pair_point = np.concatenate([pair_point, pp])
        pair_elem = np.concatenate([pair_elem, pe])
        order = np.argsort(pair_point, kind="stable")
        pair_point, pair_elem = pair_point[order], pair_elem[order]
        hits = np.bincount(pair_point, minlength=n_points)
    weight = 1.0 / hits[pair_point]
    return pair_point, pair_elem, weight


def _rescue_points(mesh, points_xy, missing):
    """Full scan at LOOSE_TOL for points that missed every candidate."""
    n_elem = len(mesh.triangles)
    pair_point = np.repeat(missing.astype(np.int64), n_elem)
    pair_elem = np.tile(np.arange(n_elem, dtype=np.int64), len(missing))
    inside = pair_contains(mesh, points_xy, pair_point, pair_elem, tol=LOOSE_TOL)
    pair_point, pair_elem = pair_point[inside], pair_elem[inside]
    if np.unique(pair_point).size != len(missing):
        return None, None
    return pair_point, pair_elem


class MeshLocator:
    """Locate arbitrary points in a mesh via a k-d tree over element centroids.

    Candidates are taken from nearest centroids with progressive widening and
    a final full scan, so the result matches a brute-force scan. Used for
    solution evaluation at user-supplied points.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        self._tree = cKDTree(mesh.element_midpoints)

    def locate(self, points_xy):
        """Return the containing element per point (lowest index on ties)."""
        points_xy = np.atleast_2d(np.asarray(points_xy, dtype=np.float64))
        n = len(points_xy)
        result = np.full(n, -1, dtype=np.int64)
        unresolved = np.arange(n)
        n_elem = len(self.mesh.triangles)
        for tol in (EDGE_TOL, LOOSE_TOL):
            k = min(8, n_elem)
            while unresolved.size:
                _, cand = self._tree.query(points_xy[unresolved], k=k)
                cand = np.atleast_2d(cand)
                pair_point = np.repeat(unresolved, cand.shape[1]).astype(np.int64)
                pair_elem = cand.ravel().astype(np.int64)
                inside = pair_contains(self.mesh, points_xy, pair_point, pair_elem, tol=tol)
                hit_point = pair_point[inside]
                hit_elem = pair_elem[inside]
                if hit_point.size:
                    # lowest element index wins for points on shared edges
                    order = np.lexsort((hit_elem, hit_point))
                    hit_point, hit_elem = hit_point[order], hit_elem[order]
                    first = np.ones(len(hit_point), dtype=bool)
                    first[1:] = hit_point[1:] != hit_point[:-1]
                    result[hit_point[first]] = hit_elem[first]
                    unresolved = unresolved[result[unresolved] < 0]
                if k >= n_elem:
                    break
                k = min(k * 4, n_elem)
            if not unresolved.size:
                break
        if unresolved.size:
            p = points_xy[unresolved[0]]
            raise PointLocationError(
                f"point ({p[0]!r}, {p[1]!r}) lies outside every element (>{LOOSE_TOL} tolerance)"
            )
        return result
