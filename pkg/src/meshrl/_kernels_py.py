"""Pure-NumPy implementations of the geometry hot kernels.

These are the fallback twins of the compiled ``meshrl._kernels`` extension;
``meshrl.geometry`` picks one of the two at import time. Both operate on flat
"pair" arrays: a pair is one (query point, candidate triangle) combination,
with triangle vertex coordinates already gathered by the caller.
"""

from __future__ import annotations

import numpy as np

IMPLEMENTATION = "python"


def pair_contains(px, py, ax, ay, bx, by, cx, cy, tol):
    """Barycentric containment test for each (point, triangle) pair.

    A point counts as inside when all three normalized barycentric
    coordinates are >= -tol, so points within ``tol`` of an edge are accepted
    by both triangles sharing that edge.
    """
    d0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    d1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
    d2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
    total = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    return (d0 >= -tol * total) & (d1 >= -tol * total) & (d2 >= -tol * total)


def pair_interpolate(px, py, ax, ay, bx, by, cx, cy, va, vb, vc):
    """P1 interpolation of nodal values at each pair's query point."""
    total = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    wc = ((bx - ax) * (py - ay) - (by - ay) * (px - ax)) / total
    wa = ((cx - bx) * (py - by) - (cy - by) * (px - bx)) / total
    wb = 1.0 - wa - wc
    return wa * va + wb * vb + wc * vc


def element_error_reduce(n_elements, pair_elem, pair_weight, pair_absdiff, pair_volume):
    """Per-element error reductions over assignment pairs.

    Returns (max of weight*|diff| per element, sum of weight*volume*|diff|
    per element). Elements with no pairs get 0 in both.
    """
    weighted = pair_weight * pair_absdiff
    max_err = np.zeros(n_elements, dtype=np.float64)
    np.maximum.at(max_err, pair_elem, weighted)
    integrated = np.bincount(pair_elem, weights=weighted * pair_volume, minlength=n_elements)
    return max_err, integrated
