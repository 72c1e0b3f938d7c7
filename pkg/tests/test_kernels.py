import subprocess
import sys

import numpy as np
import pytest

from meshrl import _kernels_py, geometry, rng
from meshrl.mesh import refine_rgb, uniform_refine

from conftest import make_unit_square

compiled = pytest.importorskip("meshrl._kernels", reason="compiled extension not built")


def _pair_inputs(seed=0, n=5000):
    mesh = uniform_refine(make_unit_square(), 3)
    gen = rng.stream(seed, "kernel-pairs")
    marks = gen.random(mesh.n_elements) < 0.4
    mesh = refine_rgb(mesh, marks).child_mesh
    pts = gen.random((n, 2))
    pair_point = gen.integers(0, n, size=2 * n)
    pair_elem = gen.integers(0, mesh.n_elements, size=2 * n)
    tri = mesh.triangles[pair_elem]
    v = mesh.vertices
    coords = tuple(
        np.ascontiguousarray(c)
        for c in (
            v[tri[:, 0], 0], v[tri[:, 0], 1],
            v[tri[:, 1], 0], v[tri[:, 1], 1],
            v[tri[:, 2], 0], v[tri[:, 2], 1],
        )
    )
    px = np.ascontiguousarray(pts[pair_point, 0])
    py = np.ascontiguousarray(pts[pair_point, 1])
    nodal = gen.normal(size=mesh.n_vertices)
    vals = tuple(np.ascontiguousarray(nodal[tri[:, k]]) for k in range(3))
    return mesh, px, py, coords, vals, pair_elem


def test_contains_parity():
    _, px, py, coords, _, _ = _pair_inputs()
    a = compiled.pair_contains(px, py, *coords, 1e-12)
    b = _kernels_py.pair_contains(px, py, *coords, 1e-12)
    assert np.array_equal(a, b)


def test_interpolate_parity():
    _, px, py, coords, vals, _ = _pair_inputs(1)
    a = compiled.pair_interpolate(px, py, *coords, *vals)
    b = _kernels_py.pair_interpolate(px, py, *coords, *vals)
    assert np.array_equal(a, b)


def test_reduce_parity():
    mesh, px, py, coords, vals, pair_elem = _pair_inputs(2)
    gen = rng.stream(3, "reduce")
    w = gen.random(len(px))
    absdiff = gen.random(len(px))
    vol = gen.random(len(px))
    pair_elem = np.ascontiguousarray(pair_elem, dtype=np.int64)
    a_max, a_int = compiled.element_error_reduce(mesh.n_elements, pair_elem, w, absdiff, vol)
    b_max, b_int = _kernels_py.element_error_reduce(mesh.n_elements, pair_elem, w, absdiff, vol)
    assert np.array_equal(a_max, b_max)
    assert np.array_equal(a_int, b_int)


def test_pure_python_fallback_selected_via_env():
    code = (
        "from meshrl import geometry;"
        "print(geometry.kernels.IMPLEMENTATION)"
    )
    out = subprocess.run(
        [sys.executable, "-c", code], capture_output=True, text=True,
        env={"MESHRL_PURE_PYTHON": "1", "PATH": "/usr/bin:/bin"},
    )
    assert out.stdout.strip() == "python"
    out = subprocess.run(
        [sys.executable, "-c", code], capture_output=True, text=True, env={"PATH": "/usr/bin:/bin"},
    )
    assert out.stdout.strip() == "compiled"


def test_assignment_identical_under_both_backends(tiny_laplace):
    task = tiny_laplace
    pp, pe, pw = geometry.assign_points(task.initial_mesh, task.ref_midpoints)
    saved = geometry.kernels
    try:
        geometry.kernels = _kernels_py
        pp2, pe2, pw2 = geometry.assign_points(task.initial_mesh, task.ref_midpoints)
    finally:
        geometry.kernels = saved
    assert np.array_equal(pp, pp2) and np.array_equal(pe, pe2) and np.array_equal(pw, pw2)
