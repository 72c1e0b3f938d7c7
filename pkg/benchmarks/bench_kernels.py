"""Benchmark the compiled geometry kernels against the pure-NumPy fallback.

Builds a refined mesh, assigns a large batch of points, and times the three
kernels plus the end-to-end error pass on realistic pair counts.

Run:  python benchmarks/bench_kernels.py [n_points]
"""

import sys
import time

import numpy as np

from meshrl import _kernels_py, rng
from meshrl.mesh import TriMesh, refine_rgb, uniform_refine

try:
    from meshrl import _kernels as compiled
except ImportError:
    compiled = None


def build_inputs(n_points: int):
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    tags = {(0, 1): "o", (1, 2): "o", (2, 3): "o", (0, 3): "o"}
    mesh = uniform_refine(TriMesh(verts, tris, tags), 4)
    gen = rng.stream(0, "bench")
    mesh = refine_rgb(mesh, gen.random(mesh.n_elements) < 0.5).child_mesh
    pts = gen.random((n_points, 2))
    pair_point = gen.integers(0, n_points, size=2 * n_points)
    pair_elem = np.ascontiguousarray(gen.integers(0, mesh.n_elements, size=2 * n_points))
    tri = mesh.triangles[pair_elem]
    v = mesh.vertices
    coords = tuple(
        np.ascontiguousarray(c)
        for c in (v[tri[:, 0], 0], v[tri[:, 0], 1], v[tri[:, 1], 0], v[tri[:, 1], 1], v[tri[:, 2], 0], v[tri[:, 2], 1])
    )
    nodal = gen.normal(size=mesh.n_vertices)
    vals = tuple(np.ascontiguousarray(nodal[tri[:, k]]) for k in range(3))
    px = np.ascontiguousarray(pts[pair_point, 0])
    py = np.ascontiguousarray(pts[pair_point, 1])
    extras = (
        np.ascontiguousarray(gen.random(len(px))),
        np.ascontiguousarray(gen.random(len(px))),
        np.ascontiguousarray(gen.random(len(px))),
    )
    return mesh, px, py, coords, vals, pair_elem, extras


def timeit(fn, repeats=7):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 200_000
    mesh, px, py, coords, vals, pair_elem, (w, absdiff, vol) = build_inputs(n)
    backends = [("python", _kernels_py)]
    if compiled is not None:
        backends.insert(0, ("compiled", compiled))
    print(f"pairs: {len(px):,}  mesh elements: {mesh.n_elements:,}")
    header = f"{'kernel':<24}" + "".join(f"{name:>14}" for name, _ in backends)
    print(header)
    rows = {
        "pair_contains": lambda k: k.pair_contains(px, py, *coords, 1e-12),
        "pair_interpolate": lambda k: k.pair_interpolate(px, py, *coords, *vals),
        "element_error_reduce": lambda k: k.element_error_reduce(mesh.n_elements, pair_elem, w, absdiff, vol),
    }
    results = {}
    for label, call in rows.items():
        times = []
        for name, mod in backends:
            t = timeit(lambda: call(mod))
            times.append(t)
            results[(label, name)] = t
        print(f"{label:<24}" + "".join(f"{t * 1e3:>11.2f} ms" for t in times))
    if compiled is not None:
        for label in rows:
            speedup = results[(label, "python")] / results[(label, "compiled")]
            print(f"speedup {label:<17} {speedup:>6.2f}x")
    # cross-check outputs
    if compiled is not None:
        a = compiled.pair_contains(px, py, *coords, 1e-12)
        b = _kernels_py.pair_contains(px, py, *coords, 1e-12)
        assert np.array_equal(a, b), "backend outputs differ"
        print("outputs identical across backends")


if __name__ == "__main__":
    main()
