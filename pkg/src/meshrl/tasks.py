"""Problem families: seeded sampling, initial meshing, reference caching.

Two task kinds are provided. "laplace" poses Laplace's equation on a unit
square with an axis-aligned rectangular hole (u=0 on the hole boundary, u=1
outside); hole size is U(0.05, 0.25) per axis and the center U(0.2, 0.8)^2.
"poisson" poses a zero-Dirichlet Poisson problem on an L-shaped domain (unit
square minus the quadrant above-right of a corner point p0 ~ U(0.2, 0.95)^2)
with a 3-component Gaussian-mixture load: means U(0.1, 0.9)^2 rejected into
the domain, per-axis variances exp(U(ln 1e-4, ln 1e-3)) under a random
rotation U(0, pi), and weights exp(N(0,1))+1 normalized to sum 1.

Initial meshes come from a deterministic tensor-grid trianguIator that
inserts the domain's feature lines exactly, followed by Delaunay edge flips.
A task instance bundles the initial mesh, the reference mesh (initial mesh
uniformly refined R times), the reference solution, and derived error
normalizers; instances are cached on disk keyed by a content hash of the
spec, since the reference solve dominates setup cost.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from meshrl import geometry, rng
from meshrl.fem import FemSolution, PdeProblem, assemble_and_solve
from meshrl.mesh import TriMesh, load_mesh, save_mesh, uniform_refine, validate_conforming

DEFAULT_TARGET_SIZE = 0.05
TASK_KINDS = ("laplace", "poisson")


@dataclass(frozen=True)
class DomainParams:
    family: str  # "square" | "square_hole" | "lshape"
    hole_center: tuple[float, float] | None = None
    hole_size: tuple[float, float] | None = None
    corner: tuple[float, float] | None = None

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        inside = (pts >= 0.0).all(axis=1) & (pts <= 1.0).all(axis=1)
        if self.family == "square_hole":
            (cx, cy), (sx, sy) = self.hole_center, self.hole_size
            in_hole = (
                (np.abs(pts[:, 0] - cx) < sx / 2) & (np.abs(pts[:, 1] - cy) < sy / 2)
            )
            inside &= ~in_hole
        elif self.family == "lshape":
            px, py = self.corner
            inside &= ~((pts[:, 0] > px) & (pts[:, 1] > py))
        return inside

    @property
    def area(self) -> float:
        if self.family == "square":
            return 1.0
        if self.family == "square_hole":
            return 1.0 - self.hole_size[0] * self.hole_size[1]
        px, py = self.corner
        return 1.0 - (1.0 - px) * (1.0 - py)


@dataclass(frozen=True)
class GmmParams:
    means: tuple  # 3 x 2
    covariances: tuple  # 3 x 2 x 2
    weights: tuple  # 3

    def density(self) -> Callable:
        means = np.array(self.means)
        covs = np.array(self.covariances)
        weights = np.array(self.weights)
        invs = np.linalg.inv(covs)
        norms = weights / (2.0 * np.pi * np.sqrt(np.linalg.det(covs)))

        def f(pts: np.ndarray) -> np.ndarray:
            pts = np.atleast_2d(pts)
            out = np.zeros(len(pts))
            for mu, inv, nrm in zip(means, invs, norms):
                d = pts - mu
                q = (d @ inv * d).sum(axis=1)
                out += nrm * np.exp(-0.5 * q)
            return out

        return f


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    seed: int
    domain: DomainParams
    load_params: GmmParams | None = None

    def to_json(self) -> str:
        def enc(obj):
            if isinstance(obj, DomainParams):
                return {"family": obj.family, "hole_center": obj.hole_center, "hole_size": obj.hole_size, "corner": obj.corner}
            if isinstance(obj, GmmParams):
                return {"means": obj.means, "covariances": obj.covariances, "weights": obj.weights}
            raise TypeError(type(obj))

        return json.dumps(
            {"kind": self.kind, "seed": self.seed, "domain": self.domain, "load_params": self.load_params},
            default=enc, sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "TaskSpec":
        raw = json.loads(text)
        dom = raw["domain"]
        domain = DomainParams(
            family=dom["family"],
            hole_center=tuple(dom["hole_center"]) if dom.get("hole_center") else None,
            hole_size=tuple(dom["hole_size"]) if dom.get("hole_size") else None,
            corner=tuple(dom["corner"]) if dom.get("corner") else None,
        )
        load = None
        if raw.get("load_params"):
            lp = raw["load_params"]
            load = GmmParams(
                means=tuple(tuple(m) for m in lp["means"]),
                covariances=tuple(tuple(tuple(r) for r in c) for c in lp["covariances"]),
                weights=tuple(lp["weights"]),
            )
        return TaskSpec(kind=raw["kind"], seed=int(raw["seed"]), domain=domain, load_params=load)


def sample_task(kind: str, seed: int) -> TaskSpec:
    """Deterministically sample a task's parameters from (kind, seed)."""
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}")
    gen = rng.stream(seed, "task-params", kind)
    if kind == "laplace":
        size = gen.uniform(0.05, 0.25, size=2)
        center = gen.uniform(0.2, 0.8, size=2)
        domain = DomainParams(
            "square_hole", hole_center=(float(center[0]), float(center[1])), hole_size=(float(size[0]), float(size[1]))
        )
        return TaskSpec(kind=kind, seed=int(seed), domain=domain)

    corner = gen.uniform(0.2, 0.95, size=2)
    domain = DomainParams("lshape", corner=(float(corner[0]), float(corner[1])))
    means = []
    for _ in range(3):
        while True:
            mu = gen.uniform(0.1, 0.9, size=2)
            if domain.contains(mu[None])[0]:
                means.append((float(mu[0]), float(mu[1])))
                break
    covs = []
    for _ in range(3):
        diag = np.exp(gen.uniform(np.log(1e-4), np.log(1e-3), size=2))
        theta = gen.uniform(0.0, np.pi)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        cov = rot @ np.diag(diag) @ rot.T
        covs.append(tuple(tuple(float(x) for x in row) for row in cov))
    w = np.exp(gen.standard_normal(3)) + 1.0
    w = w / w.sum()
    load = GmmParams(means=tuple(means), covariances=tuple(covs), weights=tuple(float(x) for x in w))
    return TaskSpec(kind=kind, seed=int(seed), domain=domain, load_params=load)


def problem_for(spec: TaskSpec) -> PdeProblem:
    if spec.kind == "laplace":
        return PdeProblem("laplace", dirichlet={"inner": 0.0, "outer": 1.0})
    return PdeProblem("poisson", dirichlet={"outer": 0.0}, load=spec.load_params.density())


# ---------------------------------------------------------------------------
# meshing


def _grid_lines(n: int, special: tuple[float, ...]) -> np.ndarray:
    """Uniform lines on [0, 1] with feature lines inserted exactly.

    Uniform lines closer than 0.4/n to a feature line are dropped so cell
    aspect ratios stay bounded; 0 and 1 are always kept.
    """
    base = np.linspace(0.0, 1.0, n + 1)
    keep = np.ones(len(base), dtype=bool)
    for s in special:
        keep &= (np.abs(base - s) >= 0.4 / n) | (base == 0.0) | (base == 1.0)
    lines = np.unique(np.concatenate([base[keep], np.asarray(special, dtype=np.float64)]))
    return lines[(lines >= 0.0) & (lines <= 1.0)]


def initial_mesh_for_domain(domain: DomainParams, target_size: float = DEFAULT_TARGET_SIZE) -> TriMesh:
    """Deterministic boundary-conforming triangulation of a domain family.

    Cell size targets the area of an equilateral triangle with the given
    edge length; the grid resolution is the coarsest that keeps the median
    element area within a factor 2 of that target.
    """
    target_area = (math.sqrt(3.0) / 4.0) * target_size**2
    n = max(2, math.ceil(1.0 / math.sqrt(4.0 * target_area)))
    if domain.family == "square":
        xs = ys = _grid_lines(n, ())
        hole = None
    elif domain.family == "square_hole":
        (cx, cy), (sx, sy) = domain.hole_center, domain.hole_size
        hx = (cx - sx / 2, cx + sx / 2)
        hy = (cy - sy / 2, cy + sy / 2)
        xs = _grid_lines(n, hx)
        ys = _grid_lines(n, hy)
        hole = (hx, hy)
    elif domain.family == "lshape":
        xs = _grid_lines(n, (domain.corner[0],))
        ys = _grid_lines(n, (domain.corner[1],))
        hole = ((domain.corner[0], 1.0), (domain.corner[1], 1.0))
    else:
        raise ValueError(f"unknown domain family {domain.family!r}")

    nx, ny = len(xs), len(ys)
    vx, vy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([vx.ravel(), vy.ravel()], axis=1)

    def vid(i, j):
        return i * ny + j

    tris = []
    used_cell = np.zeros((nx - 1, ny - 1), dtype=bool)
    for i in range(nx - 1):
        for j in range(ny - 1):
            cxm = 0.5 * (xs[i] + xs[i + 1])
            cym = 0.5 * (ys[j] + ys[j + 1])
            if hole is not None and hole[0][0] < cxm < hole[0][1] and hole[1][0] < cym < hole[1][1]:
                continue
            used_cell[i, j] = True
            v00, v10, v11, v01 = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    tris = np.array(tris, dtype=np.int64)

    # drop unused vertices, renumber
    used_v = np.zeros(len(verts), dtype=bool)
    used_v[tris.ravel()] = True
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used_v] = np.arange(used_v.sum())
    verts = verts[used_v]
    tris = remap[tris]

    mesh = TriMesh(verts, tris, _boundary_tags_for(verts, tris, domain))
    mesh = _delaunay_flip(mesh)
    report = validate_conforming(mesh)
    if not report.ok:
        raise RuntimeError(f"mesher produced a bad mesh: {report.message}")
    return mesh


def _boundary_tags_for(verts, tris, domain: DomainParams) -> dict:
    probe = TriMesh(verts, tris, {})
    single = probe.edge_count == 1
    tags = {}
    for a, b in probe.edges_unique[single]:
        mid = 0.5 * (verts[a] + verts[b])
        tag = "outer"
        if domain.family == "square_hole":
            (cx, cy), (sx, sy) = domain.hole_center, domain.hole_size
            if abs(mid[0] - cx) < sx / 2 + 1e-12 and abs(mid[1] - cy) < sy / 2 + 1e-12:
                tag = "inner"
        tags[(int(a), int(b))] = tag
    return tags


def _delaunay_flip(mesh: TriMesh, max_sweeps: int = 50) -> TriMesh:
    """Edge-flip sweeps until locally Delaunay (strict in-circle test)."""
    tris = mesh.triangles.copy()
    verts = mesh.vertices
    for _ in range(max_sweeps):
        probe = TriMesh(verts, tris, mesh.boundary_tags)
        flipped = np.zeros(len(tris), dtype=bool)
        changed = False
        interior = np.flatnonzero(probe.edge_count == 2)
        for eidx in interior:
            t1, t2 = probe.edge_elements[eidx]
            if flipped[t1] or flipped[t2]:
                continue
            a, b = probe.edges_unique[eidx]
            p = [v for v in tris[t1] if v != a and v != b][0]
            q = [v for v in tris[t2] if v != a and v != b][0]
            if not _incircle(verts, tris[t1], q):
                continue
            new1 = _oriented(verts, (p, q, a))
            new2 = _oriented(verts, (p, q, b))
            if new1 is None or new2 is None:
                continue
            tris[t1] = new1
            tris[t2] = new2
            flipped[t1] = flipped[t2] = True
            changed = True
        if not changed:
            break
    return TriMesh(verts, tris, mesh.boundary_tags)


def _incircle(verts, tri, d) -> bool:
    ax, ay = verts[tri[0]]
    bx, by = verts[tri[1]]
    cx, cy = verts[tri[2]]
    dx, dy = verts[d]
    m = np.array(
        [
            [ax - dx, ay - dy, (ax - dx) ** 2 + (ay - dy) ** 2],
            [bx - dx, by - dy, (bx - dx) ** 2 + (by - dy) ** 2],
            [cx - dx, cy - dy, (cx - dx) ** 2 + (cy - dy) ** 2],
        ]
    )
    return np.linalg.det(m) > 1e-14


def _oriented(verts, tri):
    a, b, c = verts[tri[0]], verts[tri[1]], verts[tri[2]]
    area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if area2 > 1e-16:
        return tri
    if area2 < -1e-16:
        return (tri[0], tri[2], tri[1])
    return None


# ---------------------------------------------------------------------------
# instances


@dataclass
class TaskInstance:
    """A task ready to run episodes on: meshes, reference data, normalizers."""

    spec: TaskSpec
    refinement_depth: int
    initial_mesh: TriMesh
    reference_mesh: TriMesh
    reference_solution: FemSolution
    initial_solution: FemSolution
    # reference midpoint data
    ref_midpoints: np.ndarray
    ref_volumes: np.ndarray
    u_ref_mid: np.ndarray
    # assignment of reference midpoints to initial-mesh elements
    initial_pairs: tuple  # (pair_point, pair_elem, pair_weight)
    # error normalizers
    initial_error_total: float  # sum of per-element max errors on the initial mesh
    initial_integrated_total: float  # sum of per-element integrated errors
    metric_denominators: dict  # squared / mean / top, for normalized metrics
    problem: PdeProblem = field(default=None)

    @property
    def kind(self) -> str:
        return self.spec.kind


def content_hash(spec: TaskSpec, refinement_depth: int, target_size: float) -> str:
    payload = f"{spec.to_json()}|R={refinement_depth}|target={target_size!r}|v1"
    return hashlib.sha256(payload.encode("utf8")).hexdigest()[:16]


def instantiate(
    spec: TaskSpec,
    refinement_depth: int,
    cache_dir: str | None = None,
    target_size: float = DEFAULT_TARGET_SIZE,
) -> TaskInstance:
    """Build (or load from cache) the reference data for a task.

    The supported experiment depths are R=4 and R=6; smaller values are
    allowed for cheap tests. Cached instances are keyed by a content hash of
    (spec, R, target size) and written atomically.
    """
    if refinement_depth < 1:
        raise ValueError("refinement_depth must be >= 1")
    key = content_hash(spec, refinement_depth, target_size)
    if cache_dir is not None:
        path = os.path.join(cache_dir, key)
        if os.path.isdir(path):
            return _load_instance(spec, refinement_depth, path)

    initial = initial_mesh_for_domain(spec.domain, target_size)
    reference = uniform_refine(initial, refinement_depth)
    problem = problem_for(spec)
    ref_sol = assemble_and_solve(problem, reference)
    init_sol = assemble_and_solve(problem, initial)
    inst = _derive_instance(spec, refinement_depth, initial, reference, ref_sol, init_sol)

    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        tmp = tempfile.mkdtemp(dir=cache_dir, prefix=".tmp-")
        try:
            save_mesh(inst.initial_mesh, os.path.join(tmp, "initial.txt"), inst.initial_solution.nodal_values)
            save_mesh(inst.reference_mesh, os.path.join(tmp, "reference.txt"), inst.reference_solution.nodal_values)
            with open(os.path.join(tmp, "spec.json"), "w") as fh:
                fh.write(spec.to_json())
            np.savez_compressed(
                os.path.join(tmp, "derived.npz"),
                pair_point=inst.initial_pairs[0],
                pair_elem=inst.initial_pairs[1],
                pair_weight=inst.initial_pairs[2],
                initial_error_total=inst.initial_error_total,
                initial_integrated_total=inst.initial_integrated_total,
                den_squared=inst.metric_denominators["squared"],
                den_mean=inst.metric_denominators["mean"],
                den_top=inst.metric_denominators["top"],
            )
            with open(os.path.join(tmp, "meta.json"), "w") as fh:
                json.dump({"refinement_depth": refinement_depth, "target_size": target_size, "hash": key}, fh)
            os.replace(tmp, path)
        except OSError:
            shutil.rmtree(tmp, ignore_errors=True)
            if not os.path.isdir(path):
                raise
        return _load_instance(spec, refinement_depth, path)
    return inst


def _derive_instance(spec, depth, initial, reference, ref_sol, init_sol) -> TaskInstance:
    ref_mid = reference.element_midpoints
    ref_vol = reference.element_volumes
    u_ref_mid = ref_sol.nodal_values[reference.triangles].mean(axis=1)
    pairs = geometry.assign_points(initial, ref_mid)
    from meshrl import env  # local import; env builds on tasks

    terms = env.error_terms(initial, init_sol, ref_mid, ref_vol, u_ref_mid, pairs)
    if not terms.max_per_element.sum() > 0:
        raise RuntimeError("degenerate task: initial mesh error is zero")
    k_top = max(1, int(0.001 * len(ref_mid)))
    top = float(np.sort(np.abs(terms.midpoint_diff))[-k_top:].mean())
    dens = {
        "squared": float((ref_vol * terms.midpoint_diff**2).sum()),
        "mean": float((ref_vol * np.abs(terms.midpoint_diff)).sum()),
        "top": top,
    }
    return TaskInstance(
        spec=spec,
        refinement_depth=depth,
        initial_mesh=initial,
        reference_mesh=reference,
        reference_solution=ref_sol,
        initial_solution=init_sol,
        ref_midpoints=ref_mid,
        ref_volumes=ref_vol,
        u_ref_mid=u_ref_mid,
        initial_pairs=pairs,
        initial_error_total=float(terms.max_per_element.sum()),
        initial_integrated_total=float(terms.integrated_per_element.sum()),
        metric_denominators=dens,
        problem=problem_for(spec),
    )


def _load_instance(spec: TaskSpec, depth: int, path: str) -> TaskInstance:
    with open(os.path.join(path, "spec.json")) as fh:
        stored = TaskSpec.from_json(fh.read())
    if stored != spec:
        raise RuntimeError(f"cache collision at {path}: stored spec differs")
    initial, init_vals = load_mesh(os.path.join(path, "initial.txt"))
    reference, ref_vals = load_mesh(os.path.join(path, "reference.txt"))
    d = np.load(os.path.join(path, "derived.npz"))
    return TaskInstance(
        spec=spec,
        refinement_depth=depth,
        initial_mesh=initial,
        reference_mesh=reference,
        reference_solution=FemSolution(reference, ref_vals),
        initial_solution=FemSolution(initial, init_vals),
        ref_midpoints=reference.element_midpoints,
        ref_volumes=reference.element_volumes,
        u_ref_mid=ref_vals[reference.triangles].mean(axis=1),
        initial_pairs=(d["pair_point"], d["pair_elem"], d["pair_weight"]),
        initial_error_total=float(d["initial_error_total"]),
        initial_integrated_total=float(d["initial_integrated_total"]),
        metric_denominators={
            "squared": float(d["den_squared"]),
            "mean": float(d["den_mean"]),
            "top": float(d["den_top"]),
        },
        problem=problem_for(spec),
    )


def task_seeds(kind: str, count: int, master_seed: int, role: str) -> list[int]:
    """Disjoint task seed streams for train vs. eval sets."""
    gen = rng.stream(master_seed, "task-seeds", kind, role)
    return [int(s) for s in gen.integers(0, 2**63 - 1, size=count)]


def make_task_specs(kind: str, count: int, master_seed: int, role: str) -> list[TaskSpec]:
    return [sample_task(kind, s) for s in task_seeds(kind, count, master_seed, role)]
