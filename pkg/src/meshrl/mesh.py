"""Conforming triangular meshes and red-green-blue refinement.

A refinement step marks a subset of elements; marked elements are split into
4 similar children through their edge midpoints (red), and the mesh is then
closed so no edge midpoint is left hanging: an element with exactly one
bisected edge splits in 2 (green), with two bisected edges in 3 (blue).
Closure always bisects an element's refinement edge first - its longest edge,
with ties broken lexicographically on (min vertex index, max vertex index) -
and propagates that requirement to the neighbor across it until a fixpoint.

Midpoint vertices are identified by the sorted vertex-index pair of the
parent edge, never by coordinates, so repeated refinements of shared edges
are deduplicated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree


class MeshError(ValueError):
    pass


class TriMesh:
    """Immutable 2D triangle mesh with tagged boundary edges.

    vertices: (nv, 2) float64; triangles: (nt, 3) int64 in counter-clockwise
    order; boundary_tags: {(a, b): tag} with a < b covering exactly the edges
    that bound a single triangle.
    """

    def __init__(self, vertices, triangles, boundary_tags):
        self.vertices = np.array(vertices, dtype=np.float64, order="C")
        self.triangles = np.array(triangles, dtype=np.int64, order="C")
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must be (nv, 2)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be (nt, 3)")
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise MeshError("triangle vertex index out of range")
        self.boundary_tags = {(min(a, b), max(a, b)): str(t) for (a, b), t in boundary_tags.items()}
        self._build()
        self.vertices.flags.writeable = False
        self.triangles.flags.writeable = False

    def _build(self):
        tri = self.triangles
        v = self.vertices
        nt = len(tri)
        nv = len(v)
        a, b, c = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
        self.element_volumes = 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
        self.element_midpoints = (a + b + c) / 3.0

        # edge slot s is opposite local vertex s
        e0 = tri[:, [1, 2]]
        e1 = tri[:, [2, 0]]
        e2 = tri[:, [0, 1]]
        edges = np.stack([e0, e1, e2], axis=1)  # (nt, 3, 2)
        lo = edges.min(axis=2)
        hi = edges.max(axis=2)
        codes = lo.astype(np.int64) * nv + hi
        flat = codes.reshape(-1)
        uniq, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
        self.edge_codes = codes  # (nt, 3)
        self.tri_edge_id = inverse.reshape(nt, 3)
        self.edge_count = counts
        self._uniq_codes = uniq
        self.edges_unique = np.stack([uniq // nv, uniq % nv], axis=1) if len(uniq) else np.empty((0, 2), np.int64)

        # incident elements per unique edge (-1 padded), and neighbor per slot
        ne = len(uniq)
        edge_elem = np.full((ne, 2), -1, dtype=np.int64)
        order = np.argsort(self.tri_edge_id.reshape(-1), kind="stable")
        owner = order // 3
        eid_sorted = self.tri_edge_id.reshape(-1)[order]
        first = np.ones(len(eid_sorted), dtype=bool)
        first[1:] = eid_sorted[1:] != eid_sorted[:-1]
        slot_in_group = np.arange(len(eid_sorted)) - np.maximum.accumulate(np.where(first, np.arange(len(eid_sorted)), 0))
        keep = slot_in_group < 2
        edge_elem[eid_sorted[keep], slot_in_group[keep]] = owner[keep]
        self.edge_elements = edge_elem
        partner = np.where(edge_elem[self.tri_edge_id, 0] == np.arange(nt)[:, None], edge_elem[self.tri_edge_id, 1], edge_elem[self.tri_edge_id, 0])
        overfull = counts[self.tri_edge_id] > 2
        partner[overfull] = -2  # non-conforming marker; validator reports it
        self.element_neighbors = partner

        # refinement edge slot: longest edge, ties by (min index, max index)
        d = v[edges[:, :, 0]] - v[edges[:, :, 1]]
        lensq = (d**2).sum(axis=2)
        best = np.zeros(nt, dtype=np.int64)
        for s in (1, 2):
            bl = lensq[np.arange(nt), best]
            blo = lo[np.arange(nt), best]
            bhi = hi[np.arange(nt), best]
            better = (lensq[:, s] > bl) | (
                (lensq[:, s] == bl) & ((lo[:, s] < blo) | ((lo[:, s] == blo) & (hi[:, s] < bhi)))
            )
            best[better] = s
        self.refine_slot = best

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def total_area(self) -> float:
        return float(self.element_volumes.sum())

    def boundary_edge_array(self):
        """Boundary edges sorted by (a, b), as ((k, 2) array, list of tags)."""
        items = sorted(self.boundary_tags.items())
        if not items:
            return np.empty((0, 2), np.int64), []
        return np.array([k for k, _ in items], dtype=np.int64), [t for _, t in items]


@dataclass
class RefinementResult:
    child_mesh: TriMesh
    parent_of: np.ndarray  # (M,) parent element index per child
    directly_refined: np.ndarray  # (N,) bool, True where marked
    child_counts: np.ndarray  # (N,) children per parent
    child_offsets: np.ndarray  # (N+1,) children of parent i are [off[i], off[i+1])

    def children_of(self, parent: int) -> np.ndarray:
        return np.arange(self.child_offsets[parent], self.child_offsets[parent + 1])


def refine_rgb(mesh: TriMesh, marks) -> RefinementResult:
    """One conforming red-green-blue refinement step.

    Marked elements are red-refined; closure green/blue splits keep the mesh
    conforming. Children of a parent occupy consecutive indices in the child
    mesh, ordered by parent.
    """
    marks = np.asarray(marks, dtype=bool)
    if marks.shape != (mesh.n_elements,):
        raise MeshError(f"marks must have one entry per element ({mesh.n_elements})")
    nt = mesh.n_elements
    nv = mesh.n_vertices
    tri = mesh.triangles
    eid = mesh.tri_edge_id
    ne = len(mesh.edges_unique)

    bisected = np.zeros(ne, dtype=bool)
    bisected[eid[marks].reshape(-1)] = True

    # closure to fixpoint: any element with a bisected edge must bisect its
    # refinement edge, which propagates to the neighbor across it
    queue = list(np.unique(mesh.edge_elements[bisected].reshape(-1)))
    while queue:
        t = queue.pop()
        if t < 0:
            continue
        ref_edge = eid[t, mesh.refine_slot[t]]
        if bisected[ref_edge]:
            continue
        if bisected[eid[t]].any():
            bisected[ref_edge] = True
            queue.extend(mesh.edge_elements[ref_edge])

    # midpoint vertex per bisected edge, numbered in edge-id order
    bis_ids = np.flatnonzero(bisected)
    mid_vertex = np.full(ne, -1, dtype=np.int64)
    mid_vertex[bis_ids] = nv + np.arange(len(bis_ids))
    mid_coords = 0.5 * (
        mesh.vertices[mesh.edges_unique[bis_ids, 0]] + mesh.vertices[mesh.edges_unique[bis_ids, 1]]
    )
    new_vertices = np.concatenate([mesh.vertices, mid_coords], axis=0)

    nbis = bisected[eid].sum(axis=1)
    child_counts = np.ones(nt, dtype=np.int64)
    child_counts[nbis == 1] = 2
    child_counts[nbis == 2] = 3
    child_counts[nbis == 3] = 4
    child_offsets = np.zeros(nt + 1, dtype=np.int64)
    np.cumsum(child_counts, out=child_offsets[1:])
    m_total = int(child_offsets[-1])
    children = np.empty((m_total, 3), dtype=np.int64)

    mids = mid_vertex[eid]  # (nt, 3) midpoint vertex per slotL or -1

    keep = np.flatnonzero(nbis == 0)
    children[child_offsets[keep]] = tri[keep]

    red = np.flatnonzero(nbis == 3)
    if len(red):
        v0, v1, v2 = tri[red, 0], tri[red, 1], tri[red, 2]
        m12, m20, m01 = mids[red, 0], mids[red, 1], mids[red, 2]
        base = child_offsets[red]
        children[base + 0] = np.stack([v0, m01, m20], axis=1)
        children[base + 1] = np.stack([m01, v1, m12], axis=1)
        children[base + 2] = np.stack([m20, m12, v2], axis=1)
        children[base + 3] = np.stack([m01, m12, m20], axis=1)

    green = np.flatnonzero(nbis == 1)
    if len(green):
        k = mesh.refine_slot[green]
        if not bisected[eid[green, k]].all():
            raise MeshError("closure failed: single bisected edge is not the refinement edge")
        vk = tri[green, k]
        va = tri[green, (k + 1) % 3]
        vb = tri[green, (k + 2) % 3]
        m = mids[green, k]
        base = child_offsets[green]
        children[base + 0] = np.stack([vk, va, m], axis=1)
        children[base + 1] = np.stack([vk, m, vb], axis=1)

    blue = np.flatnonzero(nbis == 2)
    if len(blue):
        k = mesh.refine_slot[blue]
        if not bisected[eid[blue, k]].all():
            raise MeshError("closure failed: refinement edge not bisected on blue element")
        vk = tri[blue, k]
        va = tri[blue, (k + 1) % 3]
        vb = tri[blue, (k + 2) % 3]
        m = mids[blue, k]
        base = child_offsets[blue]
        second_next = bisected[eid[blue, (k + 1) % 3]]  # edge (vb, vk)
        bn = np.flatnonzero(second_next)
        bp = np.flatnonzero(~second_next)  # second edge is (vk, va)
        if len(bn):
            n = mids[blue[bn], (k[bn] + 1) % 3]
            children[base[bn] + 0] = np.stack([vk[bn], va[bn], m[bn]], axis=1)
            children[base[bn] + 1] = np.stack([m[bn], vb[bn], n], axis=1)
            children[base[bn] + 2] = np.stack([m[bn], n, vk[bn]], axis=1)
        if len(bp):
            p = mids[blue[bp], (k[bp] + 2) % 3]
            children[base[bp] + 0] = np.stack([vk[bp], m[bp], vb[bp]], axis=1)
            children[base[bp] + 1] = np.stack([p, va[bp], m[bp]], axis=1)
            children[base[bp] + 2] = np.stack([p, m[bp], vk[bp]], axis=1)

    new_tags = {}
    for (a, b), tag in mesh.boundary_tags.items():
        eidx = _edge_id_of(mesh, a, b)
        if eidx >= 0 and bisected[eidx]:
            mv = int(mid_vertex[eidx])
            new_tags[(min(a, mv), max(a, mv))] = tag
            new_tags[(min(b, mv), max(b, mv))] = tag
        else:
            new_tags[(a, b)] = tag

    parent_of = np.repeat(np.arange(nt, dtype=np.int64), child_counts)
    child_mesh = TriMesh(new_vertices, children, new_tags)
    return RefinementResult(
        child_mesh=child_mesh,
        parent_of=parent_of,
        directly_refined=marks.copy(),
        child_counts=child_counts,
        child_offsets=child_offsets,
    )


def _edge_id_of(mesh: TriMesh, a: int, b: int) -> int:
    lo, hi = (a, b) if a < b else (b, a)
    code = np.int64(lo) * mesh.n_vertices + hi
    pos = np.searchsorted(mesh._uniq_codes, code)
    if pos < len(mesh._uniq_codes) and mesh._uniq_codes[pos] == code:
        return int(pos)
    return -1


def uniform_refine(mesh: TriMesh, times: int) -> TriMesh:
    """Red-refine every element ``times`` times (4x elements per pass)."""
    if times < 0:
        raise MeshError("times must be >= 0")
    for _ in range(times):
        mesh = refine_rgb(mesh, np.ones(mesh.n_elements, dtype=bool)).child_mesh
    return mesh


MAPPING_VARIANTS = ("normalized_sum", "unnormalized_sum", "normalized_mean", "unnormalized_mean")


class AgentMapping:
    """Sparse responsibility matrix linking elements across one refinement.

    The default (normalized sum) variant puts N/M at every (parent, child)
    entry, so the total responsibility mass stays equal to the element count
    of the originating mesh and is preserved under composition. The other
    variants drop the N/M factor and/or average each parent's row to 1.

    Under pure refinement every column has exactly one nonzero (each child
    has one parent) and the level graph is a tree. The scheme extends to
    coarsening - an old element merged into a new one would take a 1/k share
    of that column, k being the number of merged elements, times the same
    count ratio - which turns the level graph into a DAG. Coarsening is out
    of scope here and the extension is not implemented.
    """

    def __init__(self, matrix: sp.csr_matrix, parent_of=None, variant: str | None = None):
        self.matrix = matrix.tocsr()
        self.parent_of = parent_of
        self.variant = variant

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    def entries_sum(self) -> float:
        return float(self.matrix.sum())

    def column_nnz(self) -> np.ndarray:
        return np.diff(self.matrix.tocsc().indptr)

    def apply(self, vec: np.ndarray) -> np.ndarray:
        """phi @ vec: pull a child-indexed vector back to parent indexing."""
        return self.matrix @ np.asarray(vec, dtype=np.float64)


def build_agent_mapping(result: RefinementResult, variant: str = "normalized_sum") -> AgentMapping:
    """Responsibility matrix for one refinement step (see AgentMapping)."""
    if variant not in MAPPING_VARIANTS:
        raise ValueError(f"unknown mapping variant {variant!r}")
    n = len(result.directly_refined)
    m = len(result.parent_of)
    if variant == "normalized_sum":
        vals = np.full(m, n / m)
    elif variant == "unnormalized_sum":
        vals = np.ones(m)
    elif variant == "normalized_mean":
        vals = (n / m) / result.child_counts[result.parent_of]
    else:
        vals = 1.0 / result.child_counts[result.parent_of]
    mat = sp.csr_matrix((vals, (result.parent_of, np.arange(m))), shape=(n, m))
    return AgentMapping(mat, parent_of=result.parent_of.copy(), variant=variant)


def compose_mappings(maps: list[AgentMapping]) -> AgentMapping:
    """Chain responsibilities across consecutive steps (matrix product)."""
    if not maps:
        raise ValueError("cannot compose an empty list of mappings")
    out = maps[0].matrix
    for nxt in maps[1:]:
        if out.shape[1] != nxt.matrix.shape[0]:
            raise ValueError(f"mapping dimension mismatch: {out.shape} then {nxt.matrix.shape}")
        out = out @ nxt.matrix
    return AgentMapping(out.tocsr())


@dataclass
class ConformityReport:
    ok: bool
    message: str = "ok"


def validate_conforming(mesh: TriMesh) -> ConformityReport:
    """Check conformity; reports the first violation found."""
    if mesh.n_elements == 0:
        return ConformityReport(False, "mesh has no triangles")
    bad = np.flatnonzero(mesh.element_volumes <= 0)
    if len(bad):
        return ConformityReport(False, f"triangle {bad[0]} has non-positive area")
    if mesh.n_vertices > 1:
        pairs = cKDTree(mesh.vertices).query_pairs(1e-12)
        if pairs:
            i, j = sorted(pairs)[0]
            return ConformityReport(False, f"duplicate vertices {i} and {j} within 1e-12")
    over = np.flatnonzero(mesh.edge_count > 2)
    if len(over):
        a, b = mesh.edges_unique[over[0]]
        return ConformityReport(False, f"edge ({a}, {b}) shared by >2 triangles")
    single = mesh.edge_count == 1
    tagged = np.zeros(len(mesh.edges_unique), dtype=bool)
    for a, b in mesh.boundary_tags:
        idx = _edge_id_of(mesh, a, b)
        if idx < 0:
            return ConformityReport(False, f"boundary tag on non-existent edge ({a}, {b})")
        tagged[idx] = True
    hanging = np.flatnonzero(single & ~tagged)
    if len(hanging):
        a, b = mesh.edges_unique[hanging[0]]
        return ConformityReport(
            False,
            f"edge ({a}, {b}) bounds one triangle but is not boundary "
            "(hanging node or vertex-on-edge)",
        )
    not_single = np.flatnonzero(tagged & ~single)
    if len(not_single):
        a, b = mesh.edges_unique[not_single[0]]
        return ConformityReport(False, f"tagged boundary edge ({a}, {b}) is interior")
    return ConformityReport(True)


def mesh_to_text(mesh: TriMesh) -> str:
    """Plain-text mesh format: header, vertices, triangles, boundary edges."""
    lines = [f"{mesh.n_elements} {mesh.n_vertices}"]
    for x, y in mesh.vertices:
        lines.append(f"{float(x)!r} {float(y)!r}")
    for a, b, c in mesh.triangles:
        lines.append(f"{a} {b} {c}")
    edges, tags = mesh.boundary_edge_array()
    for (a, b), t in zip(edges, tags):
        lines.append(f"{a} {b} {t}")
    return "\n".join(lines) + "\n"


def mesh_from_text(text: str) -> tuple[TriMesh, np.ndarray | None]:
    """Parse the text format; returns (mesh, appended per-vertex field or None)."""
    rows = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
    if not rows or len(rows[0]) != 2:
        raise MeshError("bad mesh header")
    nt, nv = int(rows[0][0]), int(rows[0][1])
    if len(rows) < 1 + nv + nt:
        raise MeshError("truncated mesh file")
    verts = np.array([[float(t) for t in r] for r in rows[1 : 1 + nv]], dtype=np.float64)
    tris = np.array([[int(t) for t in r] for r in rows[1 + nv : 1 + nv + nt]], dtype=np.int64)
    tags = {}
    extra = []
    for r in rows[1 + nv + nt :]:
        if len(r) == 3:
            tags[(int(r[0]), int(r[1]))] = r[2]
        elif len(r) == 1:
            extra.append(float(r[0]))
        else:
            raise MeshError(f"unparseable line: {' '.join(r)}")
    field_vals = np.array(extra, dtype=np.float64) if extra else None
    if field_vals is not None and len(field_vals) != nv:
        raise MeshError("appended field length does not match vertex count")
    return TriMesh(verts.reshape(nv, 2), tris.reshape(nt, 3), tags), field_vals


def save_mesh(mesh: TriMesh, path, nodal_field=None):
    text = mesh_to_text(mesh)
    if nodal_field is not None:
        vals = np.asarray(nodal_field, dtype=np.float64)
        if vals.shape != (mesh.n_vertices,):
            raise MeshError("nodal field must have one value per vertex")
        text += "".join(f"{float(v)!r}\n" for v in vals)
    with open(path, "w") as fh:
        fh.write(text)


def load_mesh(path) -> tuple[TriMesh, np.ndarray | None]:
    with open(path) as fh:
        return mesh_from_text(fh.read())
