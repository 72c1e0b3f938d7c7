import numpy as np
import pytest

from meshrl import rng
from meshrl.mesh import (
    AgentMapping,
    MeshError,
    TriMesh,
    build_agent_mapping,
    compose_mappings,
    load_mesh,
    mesh_from_text,
    mesh_to_text,
    refine_rgb,
    save_mesh,
    uniform_refine,
    validate_conforming,
)

from conftest import make_scalene, make_unit_square


def test_red_refinement_of_single_triangle():
    mesh = make_scalene()
    result = refine_rgb(mesh, [True])
    assert result.child_mesh.n_elements == 4
    assert np.array_equal(result.parent_of, np.zeros(4, dtype=np.int64))
    assert np.isclose(result.child_mesh.total_area, mesh.total_area, rtol=1e-12)
    assert validate_conforming(result.child_mesh).ok
    # children are similar: equal areas
    assert np.allclose(result.child_mesh.element_volumes, mesh.total_area / 4)


def test_all_false_marks_is_identity():
    mesh = uniform_refine(make_unit_square(), 2)
    result = refine_rgb(mesh, np.zeros(mesh.n_elements, dtype=bool))
    assert np.array_equal(result.child_mesh.triangles, mesh.triangles)
    assert np.array_equal(result.child_mesh.vertices, mesh.vertices)
    assert np.array_equal(result.parent_of, np.arange(mesh.n_elements))
    assert result.child_mesh.boundary_tags == mesh.boundary_tags


def test_marking_one_corner_child_gives_eight_elements():
    # red-refine a scalene triangle, then mark the corner child that shares
    # the middle child's refinement edge: closure needs one green split only
    mesh = make_scalene()
    child = refine_rgb(mesh, [True]).child_mesh
    neighbors = child.element_neighbors
    middle = int(np.flatnonzero((neighbors >= 0).all(axis=1))[0])
    ref_edge = child.tri_edge_id[middle, child.refine_slot[middle]]
    partner = [t for t in child.edge_elements[ref_edge] if t != middle][0]
    marks = np.zeros(4, dtype=bool)
    marks[partner] = True
    result = refine_rgb(child, marks)
    assert result.child_mesh.n_elements == 8
    counts = dict(zip(*np.unique(result.child_counts, return_counts=True)))
    assert counts == {1: 2, 2: 1, 4: 1}  # two untouched, one green, one red
    assert np.array_equal(result.directly_refined, marks)
    assert validate_conforming(result.child_mesh).ok


def test_uniform_refine_counts_and_area():
    sq = make_unit_square()
    assert uniform_refine(sq, 0) is sq
    assert uniform_refine(sq, 1).n_elements == 8
    m4 = uniform_refine(sq, 4)
    assert m4.n_elements == 512
    assert abs(m4.total_area - 1.0) <= 1e-10
    with pytest.raises(MeshError):
        uniform_refine(sq, -1)


def test_marks_length_checked():
    with pytest.raises(MeshError):
        refine_rgb(make_unit_square(), [True])


def test_conformity_and_area_under_random_marks():
    gen = rng.stream(2024, "mesh-property")
    for domain_seed in range(3):
        mesh = uniform_refine(make_unit_square(), 2)
        area = mesh.total_area
        for _ in range(4):
            p = gen.uniform(0.0, 0.6)
            marks = gen.random(mesh.n_elements) < p
            result = refine_rgb(mesh, marks)
            mesh = result.child_mesh
            report = validate_conforming(mesh)
            assert report.ok, report.message
            assert abs(mesh.total_area - area) <= 1e-9 * area


def test_children_tile_their_parent():
    mesh = uniform_refine(make_unit_square(), 1)
    gen = rng.stream(5, "tile")
    marks = gen.random(mesh.n_elements) < 0.5
    result = refine_rgb(mesh, marks)
    per_parent = np.bincount(
        result.parent_of, weights=result.child_mesh.element_volumes, minlength=mesh.n_elements
    )
    assert np.allclose(per_parent, mesh.element_volumes, rtol=1e-12)


# -- agent mappings -------------------------------------------------------------------


def test_mapping_single_red_split():
    result = refine_rgb(make_scalene(), [True])
    phi = build_agent_mapping(result)
    dense = phi.matrix.toarray()
    assert dense.shape == (1, 4)
    assert np.allclose(dense, 0.25)
    assert phi.entries_sum() == pytest.approx(1.0, abs=1e-15)


def test_mapping_identity_for_noop():
    mesh = uniform_refine(make_unit_square(), 1)
    result = refine_rgb(mesh, np.zeros(mesh.n_elements, dtype=bool))
    phi = build_agent_mapping(result)
    assert np.allclose(phi.matrix.toarray(), np.eye(mesh.n_elements))


def test_mapping_four_to_eight():
    mesh = make_scalene()
    child = refine_rgb(mesh, [True]).child_mesh
    neighbors = child.element_neighbors
    middle = int(np.flatnonzero((neighbors >= 0).all(axis=1))[0])
    ref_edge = child.tri_edge_id[middle, child.refine_slot[middle]]
    partner = [t for t in child.edge_elements[ref_edge] if t != middle][0]
    marks = np.zeros(4, dtype=bool)
    marks[partner] = True
    result = refine_rgb(child, marks)
    phi = build_agent_mapping(result)
    vals = phi.matrix.data
    assert np.allclose(vals, 0.5)  # 4/8 at every parent-child pair
    assert phi.entries_sum() == pytest.approx(4.0, abs=1e-12)
    assert np.array_equal(phi.column_nnz(), np.ones(8, dtype=np.int64))


def test_mapping_variants():
    result = refine_rgb(make_scalene(), [True])
    assert np.allclose(build_agent_mapping(result, "unnormalized_sum").matrix.data, 1.0)
    assert np.allclose(build_agent_mapping(result, "unnormalized_mean").matrix.data, 0.25)
    assert np.allclose(build_agent_mapping(result, "normalized_mean").matrix.data, 0.25 * 0.25)
    with pytest.raises(ValueError):
        build_agent_mapping(result, "bogus")


def test_compose_chain_and_errors():
    mesh = make_scalene()
    r1 = refine_rgb(mesh, [True])
    phi1 = build_agent_mapping(r1)
    child = r1.child_mesh
    neighbors = child.element_neighbors
    middle = int(np.flatnonzero((neighbors >= 0).all(axis=1))[0])
    ref_edge = child.tri_edge_id[middle, child.refine_slot[middle]]
    partner = [t for t in child.edge_elements[ref_edge] if t != middle][0]
    marks = np.zeros(4, dtype=bool)
    marks[partner] = True
    phi2 = build_agent_mapping(refine_rgb(child, marks))

    assert np.allclose(compose_mappings([phi1]).matrix.toarray(), phi1.matrix.toarray())
    comp = compose_mappings([phi1, phi2])
    assert comp.rows == 1 and comp.cols == 8
    assert np.allclose(comp.matrix.toarray(), 0.125)
    assert comp.entries_sum() == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(comp.column_nnz(), np.ones(8, dtype=np.int64))

    with pytest.raises(ValueError):
        compose_mappings([])
    with pytest.raises(ValueError):
        compose_mappings([phi2, phi1])


def test_composition_counts_descendants():
    # composed phi applied to all-ones counts descendants scaled by N0/NT
    mesh = uniform_refine(make_unit_square(), 1)
    gen = rng.stream(11, "compose")
    maps = []
    results = []
    current = mesh
    for _ in range(3):
        marks = gen.random(current.n_elements) < 0.4
        result = refine_rgb(current, marks)
        results.append(result)
        maps.append(build_agent_mapping(result))
        current = result.child_mesh
    comp = compose_mappings(maps)
    ones = np.ones(current.n_elements)
    per_initial = comp.apply(ones)
    # count descendants by walking parents
    descendants = np.ones(current.n_elements, dtype=np.int64)
    idx = np.arange(current.n_elements)
    for result in reversed(results):
        idx = result.parent_of[idx]
    counts = np.bincount(idx, minlength=mesh.n_elements)
    expected = counts * (mesh.n_elements / current.n_elements)
    assert np.allclose(per_initial, expected, atol=1e-12)


# -- validation -----------------------------------------------------------------------


def test_validate_refined_meshes_pass():
    mesh = uniform_refine(make_unit_square(), 3)
    assert validate_conforming(mesh).ok


def test_validate_hanging_node():
    verts = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 1.0], [1.0, 0.0], [1.0, -1.0]])
    tris = np.array([[0, 3, 2], [3, 1, 2], [0, 4, 1]])
    tags = {
        (0, 2): "outer", (1, 2): "outer", (0, 4): "outer", (1, 4): "outer",
        (0, 3): "outer", (1, 3): "outer",
    }
    report = validate_conforming(TriMesh(verts, tris, tags))
    assert not report.ok
    assert "hanging" in report.message


def test_validate_empty_and_inverted():
    empty = TriMesh(np.zeros((0, 2)), np.zeros((0, 3), dtype=np.int64), {})
    assert not validate_conforming(empty).ok
    flipped = TriMesh(
        np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 2, 1]]), {}
    )
    report = validate_conforming(flipped)
    assert not report.ok and "area" in report.message


def test_validate_duplicate_vertices():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1e-14, 0.0]])
    tris = np.array([[0, 1, 2]])
    report = validate_conforming(TriMesh(verts, tris, {(0, 1): "o", (1, 2): "o", (0, 2): "o"}))
    assert not report.ok and "duplicate" in report.message


# -- serialization --------------------------------------------------------------------


def test_text_roundtrip_bit_exact(tmp_path):
    mesh = uniform_refine(make_unit_square(), 2)
    back, extra = mesh_from_text(mesh_to_text(mesh))
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert back.boundary_tags == mesh.boundary_tags
    assert extra is None

    field = np.sin(np.arange(mesh.n_vertices) * 0.37)
    path = tmp_path / "mesh.txt"
    save_mesh(mesh, path, field)
    back2, field2 = load_mesh(path)
    assert np.array_equal(field2, field)
    assert np.array_equal(back2.vertices, mesh.vertices)


def test_text_format_header_and_sections():
    mesh = make_unit_square()
    lines = mesh_to_text(mesh).splitlines()
    assert lines[0] == "2 4"
    assert len(lines) == 1 + 4 + 2 + 4  # header, vertices, triangles, boundary
    assert lines[-1].split()[2] == "outer"
