import math

import numpy as np
import pytest

from meshrl import tasks
from meshrl.mesh import validate_conforming


def test_sampling_is_deterministic():
    for kind in tasks.TASK_KINDS:
        a = tasks.sample_task(kind, 42)
        b = tasks.sample_task(kind, 42)
        assert a == b
        assert a.to_json() == b.to_json()
        assert tasks.sample_task(kind, 43) != a


def test_spec_json_roundtrip():
    for kind, seed in (("laplace", 5), ("poisson", 6)):
        spec = tasks.sample_task(kind, seed)
        assert tasks.TaskSpec.from_json(spec.to_json()) == spec


def test_laplace_parameter_ranges():
    gen_seeds = range(1000)
    for s in gen_seeds:
        d = tasks.sample_task("laplace", s).domain
        assert 0.05 <= d.hole_size[0] <= 0.25 and 0.05 <= d.hole_size[1] <= 0.25
        assert 0.2 <= d.hole_center[0] <= 0.8 and 0.2 <= d.hole_center[1] <= 0.8


def test_poisson_parameter_ranges():
    for s in range(1000):
        spec = tasks.sample_task("poisson", s)
        assert 0.2 <= spec.domain.corner[0] <= 0.95
        lp = spec.load_params
        for cov in lp.covariances:
            eig = np.linalg.eigvalsh(np.array(cov))
            assert (eig >= 1e-4 - 1e-12).all() and (eig <= 1e-3 + 1e-12).all()
        w = np.array(lp.weights)
        assert (w > 0).all() and w.sum() == pytest.approx(1.0, abs=1e-12)
        inside = spec.domain.contains(np.array(lp.means))
        assert inside.all()


def test_lshape_and_hole_areas():
    lshape = tasks.DomainParams("lshape", corner=(0.5, 0.5))
    mesh = tasks.initial_mesh_for_domain(lshape, target_size=0.1)
    assert abs(mesh.total_area - 0.75) <= 1e-9

    hole = tasks.DomainParams("square_hole", hole_center=(0.5, 0.5), hole_size=(0.2, 0.2))
    mesh = tasks.initial_mesh_for_domain(hole, target_size=0.1)
    assert abs(mesh.total_area - 0.96) <= 1e-9
    tags = set(mesh.boundary_tags.values())
    assert tags == {"outer", "inner"}


def test_mesher_median_area_contract():
    target = tasks.DEFAULT_TARGET_SIZE
    want = (math.sqrt(3) / 4) * target**2
    mesh = tasks.initial_mesh_for_domain(tasks.DomainParams("square"), target_size=target)
    median = float(np.median(mesh.element_volumes))
    assert 0.5 * want <= median <= 2.0 * want
    assert validate_conforming(mesh).ok


@pytest.mark.parametrize("kind,seed", [("laplace", 0), ("laplace", 11), ("poisson", 3), ("poisson", 12)])
def test_initial_meshes_conforming_and_area(kind, seed):
    spec = tasks.sample_task(kind, seed)
    mesh = tasks.initial_mesh_for_domain(spec.domain, target_size=0.08)
    assert validate_conforming(mesh).ok
    assert abs(mesh.total_area - spec.domain.area) <= 1e-10 * spec.domain.area


def test_reference_is_256x_for_depth_4():
    spec = tasks.TaskSpec(
        kind="poisson", seed=1, domain=tasks.DomainParams("square"),
        load_params=tasks.sample_task("poisson", 1).load_params,
    )
    inst = tasks.instantiate(spec, 4, target_size=0.25)
    assert inst.reference_mesh.n_elements == 256 * inst.initial_mesh.n_elements


def test_instance_cache_roundtrip(tmp_path, tiny_laplace):
    spec = tasks.sample_task("laplace", 123)
    cache = str(tmp_path / "cache")
    first = tasks.instantiate(spec, 2, cache_dir=cache, target_size=0.25)
    second = tasks.instantiate(spec, 2, cache_dir=cache, target_size=0.25)
    assert np.array_equal(first.initial_mesh.vertices, second.initial_mesh.vertices)
    assert np.array_equal(first.reference_solution.nodal_values, second.reference_solution.nodal_values)
    assert first.initial_error_total == second.initial_error_total
    assert first.metric_denominators == second.metric_denominators
    # cached instance equals the uncached build
    assert np.array_equal(first.initial_mesh.triangles, tiny_laplace.initial_mesh.triangles)
    assert first.initial_error_total == tiny_laplace.initial_error_total
    assert np.array_equal(first.initial_pairs[0], tiny_laplace.initial_pairs[0])
    assert np.array_equal(first.initial_pairs[2], tiny_laplace.initial_pairs[2])


def test_normalizers_positive(tiny_laplace, tiny_poisson):
    for inst in (tiny_laplace, tiny_poisson):
        assert inst.initial_error_total > 0
        assert inst.initial_integrated_total > 0
        assert all(v > 0 for v in inst.metric_denominators.values())


def test_train_eval_seed_streams_disjoint():
    train = tasks.task_seeds("laplace", 50, 7, "train")
    evals = tasks.task_seeds("laplace", 50, 7, "eval")
    assert not set(train) & set(evals)
    assert tasks.task_seeds("laplace", 50, 7, "train") == train


def test_instantiate_rejects_bad_depth():
    with pytest.raises(ValueError):
        tasks.instantiate(tasks.sample_task("laplace", 1), 0)
