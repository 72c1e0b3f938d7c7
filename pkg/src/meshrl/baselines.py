"""Non-learned refinement baselines.

All threshold heuristics iterate solve -> estimate per-element errors ->
mark elements whose estimate exceeds theta times the current maximum ->
refine. The oracle variants read their estimates from the reference
solution (integrated or maximum pointwise difference); the recovered-
gradient estimator only needs the current solution, averaging element
gradients to the vertices and measuring each element's distance to the
recovered field. Uniform refinement marks everything.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from meshrl import env, geometry
from meshrl.fem import FemSolution, assemble_and_solve, element_gradients
from meshrl.mesh import TriMesh, refine_rgb, uniform_refine
from meshrl.tasks import TaskInstance

HEURISTIC_KINDS = ("uniform", "oracle", "max_oracle", "zz")


@dataclass
class HeuristicConfig:
    kind: str
    theta: float = 0.5
    steps: int = 4
    initial_uniform_refinements: int = 2  # used by the zz kind only

    def __post_init__(self):
        if self.kind not in HEURISTIC_KINDS:
            raise ValueError(f"unknown heuristic kind {self.kind!r}")
        if not (0.0 < self.theta <= 1.0):
            raise ValueError("theta must be in (0, 1]")
        if self.steps < 0 or self.initial_uniform_refinements < 0:
            raise ValueError("step counts must be >= 0")


@dataclass
class HeuristicRun:
    mesh: TriMesh
    solution: FemSolution
    trace: list = field(default_factory=list)
    termination: str = "done"


def threshold_marks(estimates: np.ndarray, theta: float, atol: float = 0.0) -> np.ndarray:
    """Mark elements with estimate >= theta * max estimate.

    Estimates at or below ``atol`` are never marked, so theta=1 refines
    exactly the elements attaining the maximum and a mesh whose estimates
    are all zero (up to solver noise) refines nothing.
    """
    estimates = np.asarray(estimates, dtype=np.float64)
    return (estimates >= theta * estimates.max(initial=0.0)) & (estimates > atol)


def zz_error_estimate(sol: FemSolution) -> np.ndarray:
    """Recovered-gradient error indicator per element.

    Vertex gradients are area-weighted averages of incident element
    gradients; the indicator is the L2 norm (3-point mid-edge quadrature) of
    the difference between the linear interpolant of the recovered gradient
    and the element's constant gradient. Exactly zero for globally affine
    solutions.
    """
    mesh = sol.mesh
    tri = mesh.triangles
    grads = element_gradients(sol)
    area = mesh.element_volumes
    acc = np.zeros((mesh.n_vertices, 2))
    wsum = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(acc, tri[:, k], grads * area[:, None])
        np.add.at(wsum, tri[:, k], area)
    recovered = acc / wsum[:, None]

    rec_at_verts = recovered[tri]  # (nt, 3, 2)
    rec_at_mid = 0.5 * (rec_at_verts + np.roll(rec_at_verts, -1, axis=1))
    diff = rec_at_mid - grads[:, None, :]
    sq = (diff**2).sum(axis=2)  # (nt, 3)
    return np.sqrt((area / 3.0) * sq.sum(axis=1))


def oracle_error_estimate(
    mesh: TriMesh,
    sol: FemSolution,
    task: TaskInstance,
    variant: str = "integrated",
    pairs=None,
) -> np.ndarray:
    """Reference-based per-element error estimates (privileged information).

    "integrated": sum over contained reference midpoints of volume times
    |difference|; "max": the maximum |difference|. Shares the environment's
    midpoint assignment, including the half weight on shared edges.
    """
    if variant not in ("integrated", "max"):
        raise ValueError(f"unknown oracle variant {variant!r}")
    if pairs is None:
        pairs = geometry.assign_points(mesh, task.ref_midpoints)
    terms = env.error_terms(mesh, sol, task.ref_midpoints, task.ref_volumes, task.u_ref_mid, pairs)
    return terms.integrated_per_element if variant == "integrated" else terms.max_per_element


def run_heuristic(task: TaskInstance, config: HeuristicConfig, element_cap: int = env.DEFAULT_ELEMENT_CAP) -> HeuristicRun:
    """Run a refinement heuristic for its configured number of passes."""
    mesh = task.initial_mesh
    pairs = task.initial_pairs
    if config.kind == "zz" and config.initial_uniform_refinements:
        for _ in range(config.initial_uniform_refinements):
            result = refine_rgb(mesh, np.ones(mesh.n_elements, dtype=bool))
            mesh = result.child_mesh
        pairs = None
    trace = []
    termination = "done"
    sol = assemble_and_solve(task.problem, mesh)
    for step_index in range(config.steps):
        if config.kind == "uniform":
            marks = np.ones(mesh.n_elements, dtype=bool)
        else:
            if config.kind == "zz":
                estimates = zz_error_estimate(sol)
                atol = 1e-12
            elif config.kind == "oracle":
                estimates = oracle_error_estimate(mesh, sol, task, "integrated", pairs)
                atol = 1e-12 * task.initial_integrated_total
            else:
                estimates = oracle_error_estimate(mesh, sol, task, "max", pairs)
                atol = 1e-12 * task.initial_error_total
            marks = threshold_marks(estimates, config.theta, atol)
        if not marks.any():
            termination = "converged"
            break
        result = refine_rgb(mesh, marks)
        if pairs is not None:
            pairs = env.relocate_pairs(pairs, result, task.ref_midpoints)
        mesh = result.child_mesh
        sol = assemble_and_solve(task.problem, mesh)
        trace.append({"step": step_index, "elements": mesh.n_elements, "marked": int(marks.sum())})
        if mesh.n_elements > element_cap:
            termination = "cap"
            break
    return HeuristicRun(mesh=mesh, solution=sol, trace=trace, termination=termination)


def uniform_refinement_runs(task: TaskInstance, max_depth: int) -> list[HeuristicRun]:
    """Solutions for 0..max_depth uniform refinement passes (Pareto anchor)."""
    runs = []
    mesh = task.initial_mesh
    for depth in range(max_depth + 1):
        sol = assemble_and_solve(task.problem, mesh)
        runs.append(HeuristicRun(mesh=mesh, solution=sol, trace=[{"depth": depth}]))
        if depth < max_depth:
            mesh = uniform_refine(mesh, 1)
    return runs
