"""Episode engine: per-element errors, local rewards, refinement steps.

An episode starts from a task's initial mesh and runs a fixed number of
refinement steps. Each step refines the marked elements, solves the PDE on
the child mesh, measures per-element errors against the cached reference
solution, and pays each refined element the drop in its maximum contained
error minus a per-new-element penalty alpha. Unrefined elements always
receive exactly 0. Episodes terminate early with a -1000 reward for every
element when the element cap is exceeded.

Per-element errors sample the reference solution at the reference mesh's
element midpoints. Midpoints are assigned to containing elements once per
task and then relocated among an element's children when it is refined;
midpoints that fall on a shared edge count for every adjacent element with
proportional weight (0.5 on an ordinary interior edge).

Only scalar solution fields are supported. For multi-quantity problems the
intended extension is to normalize errors per quantity (each by its own
initial-mesh total) and combine the per-quantity rewards with a
problem-dependent average or norm; no such problem family exists here, so
the combiner is documented but not implemented.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from meshrl import geometry
from meshrl.fem import FemSolution, assemble_and_solve
from meshrl.geometry import kernels
from meshrl.mesh import AgentMapping, RefinementResult, TriMesh, build_agent_mapping, refine_rgb
from meshrl.tasks import TaskInstance

DEFAULT_ELEMENT_CAP = 20_000
CAP_PENALTY = -1000.0
REWARD_VARIANTS = ("max", "volume_scaled")


@dataclass
class ErrorTerms:
    """Raw (unnormalized) error reductions for one mesh against the reference."""

    max_per_element: np.ndarray
    integrated_per_element: np.ndarray
    midpoint_diff: np.ndarray  # signed u_ref - u_mesh per reference midpoint
    pairs: tuple  # (pair_point, pair_elem, pair_weight)


def error_terms(mesh: TriMesh, sol: FemSolution, ref_mid, ref_vol, u_ref_mid, pairs) -> ErrorTerms:
    pair_point, pair_elem, pair_w = pairs
    u_at = geometry.interpolate_pairs(mesh, sol.nodal_values, ref_mid, pair_point, pair_elem)
    diff = u_ref_mid[pair_point] - u_at
    absdiff = np.abs(diff)
    vol = np.ascontiguousarray(ref_vol[pair_point])
    max_e, integ = kernels.element_error_reduce(
        mesh.n_elements,
        np.ascontiguousarray(pair_elem, dtype=np.int64),
        np.ascontiguousarray(pair_w, dtype=np.float64),
        np.ascontiguousarray(absdiff),
        vol,
    )
    mid_diff = np.bincount(pair_point, weights=pair_w * diff, minlength=len(ref_mid))
    return ErrorTerms(max_e, integ, mid_diff, pairs)


def compute_element_errors(mesh: TriMesh, sol: FemSolution, task: TaskInstance, pairs=None) -> np.ndarray:
    """Normalized per-element errors: max |u_ref - u_mesh| over contained
    reference midpoints, divided by the initial mesh's total."""
    if pairs is None:
        pairs = geometry.assign_points(mesh, task.ref_midpoints)
    terms = error_terms(mesh, sol, task.ref_midpoints, task.ref_volumes, task.u_ref_mid, pairs)
    return terms.max_per_element / task.initial_error_total


def relocate_pairs(pairs, result: RefinementResult, ref_mid) -> tuple:
    """Move an assignment across one refinement: points of unrefined elements
    carry over; points of refined parents are re-tested against the parent's
    children only."""
    pair_point, pair_elem, _ = pairs
    counts = result.child_counts
    offsets = result.child_offsets
    refined = counts > 1
    pair_is_refined = refined[pair_elem]

    keep_point = pair_point[~pair_is_refined]
    keep_elem = offsets[pair_elem[~pair_is_refined]]  # single child keeps parent's slot

    rel_point = pair_point[pair_is_refined]
    rel_parent = pair_elem[pair_is_refined]
    reps = counts[rel_parent]
    cand_point = np.repeat(rel_point, reps)
    starts = np.repeat(offsets[rel_parent], reps)
    within = np.arange(len(cand_point), dtype=np.int64) - np.repeat(
        np.concatenate([[0], np.cumsum(reps)[:-1]]) if len(reps) else np.empty(0, np.int64), reps
    )
    cand_elem = starts + within
    child = result.child_mesh
    inside = geometry.pair_contains(child, ref_mid, cand_point, cand_elem)
    new_point = np.concatenate([keep_point, cand_point[inside]])
    new_elem = np.concatenate([keep_elem, cand_elem[inside]])
    return geometry.recount_weights(child, ref_mid, new_point, new_elem, len(ref_mid))


def sample_alpha(alpha_range, gen: np.random.Generator) -> float:
    """Log-uniform draw from [alpha_min, alpha_max]."""
    lo, hi = alpha_range
    if not (0 < lo <= hi):
        raise ValueError("alpha range must satisfy 0 < min <= max")
    return float(np.exp(gen.uniform(np.log(lo), np.log(hi))))


NODE_FEATURES_COMMON = ("solution_mean", "solution_std", "element_volume", "timestep_fraction", "log10_alpha")
TASK_FEATURE = {"laplace": "inner_boundary_distance", "poisson": "load_at_midpoint"}


@dataclass
class ObservationGraph:
    """Element adjacency graph with local, rigid-motion-invariant features."""

    node_features: np.ndarray  # (N, F)
    edges: np.ndarray  # (2, E) directed sender/receiver element indices
    edge_features: np.ndarray  # (E, 1) midpoint distances
    feature_names: tuple

    @property
    def n_nodes(self) -> int:
        return len(self.node_features)


@dataclass
class EpisodeState:
    task: TaskInstance
    horizon: int
    alpha: float
    element_cap: int = DEFAULT_ELEMENT_CAP
    reward_variant: str = "max"
    reward_uses_normalized_phi: bool = False
    t: int = 0
    current_mesh: TriMesh = None
    current_solution: FemSolution = None
    element_errors: np.ndarray = None  # normalized max errors
    element_errors_integrated: np.ndarray = None  # normalized integrated errors
    pairs: tuple = None
    mappings_so_far: list = field(default_factory=list)
    done: bool = False
    termination: str | None = None


@dataclass
class StepOutcome:
    next_observation: ObservationGraph | None
    rewards: np.ndarray  # one reward per pre-refinement element
    mapping: AgentMapping
    done: bool
    info: dict


def reset(
    task: TaskInstance,
    alpha_range=None,
    gen: np.random.Generator | None = None,
    alpha: float | None = None,
    horizon: int | None = None,
    element_cap: int = DEFAULT_ELEMENT_CAP,
    reward_variant: str = "max",
    reward_uses_normalized_phi: bool = False,
) -> tuple[EpisodeState, ObservationGraph]:
    """Start an episode; alpha is drawn log-uniformly unless given explicitly."""
    if alpha is None:
        if alpha_range is None or gen is None:
            raise ValueError("either alpha or (alpha_range, gen) is required")
        alpha = sample_alpha(alpha_range, gen)
    if reward_variant not in REWARD_VARIANTS:
        raise ValueError(f"unknown reward variant {reward_variant!r}")
    state = EpisodeState(
        task=task,
        horizon=int(horizon if horizon is not None else task.refinement_depth),
        alpha=float(alpha),
        element_cap=element_cap,
        reward_variant=reward_variant,
        reward_uses_normalized_phi=reward_uses_normalized_phi,
        current_mesh=task.initial_mesh,
        current_solution=task.initial_solution,
        pairs=task.initial_pairs,
    )
    terms = error_terms(
        state.current_mesh, state.current_solution, task.ref_midpoints, task.ref_volumes, task.u_ref_mid, state.pairs
    )
    state.element_errors = terms.max_per_element / task.initial_error_total
    state.element_errors_integrated = terms.integrated_per_element / task.initial_integrated_total
    return state, build_observation(state)


def compute_rewards(
    old_errors,
    new_errors,
    mapping: AgentMapping,
    directly_refined,
    alpha: float,
    variant: str = "max",
    old_volumes=None,
    reward_uses_normalized_phi: bool = False,
) -> np.ndarray:
    """Per-element local rewards for one refinement step.

    Max variant: (err_i - max over children of err_j) - alpha*(children - 1).
    Volume variant: the integrated-error form, scaled by 1/element volume.
    Unrefined elements get exactly 0 either way; ``directly_refined`` is
    informational only, closure splits are rewarded like marked ones.
    """
    old_errors = np.asarray(old_errors, dtype=np.float64)
    new_errors = np.asarray(new_errors, dtype=np.float64)
    parent_of = mapping.parent_of
    if parent_of is None:
        raise ValueError("rewards need a single-step mapping with parent structure")
    n = mapping.rows
    counts = np.bincount(parent_of, minlength=n)
    refined = counts > 1
    penalty = alpha * (counts - 1)
    if variant == "max":
        child_vals = new_errors
        if reward_uses_normalized_phi:
            child_vals = child_vals * (mapping.rows / mapping.cols)
        best_child = np.zeros(n)
        np.maximum.at(best_child, parent_of, child_vals)
        r = (old_errors - best_child) - penalty
    elif variant == "volume_scaled":
        if old_volumes is None:
            raise ValueError("volume_scaled rewards need the old element volumes")
        child_sum = np.bincount(parent_of, weights=new_errors, minlength=n)
        r = (old_errors - child_sum) / np.asarray(old_volumes) - penalty
    else:
        raise ValueError(f"unknown reward variant {variant!r}")
    r[~refined] = 0.0
    return r


def step(state: EpisodeState, actions) -> StepOutcome:
    """Advance one refinement step (mutates ``state``)."""
    if state.done:
        raise RuntimeError("episode is already done")
    actions = np.asarray(actions, dtype=bool)
    mesh = state.current_mesh
    if actions.shape != (mesh.n_elements,):
        raise ValueError("actions must have one entry per element")
    task = state.task
    old_count = mesh.n_elements
    old_errors = state.element_errors
    old_int = state.element_errors_integrated
    old_volumes = mesh.element_volumes

    result = refine_rgb(mesh, actions)
    mapping = build_agent_mapping(result)
    state.mappings_so_far.append(mapping)
    child = result.child_mesh
    state.t += 1

    info = {
        "old_elements": old_count,
        "new_elements": child.n_elements,
        "directly_refined": int(actions.sum()),
        "alpha": state.alpha,
        "t": state.t,
    }

    if child.n_elements > state.element_cap:
        state.current_mesh = child
        state.current_solution = None
        state.element_errors = None
        state.element_errors_integrated = None
        state.pairs = None
        state.done = True
        state.termination = "cap"
        info["termination"] = "cap"
        rewards = np.full(old_count, CAP_PENALTY)
        return StepOutcome(None, rewards, mapping, True, info)

    pairs = relocate_pairs(state.pairs, result, task.ref_midpoints)
    sol = assemble_and_solve(task.problem, child)
    terms = error_terms(child, sol, task.ref_midpoints, task.ref_volumes, task.u_ref_mid, pairs)
    new_errors = terms.max_per_element / task.initial_error_total
    new_int = terms.integrated_per_element / task.initial_integrated_total

    if state.reward_variant == "max":
        rewards = compute_rewards(
            old_errors, new_errors, mapping, result.directly_refined, state.alpha,
            variant="max", reward_uses_normalized_phi=state.reward_uses_normalized_phi,
        )
    else:
        rewards = compute_rewards(
            old_int, new_int, mapping, result.directly_refined, state.alpha,
            variant="volume_scaled", old_volumes=old_volumes,
        )

    state.current_mesh = child
    state.current_solution = sol
    state.element_errors = new_errors
    state.element_errors_integrated = new_int
    state.pairs = pairs
    if state.t >= state.horizon:
        state.done = True
        state.termination = "horizon"
        info["termination"] = "horizon"
    info["sum_errors"] = float(new_errors.sum())
    info["sum_rewards"] = float(rewards.sum())
    # terminal observations are never acted on; build_observation(state)
    # remains available to callers that want one
    obs = None if state.done else build_observation(state)
    return StepOutcome(obs, rewards, mapping, state.done, info)


def build_observation(state: EpisodeState) -> ObservationGraph:
    mesh = state.current_mesh
    sol = state.current_solution
    u_at_verts = sol.nodal_values[mesh.triangles]  # (N, 3)
    mean = u_at_verts.mean(axis=1)
    std = u_at_verts.std(axis=1)
    t_frac = np.full(mesh.n_elements, state.t / state.horizon)
    log_alpha = np.full(mesh.n_elements, math.log10(state.alpha))
    cols = [mean, std, mesh.element_volumes, t_frac, log_alpha]
    names = list(NODE_FEATURES_COMMON)

    kind = state.task.kind
    names.append(TASK_FEATURE[kind])
    if kind == "laplace":
        cols.append(_min_distance_to_tagged(mesh, "inner"))
    else:
        cols.append(state.task.problem.load(mesh.element_midpoints))

    node_features = np.stack(cols, axis=1)
    edges, edge_features = element_adjacency(mesh)
    return ObservationGraph(node_features, edges, edge_features, tuple(names))


def element_adjacency(mesh: TriMesh):
    """Bidirectional shared-edge adjacency with midpoint-distance features."""
    interior = np.flatnonzero(mesh.edge_count == 2)
    t1 = mesh.edge_elements[interior, 0]
    t2 = mesh.edge_elements[interior, 1]
    senders = np.concatenate([t1, t2])
    receivers = np.concatenate([t2, t1])
    edges = np.stack([senders, receivers], axis=0)
    d = np.linalg.norm(mesh.element_midpoints[senders] - mesh.element_midpoints[receivers], axis=1)
    return edges, d[:, None]


def _min_distance_to_tagged(mesh: TriMesh, tag: str) -> np.ndarray:
    segs = [(a, b) for (a, b), t in sorted(mesh.boundary_tags.items()) if t == tag]
    pts = mesh.element_midpoints
    if not segs:
        return np.zeros(len(pts))
    seg = np.array(segs, dtype=np.int64)
    a = mesh.vertices[seg[:, 0]]  # (S, 2)
    b = mesh.vertices[seg[:, 1]]
    ab = b - a
    denom = (ab**2).sum(axis=1)
    ap = pts[:, None, :] - a[None, :, :]  # (N, S, 2)
    tproj = np.clip((ap * ab[None, :, :]).sum(axis=2) / denom[None, :], 0.0, 1.0)
    closest = a[None, :, :] + tproj[:, :, None] * ab[None, :, :]
    dist = np.linalg.norm(pts[:, None, :] - closest, axis=2)
    return dist.min(axis=1)


def run_episode(
    task: TaskInstance,
    act_fn,
    alpha: float,
    horizon: int | None = None,
    element_cap: int = DEFAULT_ELEMENT_CAP,
    trace: list | None = None,
) -> EpisodeState:
    """Roll one episode with actions from ``act_fn(observation, state)``.

    Appends per-step dict rows to ``trace`` when given.
    """
    state, obs = reset(task, alpha=alpha, horizon=horizon, element_cap=element_cap)
    while not state.done:
        actions = act_fn(obs, state)
        outcome = step(state, actions)
        if trace is not None:
            trace.append(
                {
                    "t": outcome.info["t"],
                    "elements": outcome.info["new_elements"],
                    "sum_errors": outcome.info.get("sum_errors", float("nan")),
                    "sum_rewards": float(outcome.rewards.sum()),
                    "alpha": state.alpha,
                    "termination": outcome.info.get("termination", ""),
                }
            )
        obs = outcome.next_observation
    return state
