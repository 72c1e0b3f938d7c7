"""Mesh quality metrics, Pareto sweeps, and reporting.

Mesh quality is measured at the reference mesh's element midpoints: the
volume-weighted squared difference to the reference solution, the
volume-weighted absolute difference, and the mean of the top 0.1% of
absolute differences, each normalized by its value on the task's initial
mesh (so the initial mesh scores exactly 1). Sweeps aggregate rollouts
across tasks per resolution parameter with the interquartile mean.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from meshrl import env, geometry
from meshrl.fem import FemSolution
from meshrl.mesh import TriMesh
from meshrl.policy import sample_actions
from meshrl.tasks import TaskInstance


@dataclass
class MeshMetrics:
    element_count: int
    squared_error: float
    mean_error: float
    top_error: float


def mesh_metrics(mesh: TriMesh, sol: FemSolution, task: TaskInstance, pairs=None) -> MeshMetrics:
    """Normalized error metrics of a mesh/solution pair against the reference."""
    if pairs is None:
        pairs = geometry.assign_points(mesh, task.ref_midpoints)
    terms = env.error_terms(mesh, sol, task.ref_midpoints, task.ref_volumes, task.u_ref_mid, pairs)
    absdiff = np.abs(terms.midpoint_diff)
    vol = task.ref_volumes
    dens = task.metric_denominators
    k_top = max(1, int(0.001 * len(absdiff)))
    top = float(np.sort(absdiff)[-k_top:].mean())
    return MeshMetrics(
        element_count=mesh.n_elements,
        squared_error=float((vol * terms.midpoint_diff**2).sum()) / dens["squared"],
        mean_error=float((vol * absdiff).sum()) / dens["mean"],
        top_error=top / dens["top"],
    )


def iqm(values) -> float:
    """Interquartile mean with proportional weights at fractional cut points."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    if n == 0:
        raise ValueError("iqm of an empty list")
    lo, hi = 0.25 * n, 0.75 * n
    idx = np.arange(n, dtype=np.float64)
    w = np.minimum(idx + 1.0, hi) - np.maximum(idx, lo)
    w = np.clip(w, 0.0, 1.0)
    return float((w * v).sum() / w.sum())


@dataclass
class ParetoPoint:
    resolution_parameter: float
    n_runs: int
    n_capped: int
    iqm_elements: float
    iqm_squared_error: float
    iqm_mean_error: float
    iqm_top_error: float
    label: str = ""


def policy_rollout(policy, task: TaskInstance, alpha: float, horizon: int | None = None,
                   element_cap: int = env.DEFAULT_ELEMENT_CAP, trace: list | None = None) -> env.EpisodeState:
    """One deterministic episode: refine wherever sigmoid(logit) > 0.5."""
    import torch

    def act(obs, state):
        with torch.no_grad():
            logits, _ = policy(obs, train_mode=False)
        actions, _ = sample_actions(logits, None, deterministic=True)
        return actions

    return env.run_episode(task, act, alpha=alpha, horizon=horizon, element_cap=element_cap, trace=trace)


def rollout_metrics(policy, task: TaskInstance, alpha: float, horizon: int | None,
                    element_cap: int = env.DEFAULT_ELEMENT_CAP) -> tuple[MeshMetrics, str]:
    state = policy_rollout(policy, task, alpha, horizon, element_cap)
    if state.termination == "cap":
        from meshrl.fem import assemble_and_solve

        sol = assemble_and_solve(task.problem, state.current_mesh)
        return mesh_metrics(state.current_mesh, sol, task), "cap"
    return mesh_metrics(state.current_mesh, state.current_solution, task, pairs=state.pairs), state.termination or ""


def pareto_sweep(
    policy,
    tasks: list[TaskInstance],
    alpha_grid,
    horizon: int | None = None,
    element_cap: int = env.DEFAULT_ELEMENT_CAP,
    exclude_capped: bool = False,
    label: str = "policy",
) -> list[ParetoPoint]:
    """Deterministic rollouts for every (alpha, task); IQM per alpha.

    Cap-terminated rollouts are kept in the aggregate unless
    ``exclude_capped`` enables the outlier filter.
    """
    points = []
    for alpha in alpha_grid:
        metrics, capped = [], 0
        for task in tasks:
            m, term = rollout_metrics(policy, task, float(alpha), horizon, element_cap)
            capped += term == "cap"
            if term == "cap" and exclude_capped:
                continue
            metrics.append(m)
        if not metrics:
            continue
        points.append(
            ParetoPoint(
                resolution_parameter=float(alpha),
                n_runs=len(metrics),
                n_capped=capped,
                iqm_elements=iqm([m.element_count for m in metrics]),
                iqm_squared_error=iqm([m.squared_error for m in metrics]),
                iqm_mean_error=iqm([m.mean_error for m in metrics]),
                iqm_top_error=iqm([m.top_error for m in metrics]),
                label=label,
            )
        )
    return points


def log_spaced(lo: float, hi: float, count: int) -> np.ndarray:
    return np.exp(np.linspace(math.log(lo), math.log(hi), count))


def loglog_interpolate(x: float, xs, ys) -> float:
    """Piecewise-linear interpolation in log-log space, clamped at the ends."""
    lx = math.log(x)
    lxs = np.log(np.asarray(xs, dtype=np.float64))
    lys = np.log(np.asarray(ys, dtype=np.float64))
    order = np.argsort(lxs)
    return float(math.exp(np.interp(lx, lxs[order], lys[order])))


PARETO_FIELDS = (
    "label", "resolution_parameter", "n_runs", "n_capped",
    "iqm_elements", "iqm_squared_error", "iqm_mean_error", "iqm_top_error",
)


def write_pareto_csv(points: list[ParetoPoint], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PARETO_FIELDS)
        for p in points:
            w.writerow([p.label, repr(p.resolution_parameter), p.n_runs, p.n_capped,
                        repr(p.iqm_elements), repr(p.iqm_squared_error),
                        repr(p.iqm_mean_error), repr(p.iqm_top_error)])


def read_pareto_csv(path) -> list[ParetoPoint]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                ParetoPoint(
                    resolution_parameter=float(row["resolution_parameter"]),
                    n_runs=int(row["n_runs"]),
                    n_capped=int(row["n_capped"]),
                    iqm_elements=float(row["iqm_elements"]),
                    iqm_squared_error=float(row["iqm_squared_error"]),
                    iqm_mean_error=float(row["iqm_mean_error"]),
                    iqm_top_error=float(row["iqm_top_error"]),
                    label=row["label"],
                )
            )
    return out


# ---------------------------------------------------------------------------
# SVG rendering

_VIRIDIS = (
    (0.267004, 0.004874, 0.329415),
    (0.282623, 0.140926, 0.457517),
    (0.253935, 0.265254, 0.529983),
    (0.206756, 0.371758, 0.553117),
    (0.163625, 0.471133, 0.558148),
    (0.127568, 0.566949, 0.550556),
    (0.134692, 0.658636, 0.517649),
    (0.266941, 0.748751, 0.440573),
    (0.477504, 0.821444, 0.318195),
    (0.741388, 0.873449, 0.149561),
    (0.993248, 0.906157, 0.143936),
)


def _colormap(t: float) -> str:
    t = min(max(t, 0.0), 1.0)
    pos = t * (len(_VIRIDIS) - 1)
    i = min(int(pos), len(_VIRIDIS) - 2)
    f = pos - i
    rgb = [(1 - f) * a + f * b for a, b in zip(_VIRIDIS[i], _VIRIDIS[i + 1])]
    return "#%02x%02x%02x" % tuple(int(round(255 * c)) for c in rgb)


def render_mesh_svg(mesh: TriMesh, values=None, path=None, width: int = 640) -> bytes:
    """Render a mesh as an SVG, triangles filled by a scalar colormap.

    ``values`` may be per-element or per-vertex (vertex fields are averaged
    per element); identical inputs produce byte-identical files.
    """
    if values is None:
        vals = np.zeros(mesh.n_elements)
    else:
        vals = np.asarray(values, dtype=np.float64)
        if vals.shape == (mesh.n_vertices,):
            vals = vals[mesh.triangles].mean(axis=1)
        if vals.shape != (mesh.n_elements,):
            raise ValueError("values must be per-element or per-vertex")
    vmin, vmax = float(vals.min()), float(vals.max())
    span = vmax - vmin
    norm = (vals - vmin) / span if span > 0 else np.full_like(vals, 0.5)

    xy = mesh.vertices
    x0, y0 = xy.min(axis=0)
    x1, y1 = xy.max(axis=0)
    scale = (width - 20) / max(x1 - x0, y1 - y0, 1e-12)
    height = int(round((y1 - y0) * scale)) + 20

    def sx(x):
        return 10 + (x - x0) * scale

    def sy(y):
        return height - 10 - (y - y0) * scale

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
    ]
    for idx, tri in enumerate(mesh.triangles):
        pts = " ".join(f"{sx(xy[v, 0]):.3f},{sy(xy[v, 1]):.3f}" for v in tri)
        parts.append(
            f'<polygon points="{pts}" fill="{_colormap(float(norm[idx]))}" '
            'stroke="#202020" stroke-width="0.4" />'
        )
    parts.append("</svg>")
    blob = "\n".join(parts).encode("utf8")
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(blob)
    return blob
