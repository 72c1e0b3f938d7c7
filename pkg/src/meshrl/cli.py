"""Command-line interface.

Subcommands: ``gen`` (sample and cache task sets), ``train`` (PPO), ``eval``
(Pareto sweep over penalties), ``baseline`` (heuristic sweeps), ``rollout``
(single deterministic episode with trace and SVGs), ``render`` (mesh file to
SVG). Every command writes its outputs under a run directory together with a
small manifest describing the invocation. A JSON config file passed via
--config overrides flag defaults; explicit flags win over the config file.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from meshrl import baselines, evaluate, tasks, train as train_mod
from meshrl.mesh import load_mesh
from meshrl.policy import load_checkpoint


def _apply_config(ctx: click.Context):
    cfg = ctx.obj.get("config") or {}
    for name, value in cfg.items():
        if name in ctx.params:
            source = ctx.get_parameter_source(name)
            if source == click.core.ParameterSource.DEFAULT:
                ctx.params[name] = value
    return ctx.params


def _write_manifest(out_dir: str, command: str, params: dict, outputs: list[str]):
    os.makedirs(out_dir, exist_ok=True)
    clean = {k: (v if isinstance(v, (int, float, str, bool, type(None), list)) else str(v)) for k, v in params.items()}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump({"command": command, "params": clean, "outputs": outputs}, fh, indent=2, sort_keys=True)


@click.group()
@click.option("--seed", default=0, show_default=True, help="Master seed for all randomness.")
@click.option("--workers", default=1, show_default=True, help="Rollout worker threads.")
@click.option("--config", type=click.Path(exists=True), default=None, help="JSON file overriding flag defaults.")
@click.pass_context
def main(ctx, seed, workers, config):
    cfg = {}
    if config:
        with open(config) as fh:
            cfg = json.load(fh)
    ctx.obj = {"seed": cfg.get("seed", seed), "workers": cfg.get("workers", workers), "config": cfg}


def _load_task_set(manifest_path: str, role: str) -> tuple[list[tasks.TaskInstance], dict]:
    with open(manifest_path) as fh:
        man = json.load(fh)
    cache_dir = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), man["cache_dir"])
    out = []
    for entry in man["roles"][role]:
        spec = tasks.TaskSpec.from_json(json.dumps(entry["spec"]))
        out.append(tasks.instantiate(spec, man["refinement_depth"], cache_dir, man["target_size"]))
    return out, man


@main.command()
@click.option("--kind", type=click.Choice(tasks.TASK_KINDS), required=True)
@click.option("--train-count", default=10, show_default=True)
@click.option("--eval-count", default=10, show_default=True)
@click.option("--refine-depth", "-r", default=4, show_default=True, help="Uniform refinements for the reference mesh.")
@click.option("--target-size", default=tasks.DEFAULT_TARGET_SIZE, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def gen(ctx, kind, train_count, eval_count, refine_depth, target_size, out):
    """Sample task sets and cache their reference solutions."""
    p = _apply_config(ctx)
    seed = ctx.obj["seed"]
    os.makedirs(out, exist_ok=True)
    cache = "tasks"
    roles = {}
    for role, count in (("train", p["train_count"]), ("eval", p["eval_count"])):
        entries = []
        for spec in tasks.make_task_specs(p["kind"], count, seed, role):
            inst = tasks.instantiate(spec, p["refine_depth"], os.path.join(out, cache), p["target_size"])
            h = tasks.content_hash(spec, p["refine_depth"], p["target_size"])
            entries.append(
                {
                    "spec": json.loads(spec.to_json()),
                    "seed": spec.seed,
                    "hash": h,
                    "path": os.path.join(cache, h),
                    "initial_elements": inst.initial_mesh.n_elements,
                    "reference_elements": inst.reference_mesh.n_elements,
                }
            )
            click.echo(f"[gen] {role} seed={spec.seed} elements={inst.initial_mesh.n_elements}")
        roles[role] = entries
    manifest = {
        "kind": p["kind"],
        "master_seed": seed,
        "refinement_depth": p["refine_depth"],
        "target_size": p["target_size"],
        "cache_dir": cache,
        "roles": roles,
    }
    path = os.path.join(out, "tasks.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    _write_manifest(out, "gen", p, [path])
    click.echo(f"[gen] wrote {path}")


@main.command()
@click.option("--task-manifest", required=True, type=click.Path(exists=True))
@click.option("--refine-steps", "-t", default=None, type=int, help="Episode horizon (default: reference depth).")
@click.option("--iterations", default=400, show_default=True)
@click.option("--alpha-min", default=1e-3, show_default=True)
@click.option("--alpha-max", default=1e-1, show_default=True)
@click.option("--reward-variant", type=click.Choice(["max", "volume_scaled"]), default="max", show_default=True)
@click.option("--mapping-variant", type=click.Choice(list(train_mod.MAPPING_VARIANTS)), default="normalized_sum", show_default=True)
@click.option("--return-mix", type=click.Choice(list(train_mod.RETURN_MIXES)), default="half_half", show_default=True)
@click.option("--resume", type=click.Path(exists=True), default=None, help="Checkpoint to resume from.")
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def train(ctx, task_manifest, refine_steps, iterations, alpha_min, alpha_max,
          reward_variant, mapping_variant, return_mix, resume, out):
    """Train a refinement policy with PPO."""
    p = _apply_config(ctx)
    instances, man = _load_task_set(p["task_manifest"], "train")
    horizon = p["refine_steps"] or man["refinement_depth"]
    cfg_kwargs = dict(
        iterations=p["iterations"],
        return_mix=p["return_mix"],
        mapping_variant=p["mapping_variant"],
        reward_variant=p["reward_variant"],
    )
    # remaining PPO knobs have no dedicated flags; a "ppo" section in the
    # config file overrides their defaults
    cfg_kwargs.update(ctx.obj.get("config", {}).get("ppo", {}))
    cfg = train_mod.PpoConfig(**cfg_kwargs)
    _, metrics, final = train_mod.train_loop(
        instances,
        cfg,
        (p["alpha_min"], p["alpha_max"]),
        horizon,
        out,
        seed=ctx.obj["seed"],
        workers=ctx.obj["workers"],
        resume_from=p["resume"],
    )
    _write_manifest(out, "train", p, [metrics, final])
    click.echo(f"[train] final checkpoint: {final}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--task-manifest", required=True, type=click.Path(exists=True))
@click.option("--role", default="eval", show_default=True)
@click.option("--refine-steps", "-t", default=None, type=int)
@click.option("--alpha-min", default=1e-3, show_default=True)
@click.option("--alpha-max", default=1e-1, show_default=True)
@click.option("--alpha-count", default=20, show_default=True)
@click.option("--exclude-capped", is_flag=True, help="Drop cap-terminated rollouts from the IQM.")
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def eval_cmd(ctx, checkpoint, task_manifest, role, refine_steps, alpha_min, alpha_max,
             alpha_count, exclude_capped, out):
    """Pareto sweep of a trained policy over element penalties."""
    p = _apply_config(ctx)
    policy, _ = load_checkpoint(p["checkpoint"])
    instances, man = _load_task_set(p["task_manifest"], p["role"])
    horizon = p["refine_steps"] or man["refinement_depth"]
    grid = evaluate.log_spaced(p["alpha_min"], p["alpha_max"], p["alpha_count"])
    points = evaluate.pareto_sweep(policy, instances, grid, horizon, exclude_capped=p["exclude_capped"])
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "pareto.csv")
    evaluate.write_pareto_csv(points, path)
    _write_manifest(out, "eval", p, [path])
    for pt in points:
        click.echo(f"[eval] alpha={pt.resolution_parameter:.3e} elements={pt.iqm_elements:.0f} sq_err={pt.iqm_squared_error:.3e}")


@main.command()
@click.option("--kind", type=click.Choice(list(baselines.HEURISTIC_KINDS)), required=True)
@click.option("--theta", default=None, type=float, help="Single threshold (otherwise sweep a grid).")
@click.option("--theta-min", default=0.05, show_default=True)
@click.option("--theta-max", default=1.0, show_default=True)
@click.option("--theta-count", default=100, show_default=True)
@click.option("--steps", default=None, type=int, help="Refinement passes (default: reference depth).")
@click.option("--initial-uniform", default=2, show_default=True, help="Uniform passes before the zz estimator.")
@click.option("--task-manifest", required=True, type=click.Path(exists=True))
@click.option("--role", default="eval", show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def baseline(ctx, kind, theta, theta_min, theta_max, theta_count, steps, initial_uniform,
             task_manifest, role, out):
    """Run heuristic baselines over a threshold grid."""
    p = _apply_config(ctx)
    instances, man = _load_task_set(p["task_manifest"], p["role"])
    n_steps = p["steps"] or man["refinement_depth"]
    thetas = [p["theta"]] if p["theta"] is not None else list(evaluate.log_spaced(p["theta_min"], p["theta_max"], p["theta_count"]))
    points = []
    for th in thetas:
        cfg = baselines.HeuristicConfig(kind=p["kind"], theta=float(th), steps=n_steps,
                                        initial_uniform_refinements=p["initial_uniform"])
        metrics, capped = [], 0
        for inst in instances:
            run = baselines.run_heuristic(inst, cfg)
            capped += run.termination == "cap"
            metrics.append(evaluate.mesh_metrics(run.mesh, run.solution, inst))
        points.append(
            evaluate.ParetoPoint(
                resolution_parameter=float(th),
                n_runs=len(metrics),
                n_capped=capped,
                iqm_elements=evaluate.iqm([m.element_count for m in metrics]),
                iqm_squared_error=evaluate.iqm([m.squared_error for m in metrics]),
                iqm_mean_error=evaluate.iqm([m.mean_error for m in metrics]),
                iqm_top_error=evaluate.iqm([m.top_error for m in metrics]),
                label=p["kind"],
            )
        )
        click.echo(f"[baseline] theta={th:.4f} elements={points[-1].iqm_elements:.0f} sq_err={points[-1].iqm_squared_error:.3e}")
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "baseline.csv")
    evaluate.write_pareto_csv(points, path)
    _write_manifest(out, "baseline", p, [path])


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--task-manifest", required=True, type=click.Path(exists=True))
@click.option("--role", default="eval", show_default=True)
@click.option("--task-index", default=0, show_default=True)
@click.option("--alpha", required=True, type=float)
@click.option("--refine-steps", "-t", default=None, type=int)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def rollout(ctx, checkpoint, task_manifest, role, task_index, alpha, refine_steps, out):
    """Single deterministic episode with a per-step trace and SVG snapshots."""
    p = _apply_config(ctx)
    policy, _ = load_checkpoint(p["checkpoint"])
    instances, man = _load_task_set(p["task_manifest"], p["role"])
    task = instances[p["task_index"]]
    horizon = p["refine_steps"] or man["refinement_depth"]
    os.makedirs(out, exist_ok=True)
    trace: list = []
    state = evaluate.policy_rollout(policy, task, p["alpha"], horizon, trace=trace)
    outputs = []
    trace_path = os.path.join(out, "trace.csv")
    with open(trace_path, "w", newline="") as fh:
        import csv as _csv

        w = _csv.writer(fh)
        w.writerow(["t", "elements", "sum_errors", "sum_rewards", "alpha", "termination"])
        for row in trace:
            w.writerow([row["t"], row["elements"], row["sum_errors"], row["sum_rewards"], row["alpha"], row["termination"]])
    outputs.append(trace_path)
    if state.current_solution is not None:
        svg_path = os.path.join(out, "final_mesh.svg")
        evaluate.render_mesh_svg(state.current_mesh, state.current_solution.nodal_values, svg_path)
        err_path = os.path.join(out, "final_errors.svg")
        evaluate.render_mesh_svg(state.current_mesh, state.element_errors, err_path)
        outputs += [svg_path, err_path]
        metrics = evaluate.mesh_metrics(state.current_mesh, state.current_solution, task, pairs=state.pairs)
        click.echo(f"[rollout] elements={metrics.element_count} sq_err={metrics.squared_error:.3e}")
    _write_manifest(out, "rollout", p, outputs)


@main.command()
@click.option("--mesh", "mesh_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def render(mesh_path, out):
    """Render a mesh text file (optionally with a nodal field) to SVG."""
    mesh, field = load_mesh(mesh_path)
    evaluate.render_mesh_svg(mesh, field, out)
    click.echo(f"[render] wrote {out}")


if __name__ == "__main__":
    main()
