import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from meshrl.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated tiny task set plus a 2-iteration training run."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    res = runner.invoke(
        main,
        ["--seed", "5", "gen", "--kind", "laplace", "--train-count", "2", "--eval-count", "2",
         "--refine-depth", "2", "--target-size", "0.25", "--out", str(root / "data")],
        catch_exceptions=False,
    )
    assert res.exit_code == 0, res.output
    # PpoConfig knobs without flags flow through the config file's ppo section
    (root / "ppo.json").write_text(
        json.dumps({"iterations": 2, "ppo": {"transitions_per_iteration": 8, "minibatch_size": 8}})
    )
    res = runner.invoke(
        main,
        ["--seed", "5", "--config", str(root / "ppo.json"), "train",
         "--task-manifest", str(root / "data" / "tasks.json"), "--out", str(root / "run")],
        catch_exceptions=False,
    )
    assert res.exit_code == 0, res.output
    return root


def test_gen_manifest(workspace):
    manifest = json.loads((workspace / "data" / "tasks.json").read_text())
    assert manifest["kind"] == "laplace"
    assert len(manifest["roles"]["train"]) == 2
    assert len(manifest["roles"]["eval"]) == 2
    cache = workspace / "data" / "tasks"
    assert {e["hash"] for e in manifest["roles"]["train"]} <= set(os.listdir(cache))
    assert (workspace / "data" / "manifest.json").exists()


def test_train_outputs(workspace):
    assert (workspace / "run" / "checkpoint_final.pt").exists()
    rows = (workspace / "run" / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 3
    run_manifest = json.loads((workspace / "run" / "manifest.json").read_text())
    assert run_manifest["command"] == "train"


def test_eval_command(workspace, tmp_path):
    runner = CliRunner()
    res = runner.invoke(
        main,
        ["eval", "--checkpoint", str(workspace / "run" / "checkpoint_final.pt"),
         "--task-manifest", str(workspace / "data" / "tasks.json"),
         "--alpha-min", "1e-3", "--alpha-max", "1e-1", "--alpha-count", "3",
         "--out", str(tmp_path / "ev")],
        catch_exceptions=False,
    )
    assert res.exit_code == 0, res.output
    csv_text = (tmp_path / "ev" / "pareto.csv").read_text()
    assert csv_text.count("\n") == 4  # header + 3 alphas


def test_baseline_command(workspace, tmp_path):
    runner = CliRunner()
    res = runner.invoke(
        main,
        ["baseline", "--kind", "oracle", "--theta", "0.3",
         "--task-manifest", str(workspace / "data" / "tasks.json"),
         "--out", str(tmp_path / "base")],
        catch_exceptions=False,
    )
    assert res.exit_code == 0, res.output
    assert (tmp_path / "base" / "baseline.csv").exists()


def test_rollout_command(workspace, tmp_path):
    runner = CliRunner()
    res = runner.invoke(
        main,
        ["rollout", "--checkpoint", str(workspace / "run" / "checkpoint_final.pt"),
         "--task-manifest", str(workspace / "data" / "tasks.json"),
         "--alpha", "0.01", "--out", str(tmp_path / "ro")],
        catch_exceptions=False,
    )
    assert res.exit_code == 0, res.output
    assert (tmp_path / "ro" / "trace.csv").exists()
    assert (tmp_path / "ro" / "final_mesh.svg").exists()


def test_render_command(workspace, tmp_path):
    cache = workspace / "data" / "tasks"
    some_task = next(iter(os.listdir(cache)))
    mesh_file = cache / some_task / "initial.txt"
    runner = CliRunner()
    res = runner.invoke(main, ["render", "--mesh", str(mesh_file), "--out", str(tmp_path / "m.svg")],
                        catch_exceptions=False)
    assert res.exit_code == 0, res.output
    assert (tmp_path / "m.svg").read_bytes().startswith(b"<svg")


def test_config_overrides_defaults(tmp_path):
    runner = CliRunner()
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"train_count": 1, "eval_count": 0, "refine_depth": 1, "target_size": 0.4}))
    res = runner.invoke(
        main,
        ["--seed", "1", "--config", str(cfg_path), "gen", "--kind", "poisson", "--out", str(tmp_path / "d")],
        catch_exceptions=False,
    )
    assert res.exit_code == 0, res.output
    manifest = json.loads((tmp_path / "d" / "tasks.json").read_text())
    assert len(manifest["roles"]["train"]) == 1 and len(manifest["roles"]["eval"]) == 0
    assert manifest["refinement_depth"] == 1
    # explicit flag beats the config file
    res = runner.invoke(
        main,
        ["--seed", "1", "--config", str(cfg_path), "gen", "--kind", "poisson",
         "--train-count", "2", "--out", str(tmp_path / "d2")],
        catch_exceptions=False,
    )
    manifest = json.loads((tmp_path / "d2" / "tasks.json").read_text())
    assert len(manifest["roles"]["train"]) == 2
