"""PPO training with reward propagation across splitting elements.

Returns are computed backwards through the per-step responsibility mappings:
an element's return is its own reward plus the mapped returns of the
elements it split into. The optimized target mixes this local return with a
global term (the mean reward summed over time), half and half by default.
Advantages subtract the per-element value estimates from the mixed return; a
mapped-GAE estimator is available behind a config switch.

All randomness is derived from (seed, purpose, iteration) streams, so a run
can be resumed from any checkpoint and reproduce the uninterrupted run
exactly.
"""

from __future__ import annotations

import copy
import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import torch

from meshrl import env, rng
from meshrl.mesh import AgentMapping, MAPPING_VARIANTS
from meshrl.policy import (
    MpnConfig,
    RefinementPolicy,
    action_log_probs,
    collate_graphs,
    load_checkpoint,
    sample_actions,
    save_checkpoint,
)

RETURN_MIXES = ("half_half", "local_only", "global_only")
ADVANTAGE_ESTIMATORS = ("return_minus_value", "gae")


@dataclass
class PpoConfig:
    iterations: int = 400
    transitions_per_iteration: int = 256
    epochs: int = 5
    minibatch_size: int = 32
    learning_rate: float = 3e-4
    clip_range: float = 0.2
    value_loss_coeff: float = 0.5
    grad_norm_clip: float = 0.5
    gae_lambda: float = 0.95
    gamma: float = 1.0
    return_mix: str = "half_half"
    mapping_variant: str = "normalized_sum"
    advantage_estimator: str = "return_minus_value"
    reward_variant: str = "max"
    reward_uses_normalized_phi: bool = False
    element_cap: int = env.DEFAULT_ELEMENT_CAP
    checkpoint_every: int = 25

    def __post_init__(self):
        if min(self.iterations, self.transitions_per_iteration, self.epochs, self.minibatch_size) <= 0:
            raise ValueError("iteration/batch settings must be positive")
        if not (0 < self.clip_range < 1):
            raise ValueError("clip_range must be in (0, 1)")
        if self.return_mix not in RETURN_MIXES:
            raise ValueError(f"unknown return mix {self.return_mix!r}")
        if self.mapping_variant not in MAPPING_VARIANTS:
            raise ValueError(f"unknown mapping variant {self.mapping_variant!r}")
        if self.advantage_estimator not in ADVANTAGE_ESTIMATORS:
            raise ValueError(f"unknown advantage estimator {self.advantage_estimator!r}")
        if self.reward_variant not in env.REWARD_VARIANTS:
            raise ValueError(f"unknown reward variant {self.reward_variant!r}")


@dataclass
class StepRecord:
    graph: env.ObservationGraph
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    mapping: AgentMapping


@dataclass
class EpisodeRecord:
    steps: list[StepRecord]
    alpha: float
    task_index: int
    termination: str
    final_elements: int
    final_error_sum: float

    @property
    def n_transitions(self) -> int:
        return len(self.steps)


def mapping_matrix(mapping: AgentMapping, variant: str) -> sp.csr_matrix:
    """The mapping's matrix under a given normalization variant."""
    if variant == mapping.variant:
        return mapping.matrix
    if mapping.parent_of is None:
        raise ValueError("variant change needs single-step parent structure")
    n, m = mapping.rows, mapping.cols
    counts = np.bincount(mapping.parent_of, minlength=n)
    if variant == "normalized_sum":
        vals = np.full(m, n / m)
    elif variant == "unnormalized_sum":
        vals = np.ones(m)
    elif variant == "normalized_mean":
        vals = (n / m) / counts[mapping.parent_of]
    elif variant == "unnormalized_mean":
        vals = 1.0 / counts[mapping.parent_of]
    else:
        raise ValueError(f"unknown mapping variant {variant!r}")
    return sp.csr_matrix((vals, (mapping.parent_of, np.arange(m))), shape=(n, m))


def mapped_returns(episode: EpisodeRecord, gamma: float, return_mix: str, mapping_variant: str) -> list[np.ndarray]:
    """Per-element return targets J' for every step of one episode.

    Local returns follow the backward recursion J_t = r_t + gamma * phi_t @
    J_{t+1}; the global return accumulates the element-mean reward. The two
    are mixed per ``return_mix``.
    """
    steps = episode.steps
    horizon = len(steps)
    locals_: list[np.ndarray] = [None] * horizon
    j_next: np.ndarray | None = None
    for t in reversed(range(horizon)):
        rec = steps[t]
        j = rec.rewards.astype(np.float64).copy()
        if j_next is not None:
            mat = mapping_matrix(rec.mapping, mapping_variant)
            if mat.shape[1] != len(j_next):
                raise ValueError("mapping shape does not chain with the next step")
            j = j + gamma * (mat @ j_next)
        locals_[t] = j
        j_next = j
    g_next = 0.0
    globals_: list[float] = [0.0] * horizon
    for t in reversed(range(horizon)):
        g_next = float(steps[t].rewards.mean()) + gamma * g_next
        globals_[t] = g_next
    out = []
    for t in range(horizon):
        if return_mix == "local_only":
            out.append(locals_[t])
        elif return_mix == "global_only":
            out.append(np.full_like(locals_[t], globals_[t]))
        else:
            out.append(0.5 * locals_[t] + 0.5 * globals_[t])
    return out


def mapped_td_and_advantage(
    episode: EpisodeRecord,
    returns: list[np.ndarray],
    gamma: float,
    lam: float,
    estimator: str = "return_minus_value",
) -> list[np.ndarray]:
    """Per-element advantages; default is mixed-return minus value."""
    steps = episode.steps
    if estimator == "return_minus_value":
        return [ret - rec.values for ret, rec in zip(returns, steps)]
    horizon = len(steps)
    adv: list[np.ndarray] = [None] * horizon
    a_next: np.ndarray | None = None
    v_next: np.ndarray | None = None
    for t in reversed(range(horizon)):
        rec = steps[t]
        mat = rec.mapping.matrix
        delta = rec.rewards.astype(np.float64).copy()
        if v_next is not None:
            delta += gamma * (mat @ v_next)
        delta -= rec.values
        a = delta if a_next is None else delta + gamma * lam * (mat @ a_next)
        adv[t] = a
        a_next = a
        v_next = rec.values
    return adv


# ---------------------------------------------------------------------------
# rollout collection


def _episode_job(policy, tasks, cfg, alpha_range, horizon, seed, iteration, ep_index):
    task_gen = rng.stream(seed, "rollout-task", iteration, ep_index)
    task_index = int(task_gen.integers(len(tasks)))
    alpha = env.sample_alpha(alpha_range, rng.stream(seed, "rollout-alpha", iteration, ep_index))
    act_gen = rng.stream(seed, "rollout-actions", iteration, ep_index)
    task = tasks[task_index]
    state, obs = env.reset(
        task,
        alpha=alpha,
        horizon=horizon,
        element_cap=cfg.element_cap,
        reward_variant=cfg.reward_variant,
        reward_uses_normalized_phi=cfg.reward_uses_normalized_phi,
    )
    steps: list[StepRecord] = []
    while not state.done:
        with torch.no_grad():
            logits, values = policy(obs, train_mode=False)
        actions, logp = sample_actions(logits, act_gen)
        outcome = env.step(state, actions)
        steps.append(
            StepRecord(
                graph=obs,
                actions=actions,
                log_probs=logp,
                rewards=outcome.rewards.astype(np.float64),
                values=values.detach().cpu().numpy().astype(np.float64),
                mapping=outcome.mapping,
            )
        )
        obs = outcome.next_observation
    final_err = float(state.element_errors.sum()) if state.element_errors is not None else float("nan")
    return EpisodeRecord(
        steps=steps,
        alpha=alpha,
        task_index=task_index,
        termination=state.termination or "",
        final_elements=state.current_mesh.n_elements,
        final_error_sum=final_err,
    )


def collect_rollouts(policy, tasks, cfg: PpoConfig, alpha_range, horizon, seed, iteration, workers: int = 1):
    """Run whole episodes until at least transitions_per_iteration steps.

    Episode randomness is keyed by (seed, iteration, episode index), so the
    buffer is identical for any worker count.
    """
    policy.eval()
    episodes: list[EpisodeRecord] = []
    total = 0
    next_index = 0
    while total < cfg.transitions_per_iteration:
        chunk = max(1, workers)
        indices = list(range(next_index, next_index + chunk))
        next_index += chunk
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                batch = list(
                    pool.map(
                        lambda i: _episode_job(policy, tasks, cfg, alpha_range, horizon, seed, iteration, i),
                        indices,
                    )
                )
        else:
            batch = [_episode_job(policy, tasks, cfg, alpha_range, horizon, seed, iteration, i) for i in indices]
        for ep in batch:
            episodes.append(ep)
            total += ep.n_transitions
    # trim to the minimal prefix reaching the target, so the buffer does not
    # depend on the worker chunking
    total = 0
    for k, ep in enumerate(episodes):
        total += ep.n_transitions
        if total >= cfg.transitions_per_iteration:
            return episodes[: k + 1]
    return episodes


# ---------------------------------------------------------------------------
# PPO update


def prepare_transitions(episodes: list[EpisodeRecord], cfg: PpoConfig) -> list[tuple]:
    """Flatten episodes into (record, return target, normalized advantage)
    triples; advantages are normalized to zero mean and unit std over the
    whole batch."""
    transitions = []
    all_adv = []
    for ep in episodes:
        rets = mapped_returns(ep, cfg.gamma, cfg.return_mix, cfg.mapping_variant)
        advs = mapped_td_and_advantage(ep, rets, cfg.gamma, cfg.gae_lambda, cfg.advantage_estimator)
        for rec, ret, adv in zip(ep.steps, rets, advs):
            transitions.append((rec, ret, adv))
            all_adv.append(adv)
    flat = np.concatenate(all_adv)
    mean, std = flat.mean(), flat.std()
    scale = max(float(std), 1e-8)
    return [(rec, ret, (adv - mean) / scale) for rec, ret, adv in transitions]


def clipped_surrogate(ratio: torch.Tensor, advantage: torch.Tensor, clip_range: float) -> torch.Tensor:
    clipped = torch.clamp(ratio, 1.0 - clip_range, 1.0 + clip_range)
    return -torch.min(ratio * advantage, clipped * advantage)


#: backward passes are chunked so at most this many nodes participate in one
#: autograd graph; keeps peak memory bounded on large observation graphs
BACKWARD_NODE_BUDGET = 30_000


def _node_chunks(batch, budget):
    chunks, current, nodes = [], [], 0
    for item in batch:
        n = item[0].graph.n_nodes
        if current and nodes + n > budget:
            chunks.append(current)
            current, nodes = [], 0
        current.append(item)
        nodes += n
    if current:
        chunks.append(current)
    return chunks


def ppo_update(policy, optimizer, episodes: list[EpisodeRecord], cfg: PpoConfig, seed, iteration):
    """One PPO optimization phase over a collected buffer.

    Per-agent clipped surrogate and clipped value losses are averaged within
    each graph and then across the minibatch. Minibatches exceeding the
    node budget are processed as accumulated-gradient chunks (same loss).
    Non-finite losses abort the iteration and restore the previous params.
    """
    transitions = prepare_transitions(episodes, cfg)

    snapshot = copy.deepcopy(policy.state_dict())
    opt_snapshot = copy.deepcopy(optimizer.state_dict())
    shuffle_gen = rng.stream(seed, "ppo-shuffle", iteration)
    dropout_gen = torch.Generator().manual_seed(rng.torch_seed(seed, "ppo-dropout", iteration))
    policy.train()
    diags = {"policy_loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0, "aborted": False, "updates": 0}
    dtype = torch.float32
    for _ in range(cfg.epochs):
        order = shuffle_gen.permutation(len(transitions))
        for lo in range(0, len(order), cfg.minibatch_size):
            batch = [transitions[i] for i in order[lo : lo + cfg.minibatch_size]]
            n_batch_graphs = len(batch)
            optimizer.zero_grad()
            mb_pol, mb_val = 0.0, 0.0
            clip_sum, clip_n = 0.0, 0
            finite = True
            for chunk in _node_chunks(batch, BACKWARD_NODE_BUDGET):
                g = collate_graphs([rec.graph for rec, _, _ in chunk], dtype)
                actions = torch.as_tensor(np.concatenate([rec.actions for rec, _, _ in chunk]).astype(np.float32))
                logp_old = torch.as_tensor(np.concatenate([rec.log_probs for rec, _, _ in chunk]), dtype=dtype)
                v_old = torch.as_tensor(np.concatenate([rec.values for rec, _, _ in chunk]), dtype=dtype)
                target = torch.as_tensor(np.concatenate([ret for _, ret, _ in chunk]), dtype=dtype)
                adv = torch.as_tensor(np.concatenate([adv for _, _, adv in chunk]), dtype=dtype)

                logits, values = policy(g, train_mode=True, dropout_generator=dropout_gen)
                logp_new = action_log_probs(logits, actions)
                ratio = torch.exp(logp_new - logp_old)
                surrogate = clipped_surrogate(ratio, adv, cfg.clip_range)

                v_clipped = v_old + torch.clamp(values - v_old, -cfg.clip_range, cfg.clip_range)
                v_loss = torch.max((values - target) ** 2, (v_clipped - target) ** 2)

                # average per graph, then across the whole minibatch, so
                # element count does not weight graphs
                node_graph = g.node_graph
                denom = torch.zeros(g.n_graphs, dtype=dtype).index_add_(
                    0, node_graph, torch.ones(len(node_graph), dtype=dtype)
                )
                pol_loss = (torch.zeros(g.n_graphs, dtype=dtype).index_add_(0, node_graph, surrogate) / denom).sum()
                val_loss = (torch.zeros(g.n_graphs, dtype=dtype).index_add_(0, node_graph, v_loss) / denom).sum()
                loss = (pol_loss + cfg.value_loss_coeff * val_loss) / n_batch_graphs

                if not torch.isfinite(loss):
                    finite = False
                    break
                loss.backward()
                mb_pol += float(pol_loss.detach()) / n_batch_graphs
                mb_val += float(val_loss.detach()) / n_batch_graphs
                clip_sum += float(((ratio - 1.0).abs() > cfg.clip_range).float().sum())
                clip_n += len(ratio)

            if not finite:
                policy.load_state_dict(snapshot)
                optimizer.load_state_dict(opt_snapshot)
                diags["aborted"] = True
                return diags
            torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.grad_norm_clip)
            optimizer.step()
            diags["policy_loss"] += mb_pol
            diags["value_loss"] += mb_val
            diags["clip_fraction"] += clip_sum / max(clip_n, 1)
            diags["updates"] += 1
    for k in ("policy_loss", "value_loss", "clip_fraction"):
        diags[k] /= max(diags["updates"], 1)
    return diags


# ---------------------------------------------------------------------------
# full training loop

METRICS_FIELDS = (
    "iteration", "episodes", "transitions", "mean_return", "mean_elements",
    "mean_error", "cap_episodes", "policy_loss", "value_loss", "clip_fraction",
    "aborted", "seconds",
)


def probe_feature_dim(task, alpha_range, horizon) -> int:
    alpha = float(np.sqrt(alpha_range[0] * alpha_range[1]))
    _, obs = env.reset(task, alpha=alpha, horizon=horizon)
    return obs.node_features.shape[1]


def train_loop(
    tasks: list,
    cfg: PpoConfig,
    alpha_range,
    horizon: int,
    out_dir: str,
    seed: int = 0,
    workers: int = 1,
    resume_from: str | None = None,
):
    """Alternate rollout collection and PPO updates; checkpoint + metrics CSV.

    Returns (policy, metrics path, final checkpoint path).
    """
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    start_iteration = 0
    if resume_from is not None:
        policy, extra = load_checkpoint(resume_from)
        optimizer = torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate)
        optimizer.load_state_dict(extra["optimizer"])
        start_iteration = extra["iteration"] + 1
    else:
        dim = probe_feature_dim(tasks[0], alpha_range, horizon)
        mpn_cfg = MpnConfig(node_feature_dim=dim)
        init_gen = torch.Generator().manual_seed(rng.torch_seed(seed, "init"))
        policy = RefinementPolicy(mpn_cfg, init_generator=init_gen)
        optimizer = torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate)
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_FIELDS)

    final_path = os.path.join(out_dir, "checkpoint_final.pt")
    for iteration in range(start_iteration, cfg.iterations):
        t0 = time.time()
        episodes = collect_rollouts(policy, tasks, cfg, alpha_range, horizon, seed, iteration, workers)
        policy.update_normalizer(
            np.concatenate([rec.graph.node_features for ep in episodes for rec in ep.steps]),
            np.concatenate([rec.graph.edge_features for ep in episodes for rec in ep.steps]),
        )
        diags = ppo_update(policy, optimizer, episodes, cfg, seed, iteration)

        returns = [sum(float(rec.rewards.mean()) for rec in ep.steps) for ep in episodes]
        errors = [ep.final_error_sum for ep in episodes if np.isfinite(ep.final_error_sum)]
        row = {
            "iteration": iteration,
            "episodes": len(episodes),
            "transitions": sum(ep.n_transitions for ep in episodes),
            "mean_return": float(np.mean(returns)),
            "mean_elements": float(np.mean([ep.final_elements for ep in episodes])),
            "mean_error": float(np.mean(errors)) if errors else float("nan"),
            "cap_episodes": sum(1 for ep in episodes if ep.termination == "cap"),
            "policy_loss": diags["policy_loss"],
            "value_loss": diags["value_loss"],
            "clip_fraction": diags["clip_fraction"],
            "aborted": int(diags["aborted"]),
            "seconds": round(time.time() - t0, 3),
        }
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh).writerow([row[k] for k in METRICS_FIELDS])

        extra = {"iteration": iteration, "optimizer": optimizer.state_dict(), "ppo_config": asdict(cfg)}
        if (iteration + 1) % cfg.checkpoint_every == 0 or iteration == cfg.iterations - 1:
            save_checkpoint(os.path.join(out_dir, f"checkpoint_{iteration:04d}.pt"), policy, extra)
        save_checkpoint(final_path, policy, extra)
    policy.eval()
    return policy, metrics_path, final_path
