"""Message-passing policy and value networks over observation graphs.

Both heads share one architecture but no weights: a linear node/edge encoder
into a 64-dimensional latent space, two message-passing steps (edge update
from receiver/sender/edge states, node update from the mean of incoming
updated edges, each followed by a residual connection and layer norm), and a
tanh MLP head producing one scalar per element. During training each
directed edge is independently dropped with probability 0.1, with separate
masks for the two towers, re-drawn every forward pass.

Observations are normalized by running mean/std statistics stored as
buffers, so the normalizer travels with checkpoints.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from meshrl.env import ObservationGraph

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MpnConfig:
    node_feature_dim: int
    edge_feature_dim: int = 1
    latent_dim: int = 64
    message_passing_steps: int = 2
    mlp_hidden_layers: int = 2
    edge_dropout_rate: float = 0.1
    aggregation: str = "mean"

    def __post_init__(self):
        if min(self.node_feature_dim, self.edge_feature_dim, self.latent_dim, self.message_passing_steps) <= 0:
            raise ValueError("all dimensions must be positive")
        if not 0.0 <= self.edge_dropout_rate < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.aggregation != "mean":
            raise ValueError("only mean aggregation is supported")


@dataclass
class GraphTensors:
    node_features: torch.Tensor  # (N, F)
    edge_features: torch.Tensor  # (E, Fe)
    senders: torch.Tensor  # (E,)
    receivers: torch.Tensor  # (E,)
    node_graph: torch.Tensor  # (N,) graph index per node
    n_graphs: int


def graph_to_tensors(graph: ObservationGraph, dtype=torch.float32) -> GraphTensors:
    return collate_graphs([graph], dtype)


def collate_graphs(graphs: list[ObservationGraph], dtype=torch.float32) -> GraphTensors:
    """Pack disjoint graphs into one (indices offset per graph)."""
    feats, efeats, snd, rcv, gid = [], [], [], [], []
    offset = 0
    for i, g in enumerate(graphs):
        feats.append(torch.as_tensor(g.node_features, dtype=dtype))
        efeats.append(torch.as_tensor(g.edge_features, dtype=dtype))
        snd.append(torch.as_tensor(g.edges[0], dtype=torch.int64) + offset)
        rcv.append(torch.as_tensor(g.edges[1], dtype=torch.int64) + offset)
        gid.append(torch.full((g.n_nodes,), i, dtype=torch.int64))
        offset += g.n_nodes
    return GraphTensors(
        node_features=torch.cat(feats),
        edge_features=torch.cat(efeats),
        senders=torch.cat(snd),
        receivers=torch.cat(rcv),
        node_graph=torch.cat(gid),
        n_graphs=len(graphs),
    )


def _mlp(in_dim: int, hidden: int, out_dim: int, n_hidden: int, activation: type) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = in_dim
    for _ in range(n_hidden):
        layers += [nn.Linear(d, hidden), activation()]
        d = hidden
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class MpnTower(nn.Module):
    """Encoder + message-passing core + scalar head (one full network)."""

    def __init__(self, cfg: MpnConfig):
        super().__init__()
        d = cfg.latent_dim
        self.cfg = cfg
        self.node_encoder = nn.Linear(cfg.node_feature_dim, d)
        self.edge_encoder = nn.Linear(cfg.edge_feature_dim, d)
        steps = cfg.message_passing_steps
        self.edge_mlps = nn.ModuleList(
            _mlp(3 * d, d, d, cfg.mlp_hidden_layers, nn.LeakyReLU) for _ in range(steps)
        )
        self.node_mlps = nn.ModuleList(
            _mlp(2 * d, d, d, cfg.mlp_hidden_layers, nn.LeakyReLU) for _ in range(steps)
        )
        self.edge_norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(steps))
        self.node_norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(steps))
        self.head = _mlp(d, d, 1, cfg.mlp_hidden_layers, nn.Tanh)

    def forward(self, g: GraphTensors, edge_keep: torch.Tensor | None = None) -> torch.Tensor:
        h_v = self.node_encoder(g.node_features)
        h_e = self.edge_encoder(g.edge_features)
        n = h_v.shape[0]
        snd, rcv = g.senders, g.receivers
        if edge_keep is not None:
            snd, rcv, h_e = snd[edge_keep], rcv[edge_keep], h_e[edge_keep]
        ones = torch.ones(len(rcv), 1, dtype=h_v.dtype)
        counts = torch.zeros(n, 1, dtype=h_v.dtype).index_add_(0, rcv, ones).clamp(min=1.0)
        for edge_mlp, node_mlp, e_norm, v_norm in zip(self.edge_mlps, self.node_mlps, self.edge_norms, self.node_norms):
            upd_e = edge_mlp(torch.cat([h_v[rcv], h_v[snd], h_e], dim=-1))
            h_e = e_norm(h_e + upd_e)
            agg = torch.zeros(n, h_e.shape[1], dtype=h_v.dtype).index_add_(0, rcv, h_e) / counts
            upd_v = node_mlp(torch.cat([h_v, agg], dim=-1))
            h_v = v_norm(h_v + upd_v)
        return self.head(h_v).squeeze(-1)


class RefinementPolicy(nn.Module):
    """Separate policy and value towers plus the observation normalizer."""

    def __init__(self, cfg: MpnConfig, init_generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.policy_tower = MpnTower(cfg)
        self.value_tower = MpnTower(cfg)
        self.register_buffer("node_mean", torch.zeros(cfg.node_feature_dim, dtype=torch.float64))
        self.register_buffer("node_var", torch.ones(cfg.node_feature_dim, dtype=torch.float64))
        self.register_buffer("node_count", torch.zeros((), dtype=torch.float64))
        self.register_buffer("edge_mean", torch.zeros(cfg.edge_feature_dim, dtype=torch.float64))
        self.register_buffer("edge_var", torch.ones(cfg.edge_feature_dim, dtype=torch.float64))
        self.register_buffer("edge_count", torch.zeros((), dtype=torch.float64))
        self._init_weights(init_generator)

    def _init_weights(self, generator: torch.Generator | None):
        gain = 1.4  # LeakyReLU core layers
        for tower in (self.policy_tower, self.value_tower):
            for module in tower.modules():
                if isinstance(module, nn.Linear):
                    nn.init.orthogonal_(module.weight, gain=gain, generator=generator)
                    nn.init.zeros_(module.bias)
            final = tower.head[-1]
            nn.init.orthogonal_(final.weight, gain=1.0, generator=generator)
            nn.init.zeros_(final.bias)
        # near-uniform initial refine probability with low logit variance
        with torch.no_grad():
            self.policy_tower.head[-1].weight.mul_(0.01)

    # -- observation normalization -------------------------------------------------
    def update_normalizer(self, node_features: np.ndarray, edge_features: np.ndarray):
        """Fold a batch of raw features into the running mean/std (Welford merge)."""
        node = np.asarray(node_features, dtype=np.float64)
        edge = np.asarray(edge_features, dtype=np.float64).reshape(-1, self.cfg.edge_feature_dim)
        for mean_buf, var_buf, count_buf, batch in (
            (self.node_mean, self.node_var, self.node_count, node),
            (self.edge_mean, self.edge_var, self.edge_count, edge),
        ):
            if len(batch) == 0:
                continue
            m = torch.as_tensor(batch.mean(axis=0))
            v = torch.as_tensor(batch.var(axis=0))
            k = float(len(batch))
            n0 = float(count_buf)
            if n0 == 0.0:
                mean_buf.copy_(m)
                var_buf.copy_(v)
            else:
                delta = m - mean_buf
                tot = n0 + k
                new_mean = mean_buf + delta * (k / tot)
                new_var = (var_buf * n0 + v * k + delta**2 * (n0 * k / tot)) / tot
                mean_buf.copy_(new_mean)
                var_buf.copy_(new_var)
            count_buf += k

    def _normalize(self, g: GraphTensors) -> GraphTensors:
        dt = g.node_features.dtype
        nf = (g.node_features - self.node_mean.to(dt)) / torch.sqrt(self.node_var.to(dt) + 1e-8)
        ef = (g.edge_features - self.edge_mean.to(dt)) / torch.sqrt(self.edge_var.to(dt) + 1e-8)
        return GraphTensors(nf, ef, g.senders, g.receivers, g.node_graph, g.n_graphs)

    # -- forward -------------------------------------------------------------------
    def forward(
        self,
        graph: ObservationGraph | GraphTensors,
        train_mode: bool = False,
        dropout_generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Logits and value estimates per element.

        In train mode each directed edge is dropped independently with the
        configured probability; the two towers draw independent masks.
        """
        g = graph if isinstance(graph, GraphTensors) else graph_to_tensors(graph, self._dtype())
        if g.node_features.dtype != self._dtype():
            g = GraphTensors(
                g.node_features.to(self._dtype()), g.edge_features.to(self._dtype()),
                g.senders, g.receivers, g.node_graph, g.n_graphs,
            )
        g = self._normalize(g)
        keep_p, keep_v = None, None
        rate = self.cfg.edge_dropout_rate
        if train_mode and rate > 0.0 and len(g.senders) > 0:
            keep_p = torch.rand(len(g.senders), generator=dropout_generator) >= rate
            keep_v = torch.rand(len(g.senders), generator=dropout_generator) >= rate
        logits = self.policy_tower(g, keep_p)
        values = self.value_tower(g, keep_v)
        return logits, values

    def _dtype(self):
        return self.policy_tower.node_encoder.weight.dtype


def action_log_probs(logits: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """Log-probability of refine/keep decisions under Bernoulli(sigmoid(logit))."""
    return F.logsigmoid(logits) * actions + F.logsigmoid(-logits) * (1.0 - actions)


def sample_actions(logits, gen: np.random.Generator | None, deterministic: bool = False):
    """Draw per-element refinement decisions; returns (actions, log-probs).

    Deterministic mode thresholds at probability 0.5 and rounds ties down to
    no-refine.
    """
    arr = logits.detach().cpu().numpy().astype(np.float64) if isinstance(logits, torch.Tensor) else np.asarray(logits, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("logits must be finite")
    p = 1.0 / (1.0 + np.exp(-arr))
    if deterministic:
        actions = p > 0.5
    else:
        if gen is None:
            raise ValueError("stochastic sampling needs a generator")
        actions = gen.random(len(arr)) < p
    # stable log sigmoid(+-logit)
    logp = np.where(actions, -np.logaddexp(0.0, -arr), -np.logaddexp(0.0, arr))
    return actions, logp


# -- checkpointing -------------------------------------------------------------------


def save_checkpoint(path, policy: RefinementPolicy, extra: dict | None = None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(policy.cfg),
        "state_dict": policy.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[RefinementPolicy, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    policy = RefinementPolicy(MpnConfig(**payload["config"]))
    policy.load_state_dict(payload["state_dict"])
    policy.eval()
    return policy, payload["extra"]


# -- gradient verification ------------------------------------------------------------


def gradient_check(
    policy: RefinementPolicy,
    graph: ObservationGraph,
    n_coordinates: int = 200,
    step: float = 1e-5,
    seed: int = 0,
    parameter_filter=None,
) -> float:
    """Max relative deviation between autograd and central finite differences.

    Runs on a float64 copy in eval mode. The scalar loss is sum(logits) +
    sum(values). Finite differences are evaluated on a random sample of
    parameter coordinates (across every parameter tensor unless filtered).
    """
    ref = copy.deepcopy(policy).double().eval()
    g = graph_to_tensors(graph, torch.float64)

    def loss_fn():
        logits, values = ref(g, train_mode=False)
        return logits.sum() + values.sum()

    loss = loss_fn()
    named = [(n, p) for n, p in ref.named_parameters() if parameter_filter is None or parameter_filter(n)]
    grads = torch.autograd.grad(loss, [p for _, p in named])
    # denominator floor scaled so fp cancellation noise in the difference
    # quotient (eps * |loss| / 2 step) cannot masquerade as a deviation
    noise = np.finfo(np.float64).eps * max(1.0, abs(float(loss.detach()))) / (2.0 * step)
    floor = max(1e-6, 1e5 * noise)

    rng_local = np.random.default_rng(seed)
    sizes = np.array([p.numel() for _, p in named])
    total = int(sizes.sum())
    take = min(n_coordinates, total)
    coords = rng_local.choice(total, size=take, replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    with torch.no_grad():
        for flat_idx in coords:
            t = int(np.searchsorted(bounds, flat_idx, side="right"))
            local = int(flat_idx - (bounds[t - 1] if t else 0))
            param = named[t][1]
            view = param.view(-1)
            orig = view[local].item()
            view[local] = orig + step
            up = loss_fn().item()
            view[local] = orig - step
            down = loss_fn().item()
            view[local] = orig
            fd = (up - down) / (2.0 * step)
            an = grads[t].view(-1)[local].item()
            denom = max(abs(fd), abs(an), floor)
            worst = max(worst, abs(fd - an) / denom)
    return worst
