import numpy as np
import pytest
import scipy.sparse as sp
import torch

from meshrl import env, rng, train
from meshrl.mesh import AgentMapping
from meshrl.policy import load_checkpoint


def _mapping(parent_of, n, variant="normalized_sum"):
    parent_of = np.asarray(parent_of, dtype=np.int64)
    m = len(parent_of)
    counts = np.bincount(parent_of, minlength=n)
    if variant == "normalized_sum":
        vals = np.full(m, n / m)
    elif variant == "unnormalized_sum":
        vals = np.ones(m)
    elif variant == "normalized_mean":
        vals = (n / m) / counts[parent_of]
    else:
        vals = 1.0 / counts[parent_of]
    mat = sp.csr_matrix((vals, (parent_of, np.arange(m))), shape=(n, m))
    return AgentMapping(mat, parent_of=parent_of, variant=variant)


def _step(rewards, mapping, values=None):
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.zeros_like(rewards) if values is None else np.asarray(values, dtype=np.float64)
    return train.StepRecord(
        graph=None, actions=np.zeros(len(rewards), dtype=bool),
        log_probs=np.zeros(len(rewards)), rewards=rewards, values=values, mapping=mapping,
    )


def _episode(steps):
    return train.EpisodeRecord(steps=steps, alpha=0.01, task_index=0, termination="horizon",
                               final_elements=0, final_error_sum=0.0)


def test_single_step_returns():
    ep = _episode([_step([1.0, 3.0], _mapping([0, 1], 2))])
    local = train.mapped_returns(ep, 1.0, "local_only", "normalized_sum")[0]
    mixed = train.mapped_returns(ep, 1.0, "half_half", "normalized_sum")[0]
    glob = train.mapped_returns(ep, 1.0, "global_only", "normalized_sum")[0]
    assert np.array_equal(local, [1.0, 3.0])
    assert np.array_equal(glob, [2.0, 2.0])
    assert np.array_equal(mixed, [1.5, 2.5])


def test_one_into_four_return_example():
    # one element splits into 4; step-1 rewards (a, b, c, d)
    a, b, c, d = 0.1, 0.2, 0.3, 0.4
    steps = [
        _step([0.5], _mapping([0, 0, 0, 0], 1)),
        _step([a, b, c, d], _mapping([0, 1, 2, 3], 4)),
    ]
    j = train.mapped_returns(_episode(steps), 1.0, "local_only", "normalized_sum")
    assert j[0][0] == pytest.approx(0.5 + 0.25 * (a + b + c + d), abs=1e-15)
    assert np.allclose(j[1], [a, b, c, d])


def test_zero_rewards_zero_returns_all_variants():
    steps = [
        _step([0.0], _mapping([0, 0, 0, 0], 1)),
        _step([0.0] * 4, _mapping([0, 1, 2, 3], 4)),
    ]
    for mix in train.RETURN_MIXES:
        for variant in train.MAPPING_VARIANTS:
            out = train.mapped_returns(_episode(steps), 1.0, mix, variant)
            assert all(np.all(j == 0.0) for j in out)


def _random_episode(tiny_laplace, seed, horizon=3):
    gen = rng.stream(seed, "episode")
    state, obs = env.reset(tiny_laplace, alpha=0.01, horizon=horizon)
    steps = []
    while not state.done:
        acts = gen.random(state.current_mesh.n_elements) < 0.3
        out = env.step(state, acts)
        steps.append(_step(out.rewards, out.mapping, values=gen.normal(size=len(out.rewards))))
    return _episode(steps)


def test_recursion_matches_explicit_composition(tiny_laplace):
    for seed in range(5):
        ep = _random_episode(tiny_laplace, seed)
        for variant in train.MAPPING_VARIANTS:
            gamma = 0.9
            rets = train.mapped_returns(ep, gamma, "local_only", variant)
            horizon = len(ep.steps)
            for t in range(horizon):
                explicit = ep.steps[t].rewards.astype(np.float64).copy()
                acc = None
                for tp in range(t, horizon - 1):
                    mat = train.mapping_matrix(ep.steps[tp].mapping, variant)
                    acc = mat if acc is None else acc @ mat
                    explicit = explicit + gamma ** (tp + 1 - t) * (acc @ ep.steps[tp + 1].rewards)
                assert np.allclose(rets[t], explicit, atol=1e-10), (seed, variant, t)


def test_normalized_sum_preserves_return_mass(tiny_laplace):
    # sum_i J_t = sum r_t + gamma * (N_t / N_{t+1}) * sum J_{t+1}
    ep = _random_episode(tiny_laplace, 42)
    rets = train.mapped_returns(ep, 1.0, "local_only", "normalized_sum")
    for t in range(len(ep.steps) - 1):
        n, m = ep.steps[t].mapping.rows, ep.steps[t].mapping.cols
        expected = ep.steps[t].rewards.sum() + (n / m) * rets[t + 1].sum()
        assert rets[t].sum() == pytest.approx(expected, rel=1e-12)


def test_advantage_default_is_return_minus_value(tiny_laplace):
    ep = _random_episode(tiny_laplace, 7)
    rets = train.mapped_returns(ep, 1.0, "half_half", "normalized_sum")
    advs = train.mapped_td_and_advantage(ep, rets, 1.0, 0.95, "return_minus_value")
    for adv, ret, rec in zip(advs, rets, ep.steps):
        assert np.allclose(adv, ret - rec.values, atol=1e-15)


def test_gae_telescopes_at_lambda_one(tiny_laplace):
    ep = _random_episode(tiny_laplace, 8)
    local = train.mapped_returns(ep, 1.0, "local_only", "normalized_sum")
    gae = train.mapped_td_and_advantage(ep, local, 1.0, 1.0, "gae")
    for adv, ret, rec in zip(gae, local, ep.steps):
        assert np.allclose(adv, ret - rec.values, atol=1e-10)


def test_single_step_td_error():
    ep = _episode([_step([0.3], _mapping([0], 1), values=[0.2])])
    adv = train.mapped_td_and_advantage(ep, [np.array([0.3])], 1.0, 0.95, "gae")
    assert adv[0][0] == pytest.approx(0.1, abs=1e-15)


def test_advantage_normalization():
    steps = [_step(np.linspace(-1, 1, 11) ** 3, _mapping(np.arange(11), 11))]
    cfg = train.PpoConfig(iterations=1)
    transitions = train.prepare_transitions([_episode(steps)], cfg)
    flat = np.concatenate([adv for _, _, adv in transitions])
    assert abs(flat.mean()) <= 1e-6
    assert abs(flat.std() - 1.0) <= 1e-3


def test_clipped_surrogate_values():
    ratio = torch.tensor([1.5, 0.5, 1.5])
    adv = torch.tensor([1.0, 1.0, -2.0])
    out = train.clipped_surrogate(ratio, adv, 0.2)
    assert out[0].item() == pytest.approx(-1.2)  # positive advantage: ratio clipped to 1.2
    assert out[1].item() == pytest.approx(-0.5)  # min picks the unclipped smaller value
    assert out[2].item() == pytest.approx(3.0)  # negative advantage: pessimistic unclipped term


def test_config_validation():
    with pytest.raises(ValueError):
        train.PpoConfig(return_mix="bogus")
    with pytest.raises(ValueError):
        train.PpoConfig(clip_range=1.5)
    with pytest.raises(ValueError):
        train.PpoConfig(mapping_variant="nope")


@pytest.fixture(scope="module")
def tiny_train_tasks():
    from meshrl import tasks

    specs = tasks.make_task_specs("laplace", 2, 99, "train")
    return [tasks.instantiate(s, 2, target_size=0.25) for s in specs]


def test_zero_advantages_leave_policy_tower_unchanged(tiny_train_tasks):
    cfg = train.PpoConfig(iterations=1, transitions_per_iteration=4, epochs=1, minibatch_size=4)
    episodes = train.collect_rollouts(
        _make_policy(tiny_train_tasks[0]), tiny_train_tasks, cfg, (1e-2, 1e-2), 2, seed=1, iteration=0
    )
    for ep in episodes:  # zero all rewards and values -> zero advantages
        for rec in ep.steps:
            rec.rewards[:] = 0.0
            rec.values[:] = 0.0
    policy = _make_policy(tiny_train_tasks[0])
    before_policy = {k: v.clone() for k, v in policy.policy_tower.state_dict().items()}
    before_value = {k: v.clone() for k, v in policy.value_tower.state_dict().items()}
    optimizer = torch.optim.Adam(policy.parameters(), lr=1e-3)
    train.ppo_update(policy, optimizer, episodes, cfg, seed=1, iteration=0)
    after_policy = policy.policy_tower.state_dict()
    after_value = policy.value_tower.state_dict()
    assert all(torch.equal(before_policy[k], after_policy[k]) for k in before_policy)
    assert any(not torch.equal(before_value[k], after_value[k]) for k in before_value)


def _make_policy(task):
    from meshrl.policy import MpnConfig, RefinementPolicy

    dim = train.probe_feature_dim(task, (1e-2, 1e-2), 2)
    return RefinementPolicy(MpnConfig(node_feature_dim=dim), init_generator=torch.Generator().manual_seed(5))


def test_train_loop_smoke_and_determinism(tiny_train_tasks, tmp_path):
    cfg = train.PpoConfig(iterations=2, transitions_per_iteration=12, checkpoint_every=1)
    p1, metrics1, final1 = train.train_loop(tiny_train_tasks, cfg, (1e-3, 1e-1), 2, tmp_path / "a", seed=3)
    p2, metrics2, final2 = train.train_loop(tiny_train_tasks, cfg, (1e-3, 1e-1), 2, tmp_path / "b", seed=3)
    sd1, sd2 = p1.state_dict(), p2.state_dict()
    assert all(torch.equal(sd1[k], sd2[k]) for k in sd1)
    rows = open(metrics1).read().strip().splitlines()
    assert len(rows) == 3  # header + 2 iterations
    assert rows[0].startswith("iteration,")


def test_resume_matches_uninterrupted(tiny_train_tasks, tmp_path):
    full_cfg = train.PpoConfig(iterations=3, transitions_per_iteration=12, checkpoint_every=1)
    half_cfg = train.PpoConfig(iterations=2, transitions_per_iteration=12, checkpoint_every=1)
    p_full, m_full, _ = train.train_loop(tiny_train_tasks, full_cfg, (1e-3, 1e-1), 2, tmp_path / "full", seed=4)
    train.train_loop(tiny_train_tasks, half_cfg, (1e-3, 1e-1), 2, tmp_path / "part", seed=4)
    p_res, m_res, _ = train.train_loop(
        tiny_train_tasks, full_cfg, (1e-3, 1e-1), 2, tmp_path / "part", seed=4,
        resume_from=str(tmp_path / "part" / "checkpoint_final.pt"),
    )
    sd_full, sd_res = p_full.state_dict(), p_res.state_dict()
    assert all(torch.equal(sd_full[k], sd_res[k]) for k in sd_full)
    last_full = open(m_full).read().strip().splitlines()[-1].split(",")
    last_res = open(m_res).read().strip().splitlines()[-1].split(",")
    assert last_full[:7] == last_res[:7]  # identical metrics apart from wall time


def test_workers_do_not_change_rollouts(tiny_train_tasks):
    policy = _make_policy(tiny_train_tasks[0])
    cfg = train.PpoConfig(iterations=1, transitions_per_iteration=8)
    a = train.collect_rollouts(policy, tiny_train_tasks, cfg, (1e-3, 1e-1), 2, seed=6, iteration=0, workers=1)
    b = train.collect_rollouts(policy, tiny_train_tasks, cfg, (1e-3, 1e-1), 2, seed=6, iteration=0, workers=3)
    assert len(a) == len(b)
    for ea, eb in zip(a, b):
        assert ea.alpha == eb.alpha and ea.task_index == eb.task_index
        for ra, rb in zip(ea.steps, eb.steps):
            assert np.array_equal(ra.actions, rb.actions)
            assert np.array_equal(ra.rewards, rb.rewards)
