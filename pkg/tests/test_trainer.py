import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acdzero import autograd as ag
from acdzero.autograd import ContractError, Tape
from acdzero.mcts import SearchConfig
from acdzero.model import ModelConfig, embed_actions, policy_log_probs, represent
from acdzero.params import ParamStore
from acdzero.sim import SimConfig
from acdzero.trainer import (
    SearchCounter, TrainConfig, TrainingAborted, build_samples, collect_rollouts,
    compute_advantages, compute_losses, distill_loss, episode_seed, group_samples,
    initial_stores, load_stores, make_loss_batch, mean_kl, model_loss, optimize, ppo_loss,
    save_stores, total_loss, train,
)

from distill import fit_distill, teacher_batch

TINY = TrainConfig(
    episodes=4, workers=2, minibatch=32, epochs=1, checkpoint_every=1,
    sim=SimConfig(horizon=8, min_hosts=2, max_hosts=4, max_services=2),
    search=SearchConfig(num_simulations=4),
    model=ModelConfig(hidden=8, latent=8, action_dim=4),
)


def _rollouts(cfg=TINY, seed=0):
    stores = initial_stores(cfg)
    seeds = [episode_seed(seed, i) for i in range(cfg.workers)]
    rngs = [np.random.default_rng([seed, i]) for i in range(cfg.workers)]
    trajs, _ = collect_rollouts(stores, cfg, seeds, rngs)
    return stores, trajs


@pytest.fixture(scope="module")
def rollout():
    return _rollouts()


# ---------------------------------------------------------------- advantages

def test_gae_lambda_zero_is_td_error():
    r, v = [1.0, 0.0, 2.0], [0.5, 0.2, 0.1]
    adv, target = compute_advantages(r, v, 0.3, gamma=0.9, lam=0.0)
    expect = [1.0 + 0.9 * 0.2 - 0.5, 0.0 + 0.9 * 0.1 - 0.2, 2.0 + 0.9 * 0.3 - 0.1]
    np.testing.assert_allclose(adv, expect, atol=1e-15)
    np.testing.assert_allclose(target, np.array(expect) + v, atol=1e-15)


def test_gae_lambda_one_is_monte_carlo():
    r, v = [1.0, -1.0, 0.5], [0.3, -0.2, 0.4]
    adv, target = compute_advantages(r, v, 0.0, gamma=0.99, lam=1.0)
    returns = [1.0 - 0.99 + 0.99 ** 2 * 0.5, -1.0 + 0.99 * 0.5, 0.5]
    np.testing.assert_allclose(target, returns, atol=1e-14)
    np.testing.assert_allclose(adv, np.array(returns) - v, atol=1e-14)


def test_gae_zero_rewards_and_values():
    adv, target = compute_advantages(np.zeros(5), np.zeros(5), 0.0, 0.99, 0.95)
    assert not adv.any() and not target.any()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12), st.floats(0.5, 1.0), st.floats(0.0, 1.0))
def test_gae_recursion_property(rewards, gamma, lam):
    rng = np.random.default_rng(len(rewards))
    values = rng.normal(size=len(rewards))
    adv, target = compute_advantages(rewards, values, 0.0, gamma, lam)
    v = np.append(values, 0.0)
    deltas = np.asarray(rewards) + gamma * v[1:] - v[:-1]
    for t in range(len(rewards)):
        expect = sum((gamma * lam) ** (j - t) * deltas[j] for j in range(t, len(rewards)))
        assert abs(adv[t] - expect) < 1e-9
    np.testing.assert_allclose(target - adv, values, atol=1e-12)


# ---------------------------------------------------------------- loss formulas

def test_ppo_clip_cases():
    A = 2.0
    loss = ppo_loss(np.array([math.log(1.5)]), np.array([0.0]), np.array([A]), 0.2)
    assert float(loss) == pytest.approx(-1.2 * A, abs=1e-12)
    A = -3.0
    loss = ppo_loss(np.array([math.log(0.5)]), np.array([0.0]), np.array([A]), 0.2)
    assert float(loss) == pytest.approx(-0.8 * A, abs=1e-12)
    # inside the trust region the ratio passes through
    loss = ppo_loss(np.array([math.log(1.1)]), np.array([0.0]), np.array([1.0]), 0.2)
    assert float(loss) == pytest.approx(-1.1, abs=1e-12)


def test_kl_example_is_ln2():
    logp = np.log([0.5, 0.5])
    kl = distill_loss(logp, np.array([1.0, 0.0]), np.array([True, True]), 1)
    assert abs(float(kl) - math.log(2)) < 1e-12


def test_kl_zero_on_match_and_illegal_mass_rejected():
    p = np.array([0.2, 0.3, 0.5])
    assert abs(float(distill_loss(np.log(p), p, np.ones(3, bool), 1))) < 1e-15
    with pytest.raises(ContractError):
        distill_loss(np.log(p), p, np.array([True, False, True]), 1)


def test_model_loss_scalar_oracle():
    rewards = [np.array([1.0, 2.0])]
    values = [np.array([0.0, 1.0]), np.array([0.5, 0.5])]
    rt = np.array([[0.0], [2.0]])
    vt = np.array([[1.0, 0.0], [1.0, 1.5]])
    w = np.array([1.0, 1.0])
    expect = (1.0 + 0.0) / 2 + (1.0 + 0.0) / 2 + (0.25 + 1.0) / 2
    assert float(model_loss(rewards, values, rt, vt, w)) == pytest.approx(expect, abs=1e-15)
    # zero weight drops a sample
    w = np.array([1.0, 0.0])
    assert float(model_loss(rewards, values, rt, vt, w)) == pytest.approx(1.0 + 1.0 + 0.25)


def test_total_loss_arithmetic():
    comps = {"ppo": 1.0, "distill": 0.4, "model": 0.6}
    assert float(total_loss(comps, TINY)) == pytest.approx(1.5, abs=1e-15)
    assert float(total_loss(comps, replace(TINY, lambda_pi=0.0, lambda_v=0.0))) == 1.0


def test_model_loss_zero_for_perfect_heads():
    r = [np.array([0.3, -1.0])] * 2
    v = [np.array([0.5, 0.1])] * 3
    rt = np.stack([r[0], r[0]], axis=1)
    vt = np.stack([v[0]] * 3, axis=1)
    assert float(model_loss(r, v, rt, vt, np.ones(2))) == 0.0


def _batch(trajs, cfg=TINY, n=24):
    samples = build_samples(trajs, cfg)
    return make_loss_batch(samples[:n], True, (0.0, 1.0))


def test_total_loss_decomposition(rollout):
    stores, trajs = rollout
    cfg = replace(TINY, lambda_pi=0.5, lambda_v=0.5)
    comps = compute_losses(stores[0].arrays(), _batch(trajs), cfg)
    total = float(comps["ppo"]) + 0.5 * float(comps["distill"]) + 0.5 * float(comps["model"])
    assert abs(float(comps["total"]) - total) < 1e-12


def test_total_gradient_is_weighted_sum(rollout):
    stores, trajs = rollout
    batch = _batch(trajs)
    cfg = replace(TINY, lambda_pi=0.5, lambda_v=0.5)
    grads = {}
    for name in ("ppo", "distill", "model", "total"):
        store = stores[0].snapshot()
        T = store.tensors()
        with Tape() as tape:
            comps = compute_losses(T, batch, cfg)
        store.zero_grad()
        ag.backward(comps[name], tape)
        grads[name] = {k: t.grad.copy() for k, t in store.items()}
    for k in grads["total"]:
        combo = grads["ppo"][k] + 0.5 * grads["distill"][k] + 0.5 * grads["model"][k]
        np.testing.assert_allclose(grads["total"][k], combo, atol=1e-10)


# ---------------------------------------------------------------- rollouts

def test_trajectories_are_complete(rollout):
    _, trajs = rollout
    assert len(trajs) == TINY.workers * 5
    for tr in trajs:
        assert len(tr) == TINY.sim.horizon
        for pi, cat in zip(tr.pi_mcts, tr.catalogs):
            assert abs(pi.sum() - 1.0) < 1e-12 and np.all(pi[~cat.legal] == 0)


def test_logp_old_matches_snapshot_policy(rollout):
    stores, trajs = rollout
    samples = build_samples(trajs, TINY)[:30]
    batch = make_loss_batch(samples)
    P = stores[0].arrays()
    latent, host, subnet = represent(P, batch.graphs)
    logp = policy_log_probs(P, latent, embed_actions(P, batch.actions, host, subnet), batch.actions)
    np.testing.assert_allclose(logp[batch.taken], batch.logp_old, atol=1e-10)
    # ratio 1 at the snapshot: the surrogate is minus the mean advantage
    loss = ppo_loss(logp[batch.taken], batch.logp_old, batch.advantages, 0.2)
    assert float(loss) == pytest.approx(-batch.advantages.mean(), abs=1e-10)


def test_only_step_t_graph_is_read(rollout):
    # the unrolled model loss never compares latents with later observations
    stores, trajs = rollout
    sample = build_samples(trajs[:1], TINY)[0]
    before = compute_losses(stores[0].arrays(), make_loss_batch([sample]), TINY)
    tr = sample.traj
    saved = list(tr.graphs)
    tr.graphs[1:] = [tr.graphs[-1]] * (len(tr.graphs) - 1)
    try:
        after = compute_losses(stores[0].arrays(), make_loss_batch([sample]), TINY)
    finally:
        tr.graphs[:] = saved
    assert float(after["total"]) == float(before["total"])


def test_padding_after_episode_end(rollout):
    _, trajs = rollout
    samples = build_samples(trajs[:1], TINY)
    last = samples[-1]
    # the first unrolled step is the real last action; everything after is absorbing
    assert last.unroll_actions[0] == last.traj.actions[-1]
    assert np.all(last.reward_targets[1:] == 0) and np.all(last.value_targets[1:] == 0)
    assert np.all(last.unroll_actions[1:] == 0)


def test_short_trajectory_warns(rollout):
    _, trajs = rollout
    tr = trajs[0]
    short = replace(tr, graphs=tr.graphs[:2], catalogs=tr.catalogs[:2], actions=tr.actions[:2],
                    rewards=tr.rewards[:2], pi_mcts=tr.pi_mcts[:2], root_values=tr.root_values[:2],
                    logp_old=tr.logp_old[:2], values=tr.values[:2])
    with pytest.warns(UserWarning):
        samples = build_samples([short], TINY)
    assert all(s.model_weight == 0 for s in samples)


def test_no_search_never_searches():
    cfg = replace(TINY, use_search=False, behavior="actor")
    stores = initial_stores(cfg)
    counter = SearchCounter()
    trajs, _ = collect_rollouts(stores, cfg, [1, 2], [np.random.default_rng(i) for i in range(2)],
                                counter)
    assert counter.n == 0 and all(p is None for tr in trajs for p in tr.pi_mcts)
    comps = compute_losses(stores[0].arrays(), _batch(trajs, cfg), cfg)
    assert comps["distill"] == 0.0


# ---------------------------------------------------------------- optimisation

def test_distillation_contracts():
    cfg = replace(TINY, workers=2, sim=replace(TINY.sim, horizon=10),
                  search=SearchConfig(num_simulations=16), model=ModelConfig(32, 32, 16))
    batch = teacher_batch(cfg, seed=0, stride=5)
    before, after = fit_distill(initial_stores(cfg)[0], batch, steps=30)
    assert after < 0.5 * before


def test_descent_step_lowers_loss(rollout):
    stores, trajs = rollout
    batch = _batch(trajs)
    store = stores[0].snapshot()
    T = store.tensors()
    with Tape() as tape:
        comps = compute_losses(T, batch, TINY)
    store.zero_grad()
    ag.backward(comps["total"], tape)
    for _, t in store.items():
        t.data -= 1e-4 * t.grad
    after = compute_losses(store.arrays(), batch, TINY)
    assert float(after["total"]) < float(ag._value(comps["total"]))


def test_nan_loss_aborts(rollout):
    stores, trajs = rollout
    store = stores[0].snapshot()
    store["value.W2"].data[0] = np.nan
    samples = build_samples(trajs, TINY)
    with pytest.raises(TrainingAborted):
        optimize([store], group_samples(samples, True), TINY, np.random.default_rng(0))


def test_per_agent_stores_round_trip(tmp_path):
    cfg = replace(TINY, shared_weights=False)
    stores = initial_stores(cfg)
    assert len(stores) == 5
    save_stores(stores, tmp_path / "x.ckpt")
    back = load_stores(tmp_path / "x.ckpt")
    for a, b in zip(stores, back):
        for name, t in a.items():
            np.testing.assert_array_equal(t.data, b[name].data)


# ---------------------------------------------------------------- train loop

def test_zero_episodes_writes_initial_checkpoint(tmp_path):
    res = train(replace(TINY, episodes=0), tmp_path)
    assert [p.name for p in res.checkpoints] == ["checkpoint_0000.ckpt"]
    assert (tmp_path / "metrics.csv").read_text().count("\n") == 1
    loaded = ParamStore.load(tmp_path / "checkpoint_0000.ckpt")
    for name, t in initial_stores(TINY)[0].items():
        np.testing.assert_array_equal(loaded[name].data, t.data)


def test_training_is_deterministic(tmp_path):
    a = train(TINY, tmp_path / "a")
    b = train(TINY, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert len(a.metrics) == 2 and a.searches == 4 * 5 * TINY.sim.horizon


def test_config_validation():
    with pytest.raises(ValueError):
        replace(TINY, behavior="mcts", use_search=False).validate()
    with pytest.raises(ValueError):
        replace(TINY, clip_eps=1.5).validate()
