import json
from fractions import Fraction

import numpy as np
import pytest

from acdzero.autograd import EmptySupportError
from acdzero.mcts import (
    MinMaxStats, SearchConfig, SearchNode, add_root_noise, backup, exploration_constant,
    extract_policy, run_search, run_search_batch, select_child, write_trace,
)
from acdzero.model import InferenceModel, ModelConfig, init_params

from graphs import sample_graphs
from toymdp import OracleModel, ToyMDP

CFG = SearchConfig()


def _node(prior, N=None, Q=None, legal=None):
    prior = np.asarray(prior, dtype=float)
    node = SearchNode(None, prior, np.ones(len(prior), bool) if legal is None else legal)
    if N is not None:
        node.N[:] = N
    if Q is not None:
        node.Q[:] = Q
    return node


def _random_model(seed, scale=0.1):
    store = init_params(ModelConfig(), seed)
    rng = np.random.default_rng(seed)
    for _, t in store.items():
        t.data[...] = rng.normal(0.0, scale, t.shape)
    return InferenceModel(store)


# ---------------------------------------------------------------- selection

def test_select_prior_decides_at_zero_visits():
    assert select_child(_node([0.8, 0.2]), CFG) == 0
    assert select_child(_node([0.2, 0.8]), CFG) == 1


def test_select_exploration_bonus():
    assert select_child(_node([0.5, 0.5], N=[5, 1], Q=[0.3, 0.3]), CFG) == 1


def test_select_tie_breaks_low():
    assert select_child(_node([0.25] * 4), CFG) == 0
    assert select_child(_node([0.5, 0.5], N=[2, 2], Q=[1.0, 1.0]), CFG) == 0


def test_select_skips_illegal():
    node = _node([0.0, 0.5, 0.5], legal=np.array([False, True, True]))
    assert select_child(node, CFG) == 1


def test_select_uses_normalized_q():
    stats = MinMaxStats()
    for q in (-100.0, -10.0):
        stats.update(q)
    node = _node([0.5, 0.5], N=[10, 10], Q=[-100.0, -10.0])
    assert select_child(node, CFG, stats) == 1


def test_dynamic_c1_schedule():
    assert exploration_constant(0, CFG) == pytest.approx(1.25 + np.log(19653 / 19652))
    assert exploration_constant(19652, CFG) == pytest.approx(1.25 + np.log((2 * 19652 + 1) / 19652))
    fixed = SearchConfig(dynamic_c1=False)
    assert exploration_constant(10 ** 6, fixed) == 1.25


# ---------------------------------------------------------------- backup

def test_backup_first_visit():
    node = _node([1.0])
    backup([(node, 0)], -3.0, SearchConfig(discount=1.0))
    assert node.Q[0] == -3.0 and node.N[0] == 1


def test_backup_running_mean():
    node = _node([1.0])
    backup([(node, 0)], 2.0, SearchConfig(discount=1.0))
    backup([(node, 0)], 4.0, SearchConfig(discount=1.0))
    assert node.Q[0] == 3.0 and node.N[0] == 2


def test_backup_depth_two_return():
    root, child = _node([1.0]), _node([1.0])
    root.R[0], child.R[0] = 1.0, 0.5
    returns = backup([(root, 0), (child, 0)], 2.0, CFG)
    assert returns[0] == pytest.approx(1 + 0.99 * 0.5 + 0.99 ** 2 * 2, abs=1e-12)
    assert returns[0] == pytest.approx(3.4552, abs=1e-12)
    assert returns[1] == pytest.approx(0.5 + 0.99 * 2, abs=1e-12)
    with pytest.raises(ValueError):
        backup([], 0.0, CFG)


# ---------------------------------------------------------------- noise and policy

def test_noise_disabled_keeps_priors():
    node = _node([0.5, 0.3, 0.2])
    add_root_noise(node, SearchConfig(noise_fraction=0.0), np.random.default_rng(0))
    np.testing.assert_array_equal(node.prior, [0.5, 0.3, 0.2])


def test_noise_mixing_matches_hand_computation():
    legal = np.array([True, False, True, True])
    node = _node([0.5, 0.0, 0.3, 0.2], legal=legal)
    add_root_noise(node, CFG, np.random.default_rng(7))
    eta = np.random.default_rng(7).dirichlet([0.3, 0.3, 0.3])
    expect = np.array([0.75 * 0.5 + 0.25 * eta[0], 0.0, 0.75 * 0.3 + 0.25 * eta[1],
                       0.75 * 0.2 + 0.25 * eta[2]])
    np.testing.assert_allclose(node.prior, expect, atol=1e-15)
    assert abs(node.prior.sum() - 1.0) < 1e-12


def test_extract_policy_examples():
    np.testing.assert_allclose(extract_policy([3, 1], 1.0), [0.75, 0.25])
    np.testing.assert_allclose(extract_policy([3, 1], 0.1), [3 ** 10 / (3 ** 10 + 1), 1 / (3 ** 10 + 1)])
    np.testing.assert_allclose(extract_policy([4, 4], 0.1), [0.5, 0.5])
    np.testing.assert_array_equal(extract_policy([1, 3, 3], 0), [0, 1, 0])
    with pytest.raises(ValueError):
        extract_policy([0, 0], 1.0)


# ---------------------------------------------------------------- full searches

def test_single_simulation_is_one_hot():
    model = OracleModel(ToyMDP(0, n=3))
    res = run_search(None, model, None, SearchConfig(num_simulations=1), mode="eval")
    np.testing.assert_array_equal(res.policy, [1.0, 0.0, 0.0])


def test_eval_mode_deterministic():
    model = _random_model(1)
    g, cat = sample_graphs(0)[0]
    a = run_search(g, model, cat, CFG, mode="eval", rng=np.random.default_rng(1))
    b = run_search(g, model, cat, CFG, mode="eval", rng=np.random.default_rng(2))
    np.testing.assert_array_equal(a.policy, b.policy)
    assert a.root_value == b.root_value and a.principal_variation == b.principal_variation


def test_train_mode_seeded():
    model = _random_model(1)
    g, cat = sample_graphs(0)[0]
    a = run_search(g, model, cat, CFG, mode="train", rng=np.random.default_rng(3))
    b = run_search(g, model, cat, CFG, mode="train", rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a.visits, b.visits)


def _count_nodes(node):
    return 1 + sum(_count_nodes(c) for c in node.children.values())


def test_tree_invariants_and_trace(tmp_path):
    model = _random_model(2)
    pairs = sample_graphs(1)
    caches = model.prepare([g for g, _ in pairs], [c for _, c in pairs])
    trace = []
    rngs = [np.random.default_rng(i) for i in range(5)]
    results = run_search_batch(model, caches, CFG, "train", rngs, trace)
    for i, res in enumerate(results):
        root = res.root
        assert res.visits.sum() == CFG.num_simulations
        assert _count_nodes(root) == 1 + CFG.num_simulations
        assert abs(res.policy.sum() - 1.0) < 1e-12
        assert np.all(res.policy[~caches[i].legal] == 0)
        assert abs(root.prior.sum() - 1.0) < 1e-12
        logged: dict = {}
        for rec in (r for r in trace if r["root"] == i):
            node = root
            for depth, a in enumerate(rec["path"]):
                logged.setdefault((id(node), a), (node, a, []))[2].append(rec["G"][depth])
                if depth < len(rec["path"]) - 1:
                    node = node.children[a]
            # the last edge leads to the node created in this simulation
            assert rec["path"][-1] in node.children
        for node, a, returns in logged.values():
            assert node.N[a] == len(returns)
            assert node.Q[a] == float(sum(Fraction(g) for g in returns) / len(returns))
    write_trace(trace, tmp_path / "t.jsonl")
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert len(lines) == 5 * CFG.num_simulations and json.loads(lines[0])["sim"] == 0


def test_trace_returns_match_scalar_recomputation():
    model = _random_model(3, 0.2)
    g, cat = sample_graphs(2)[1]
    trace = []
    run_search(g, model, cat, CFG, mode="train", trace=trace)
    for rec in trace:
        for k in range(len(rec["path"])):
            expect = sum(CFG.discount ** j * r for j, r in enumerate(rec["rewards"][k:]))
            expect += CFG.discount ** (len(rec["path"]) - k) * rec["value"]
            assert abs(rec["G"][k] - expect) < 1e-12


def test_expansion_equals_direct_model_calls():
    model = _random_model(4, 0.2)
    g, cat = sample_graphs(3)[2]
    trace = []
    res = run_search(g, model, cat, CFG, mode="eval", trace=trace)
    cache = model.prepare([g], [cat])[0]
    for rec in trace:
        state = cache.latent
        for a, r in zip(rec["path"], rec["rewards"]):
            nxt, rew, prior, val = model.recurrent([cache], [state], [a])
            assert abs(rew[0] - r) < 1e-12
            state = nxt[0]
        assert abs(val[0] - rec["value"]) < 1e-12
        assert abs(prior[0].sum() - 1.0) < 1e-12
    assert res.principal_variation[0] == int(np.argmax(res.visits))


def test_empty_legal_set_rejected():
    model = OracleModel(ToyMDP(0))
    cache = model.prepare([None], [None])[0]
    cache.legal = np.zeros(2, dtype=bool)
    with pytest.raises(EmptySupportError):
        run_search_batch(model, [cache], CFG, "eval")


def test_dominant_action_toy():
    mdp = ToyMDP(5)
    res = run_search(None, OracleModel(mdp), None, CFG, mode="eval")
    assert res.visits[mdp.optimal_action()] >= 12


def test_policy_improvement_over_prior():
    for seed in range(100):
        mdp = ToyMDP(seed, n=2 + seed % 3)
        res = run_search(None, OracleModel(mdp), None, CFG, mode="eval")
        assert res.root_value >= mdp.uniform_policy_value()
