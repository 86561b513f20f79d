"""Rollout collection, advantage estimation and the joint training objective."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tape, Tensor
from .graph import ActionCatalog, AttributedGraph, DefenderInterface
from .mcts import SearchConfig, run_search_batch
from .model import (
    ActionBatch, GraphBatch, InferenceModel, ModelConfig, dynamics, embed_actions, init_params,
    policy_log_probs, represent, value_head,
)
from .params import ParamStore, adam_step
from .sim import N_AGENTS, CyberDefenseEnv, SimConfig

log = logging.getLogger(__name__)

KL_FLOOR = 1e-12
METRICS_HEADER = ["round", "episodes", "mean_reward", "std_reward", "ppo", "distill", "model",
                  "total", "kl", "grad_norm", "searches"]


class TrainingAborted(RuntimeError):
    """Raised when the loss becomes non-finite."""


@dataclass
class TrainConfig:
    lambda_pi: float = 0.5
    lambda_v: float = 0.5
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    unroll: int = 5
    workers: int = 5
    lr: float = 3e-4
    episodes: int = 500
    epochs: int = 2
    minibatch: int = 250
    max_grad_norm: float = 5.0
    reward_scale: float = 0.1
    entropy_coef: float = 0.0
    normalize_advantages: bool = True
    use_search: bool = True
    behavior: str = "mcts"  # or "actor"
    shared_weights: bool = True
    checkpoint_every: int = 10
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> "TrainConfig":
        if self.lambda_pi < 0 or self.lambda_v < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        for name in ("gamma", "gae_lambda"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.workers < 1 or self.minibatch < 1 or self.epochs < 0 or self.unroll < 0:
            raise ValueError("workers, minibatch, epochs and unroll must be positive")
        if self.episodes < 0:
            raise ValueError("episodes must be non-negative")
        if self.behavior not in ("mcts", "actor"):
            raise ValueError(f"unknown behavior policy {self.behavior!r}")
        if self.behavior == "mcts" and not self.use_search:
            raise ValueError("mcts behavior needs use_search")
        self.sim.validate()
        self.search.validate()
        return self


@dataclass
class Trajectory:
    """One agent's episode.  Per-step lists share one length."""

    seed: int
    agent: int
    graphs: list[AttributedGraph] = field(default_factory=list)
    catalogs: list[ActionCatalog] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    pi_mcts: list[np.ndarray | None] = field(default_factory=list)
    root_values: list[float] = field(default_factory=list)
    logp_old: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    def check(self) -> None:
        n = len(self.actions)
        for name in ("graphs", "catalogs", "rewards", "pi_mcts", "root_values", "logp_old", "values"):
            if len(getattr(self, name)) != n:
                raise ContractError(f"trajectory field {name} has the wrong length")


# ---------------------------------------------------------------- rollouts

def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


class Worker:
    """One environment plus the per-agent interfaces that observe it."""

    def __init__(self, sim: SimConfig):
        self.env = CyberDefenseEnv(sim)
        self.ifaces: list[DefenderInterface] = []
        self.obs = None
        self.done = True
        self.total_reward = 0.0

    def reset(self, seed: int) -> None:
        self.obs = self.env.reset(seed)
        self.ifaces = [DefenderInterface(a) for a in range(N_AGENTS)]
        self.done = False
        self.total_reward = 0.0

    def perceive(self):
        return [iface.perceive(o) for iface, o in zip(self.ifaces, self.obs)]

    def advance(self, catalogs, indices):
        actions, outbox = [], []
        for iface, o, cat, idx in zip(self.ifaces, self.obs, catalogs, indices):
            act, byte = iface.act(o, cat, idx)
            actions.append(act)
            outbox.append(byte)
        res = self.env.step(actions, outbox)
        self.obs = res.observations
        self.done = res.done
        self.total_reward += res.reward
        return res


def _sample(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(p) - 1))


class SearchCounter:
    """Counts search invocations (used to check that NoMCTS never searches)."""

    def __init__(self):
        self.n = 0


def _models_for(stores: list[ParamStore], cfg: ModelConfig) -> list[InferenceModel]:
    return [InferenceModel(s, cfg) for s in stores]


def _store_index(agent: int, shared: bool) -> int:
    return 0 if shared else agent


def collect_rollouts(stores: list[ParamStore], cfg: TrainConfig, seeds: list[int],
                     rngs: list[np.random.Generator], counter: SearchCounter | None = None):
    """Run one episode per seed, workers advanced in lockstep.

    Returns ``(trajectories, episode_rewards)``; trajectories are ordered by
    worker then agent.
    """
    models = _models_for(stores, cfg.model)
    workers = [Worker(cfg.sim) for _ in seeds]
    trajs = []
    for w, s in zip(workers, seeds):
        w.reset(s)
        trajs.append([Trajectory(seed=s, agent=a) for a in range(N_AGENTS)])
    while not all(w.done for w in workers):
        live = [i for i, w in enumerate(workers) if not w.done]
        percepts = {i: workers[i].perceive() for i in live}
        # group roots by parameter set so each group shares one batched call
        groups: dict[int, list[tuple[int, int]]] = {}
        for i in live:
            for a in range(N_AGENTS):
                groups.setdefault(_store_index(a, cfg.shared_weights), []).append((i, a))
        chosen: dict[tuple[int, int], int] = {}
        for k, members in groups.items():
            graphs = [percepts[i][a][0] for i, a in members]
            cats = [percepts[i][a][1] for i, a in members]
            caches = models[k].prepare(graphs, cats)
            results = None
            if cfg.use_search:
                if counter is not None:
                    counter.n += len(caches)
                results = run_search_batch(models[k], caches, cfg.search, "train",
                                           [rngs[i] for i, _ in members])
            for j, (i, a) in enumerate(members):
                c = caches[j]
                pi = results[j].policy if results is not None else None
                behave = pi if cfg.behavior == "mcts" else c.prior
                idx = _sample(behave, rngs[i])
                tr = trajs[i][a]
                tr.graphs.append(graphs[j])
                tr.catalogs.append(cats[j])
                tr.actions.append(idx)
                tr.pi_mcts.append(pi)
                tr.root_values.append(results[j].root_value if results is not None else c.value)
                tr.logp_old.append(float(np.log(c.prior[idx])))
                tr.values.append(c.value)
                chosen[(i, a)] = idx
        for i in live:
            res = workers[i].advance([percepts[i][a][1] for a in range(N_AGENTS)],
                                     [chosen[(i, a)] for a in range(N_AGENTS)])
            for a in range(N_AGENTS):
                trajs[i][a].rewards.append(float(res.rewards[a]))
    flat = [t for per in trajs for t in per]
    for t in flat:
        t.check()
    return flat, [w.total_reward for w in workers]


# ---------------------------------------------------------------- targets

def compute_advantages(rewards, values, bootstrap: float, gamma: float, lam: float):
    """GAE advantages and value targets (advantage + value)."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.append(np.asarray(values, dtype=np.float64), bootstrap)
    adv = np.zeros(len(r))
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv, adv + v[:-1]


@dataclass
class Sample:
    traj: Trajectory
    t: int
    advantage: float
    value_targets: np.ndarray  # (K+1,)
    reward_targets: np.ndarray  # (K,)
    unroll_actions: np.ndarray  # (K,)
    model_weight: float


def build_samples(trajs: list[Trajectory], cfg: TrainConfig) -> list[Sample]:
    K = cfg.unroll
    out = []
    for tr in trajs:
        scaled = np.asarray(tr.rewards) * cfg.reward_scale
        adv, targets = compute_advantages(scaled, tr.values, 0.0, cfg.gamma, cfg.gae_lambda)
        T = len(tr)
        weight = 1.0
        if T < K + 1:
            warnings.warn(f"trajectory of length {T} is shorter than the unroll; model loss skipped")
            weight = 0.0
        # absorbing padding after the episode end: Sleep, reward 0, value 0
        pad_z = np.concatenate([targets, np.zeros(K + 1)])
        pad_r = np.concatenate([scaled, np.zeros(K)])
        pad_a = np.concatenate([np.asarray(tr.actions, dtype=np.int64), np.zeros(K, dtype=np.int64)])
        for t in range(T):
            out.append(Sample(tr, t, float(adv[t]), pad_z[t:t + K + 1], pad_r[t:t + K],
                              pad_a[t:t + K], weight))
    return out


@dataclass
class LossBatch:
    graphs: GraphBatch
    actions: ActionBatch
    taken: np.ndarray  # flat index of each sample's action
    advantages: np.ndarray
    logp_old: np.ndarray
    pi_target: np.ndarray | None  # flat, zero on illegal entries
    unroll_flat: np.ndarray  # (B, K) flat indices into the action rows
    reward_targets: np.ndarray  # (B, K)
    value_targets: np.ndarray  # (B, K+1)
    model_weight: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return len(self.taken)


def make_loss_batch(samples: list[Sample], normalize: bool = False, adv_stats=None) -> LossBatch:
    graphs = [s.traj.graphs[s.t] for s in samples]
    cats = [s.traj.catalogs[s.t] for s in samples]
    gb = GraphBatch.from_graphs(graphs)
    ab = ActionBatch.from_catalogs(cats, gb)
    off = ab.offset[:-1]
    adv = np.array([s.advantage for s in samples])
    if normalize and adv_stats is not None:
        mu, sd = adv_stats
        adv = (adv - mu) / (sd + 1e-8)
    targets = [s.traj.pi_mcts[s.t] for s in samples]
    pi = None
    if all(p is not None for p in targets):
        pi = np.concatenate(targets)
    return LossBatch(
        graphs=gb, actions=ab,
        taken=off + np.array([s.traj.actions[s.t] for s in samples]),
        advantages=adv,
        logp_old=np.array([s.traj.logp_old[s.t] for s in samples]),
        pi_target=pi,
        unroll_flat=off[:, None] + np.stack([s.unroll_actions for s in samples]),
        reward_targets=np.stack([s.reward_targets for s in samples]),
        value_targets=np.stack([s.value_targets for s in samples]),
        model_weight=np.array([s.model_weight for s in samples]),
    )


# ---------------------------------------------------------------- losses

def ppo_loss(logp, logp_old, advantages, clip_eps: float):
    """Negated mean clipped surrogate."""
    ratio = ag.exp(ag.sub(logp, logp_old))
    surr = ag.minimum(ag.mul(ratio, advantages),
                      ag.mul(ag.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), advantages))
    return ag.mul(ag.mean(surr), -1.0)


def distill_loss(logp_flat, target_flat, legal, n_samples: int):
    """Mean KL(target || pi) over samples, summed over legal entries only."""
    target = np.asarray(target_flat, dtype=np.float64)
    legal = np.asarray(legal, dtype=bool)
    if np.any(target[~legal] > 0):
        raise ContractError("search policy puts mass on an illegal action")
    logq = ag.clip(logp_flat, math.log(KL_FLOOR), 0.0)
    pos = target > 0
    entropy_term = float((target[pos] * np.log(target[pos])).sum())
    cross = ag.sum(ag.mul(logq, target * legal))
    return ag.mul(ag.sub(entropy_term, cross), 1.0 / n_samples)


def unroll_model(P, latent, a_rows, unroll_flat, K: int):
    """Predicted rewards (K tensors of (B,)) and values (K+1 tensors of (B,))."""
    s = latent
    rewards, values = [], [value_head(P, s)]
    for k in range(K):
        a = ag.gather(a_rows, unroll_flat[:, k])
        s, r = dynamics(P, s, a)
        rewards.append(r)
        values.append(value_head(P, s))
    return rewards, values


def model_loss(rewards, values, reward_targets, value_targets, weight):
    """Sum over unroll depths of masked mean squared errors."""
    w = np.asarray(weight, dtype=np.float64)
    denom = max(float(w.sum()), 1.0)
    total = 0.0
    for k, r in enumerate(rewards):
        d = ag.sub(r, reward_targets[:, k])
        total = ag.add(total, ag.mul(ag.sum(ag.mul(ag.mul(d, d), w)), 1.0 / denom))
    for k, v in enumerate(values):
        d = ag.sub(v, value_targets[:, k])
        total = ag.add(total, ag.mul(ag.sum(ag.mul(ag.mul(d, d), w)), 1.0 / denom))
    return total


def total_loss(components: dict, cfg: TrainConfig):
    return ag.add(ag.add(components["ppo"], ag.mul(components["distill"], cfg.lambda_pi)),
                  ag.mul(components["model"], cfg.lambda_v))


def _entropy(logp_flat, legal, n_samples: int):
    p = np.exp(np.where(legal, ag._value(logp_flat), -np.inf))
    return ag.mul(ag.sum(ag.mul(logp_flat, p * legal)), -1.0 / n_samples)


def compute_losses(P, batch: LossBatch, cfg: TrainConfig) -> dict:
    """All loss components for one minibatch; values may be tensors."""
    latent, host, subnet = represent(P, batch.graphs)
    a_rows = embed_actions(P, batch.actions, host, subnet)
    logp = policy_log_probs(P, latent, a_rows, batch.actions)
    out = {"ppo": ppo_loss(ag.gather(logp, batch.taken), batch.logp_old, batch.advantages,
                           cfg.clip_eps)}
    if batch.pi_target is not None and cfg.lambda_pi > 0:
        out["distill"] = distill_loss(logp, batch.pi_target, batch.actions.legal, batch.size)
    else:
        out["distill"] = 0.0
    K = cfg.unroll if cfg.use_search else 0
    rewards, values = unroll_model(P, latent, a_rows, batch.unroll_flat, K)
    out["model"] = model_loss(rewards, values, batch.reward_targets, batch.value_targets,
                              batch.model_weight)
    total = total_loss(out, cfg)
    if cfg.entropy_coef:
        total = ag.sub(total, ag.mul(_entropy(logp, batch.actions.legal, batch.size),
                                     cfg.entropy_coef))
    out["total"] = total
    return out


def mean_kl(P, batch: LossBatch) -> float:
    if batch.pi_target is None:
        return float("nan")
    latent, host, subnet = represent(P, batch.graphs)
    logp = policy_log_probs(P, latent, embed_actions(P, batch.actions, host, subnet), batch.actions)
    return float(distill_loss(logp, batch.pi_target, batch.actions.legal, batch.size))


# ---------------------------------------------------------------- training loop

def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{float(x):.10g}"


def optimize(stores: list[ParamStore], samples_by_store: dict[int, list[Sample]],
             cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """Minibatch epochs of the joint loss; returns averaged loss components."""
    sums = {"ppo": 0.0, "distill": 0.0, "model": 0.0, "total": 0.0, "grad_norm": 0.0}
    steps = 0
    for k, samples in samples_by_store.items():
        if not samples:
            continue
        store = stores[k]
        adv = np.array([s.advantage for s in samples])
        stats = (adv.mean(), adv.std())
        for _ in range(cfg.epochs):
            order = rng.permutation(len(samples))
            for lo in range(0, len(samples), cfg.minibatch):
                mb = [samples[i] for i in order[lo:lo + cfg.minibatch]]
                batch = make_loss_batch(mb, cfg.normalize_advantages, stats)
                T = store.tensors()
                with Tape() as tape:
                    comps = compute_losses(T, batch, cfg)
                total = comps["total"]
                value = float(ag._value(total))
                if not math.isfinite(value):
                    raise TrainingAborted(f"non-finite loss {value}")
                store.zero_grad()
                ag.backward(total, tape)
                norm = store.clip_grad_norm(cfg.max_grad_norm)
                if not math.isfinite(norm):
                    raise TrainingAborted("non-finite gradient")
                adam_step(store, lr=cfg.lr)
                for name in ("ppo", "distill", "model", "total"):
                    sums[name] += float(ag._value(comps[name]))
                sums["grad_norm"] += norm
                steps += 1
    return {k: v / max(steps, 1) for k, v in sums.items()}


def group_samples(samples: list[Sample], shared: bool) -> dict[int, list[Sample]]:
    out: dict[int, list[Sample]] = {}
    for s in samples:
        out.setdefault(_store_index(s.traj.agent, shared), []).append(s)
    return out


def initial_stores(cfg: TrainConfig) -> list[ParamStore]:
    n = 1 if cfg.shared_weights else N_AGENTS
    return [init_params(cfg.model, seed=cfg.seed * 101 + k) for k in range(n)]


def save_stores(stores: list[ParamStore], path: Path) -> None:
    """One checkpoint file; per-agent stores get an ``agentN/`` name prefix."""
    if len(stores) == 1:
        stores[0].save(path)
        return
    merged = ParamStore()
    for k, s in enumerate(stores):
        for name, t in s.items():
            merged.add(f"agent{k}/{name}", t.data)
    merged.save(path)


def load_stores(path) -> list[ParamStore]:
    store = ParamStore.load(path)
    if not any(n.startswith("agent") and "/" in n for n in store.names()):
        return [store]
    groups: dict[int, ParamStore] = {}
    for name, t in store.items():
        head, rest = name.split("/", 1)
        groups.setdefault(int(head[5:]), ParamStore()).add(rest, t.data)
    return [groups[k] for k in sorted(groups)]


@dataclass
class TrainResult:
    stores: list[ParamStore]
    metrics: list[dict]
    searches: int
    checkpoints: list[Path]


def train(cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Collect, estimate advantages, optimise, checkpoint; one CSV row per round."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    stores = initial_stores(cfg)
    counter = SearchCounter()
    ckpts: list[Path] = []
    rows: list[dict] = []
    csv_buf = io.StringIO()
    writer = csv.writer(csv_buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)

    def checkpoint(name: str) -> None:
        if out is None:
            return
        path = out / name
        save_stores(stores, path)
        ckpts.append(path)

    def flush_metrics() -> None:
        if out is None:
            return
        tmp = out / "metrics.csv.tmp"
        tmp.write_text(csv_buf.getvalue(), encoding="utf-8")
        os.replace(tmp, out / "metrics.csv")

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    checkpoint("checkpoint_0000.ckpt")
    flush_metrics()
    opt_rng = np.random.default_rng([cfg.seed, 7])
    episodes_done = 0
    rnd = 0
    while episodes_done < cfg.episodes:
        rnd += 1
        n = min(cfg.workers, cfg.episodes - episodes_done)
        seeds = [episode_seed(cfg.seed, episodes_done + i) for i in range(n)]
        rngs = [np.random.default_rng([cfg.seed, episodes_done + i, 1]) for i in range(n)]
        trajs, ep_rewards = collect_rollouts(stores, cfg, seeds, rngs, counter)
        episodes_done += n
        samples = build_samples(trajs, cfg)
        try:
            losses = optimize(stores, group_samples(samples, cfg.shared_weights), cfg, opt_rng)
        except TrainingAborted:
            flush_metrics()
            raise
        kl = float("nan")
        if cfg.use_search and cfg.shared_weights and samples:
            probe = make_loss_batch(samples[:: max(1, len(samples) // 200)])
            kl = mean_kl(stores[0].arrays(), probe)
        row = {"round": rnd, "episodes": episodes_done, "mean_reward": float(np.mean(ep_rewards)),
               "std_reward": float(np.std(ep_rewards)), **losses, "kl": kl,
               "searches": counter.n}
        rows.append(row)
        writer.writerow([_fmt(row[h]) if isinstance(row[h], float) else row[h] for h in METRICS_HEADER])
        flush_metrics()
        log.info("round %d episodes %d reward %.2f loss %.4f", rnd, episodes_done,
                 row["mean_reward"], row["total"])
        if cfg.checkpoint_every and rnd % cfg.checkpoint_every == 0:
            checkpoint(f"checkpoint_{rnd:04d}.ckpt")
    if out is not None and (not ckpts or ckpts[-1].name != f"checkpoint_{rnd:04d}.ckpt"):
        checkpoint(f"checkpoint_{rnd:04d}.ckpt")
    if out is not None:
        save_stores(stores, out / "final.ckpt")
    return TrainResult(stores, rows, counter.n, ckpts)


def metrics_csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for row in rows:
        w.writerow([_fmt(row[h]) if isinstance(row[h], float) else row[h] for h in METRICS_HEADER])
    return buf.getvalue()


__all__ = [
    "LossBatch", "Sample", "TrainConfig", "TrainResult", "TrainingAborted", "Trajectory",
    "build_samples", "collect_rollouts", "compute_advantages", "compute_losses", "distill_loss",
    "episode_seed", "load_stores", "make_loss_batch", "model_loss", "ppo_loss", "save_stores",
    "total_loss", "train", "unroll_model",
]
