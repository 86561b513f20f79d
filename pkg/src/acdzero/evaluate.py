"""Evaluation episodes for a trained policy, with replay logs and metrics."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .mcts import SearchConfig, run_search_batch, write_trace
from .metrics import EpisodeMetrics, aggregate, compute_metrics
from .model import InferenceModel, ModelConfig
from .params import ParamStore
from .sim import N_AGENTS, ReplayLog, SimConfig
from .trainer import Worker, _sample, _store_index, episode_seed

EVAL_STREAM = 1_000_003  # keeps evaluation seeds away from training seeds


@dataclass
class EvalReport:
    seeds: list[int]
    episodes: list[EpisodeMetrics]
    summary: dict
    searches: int = 0


def eval_seeds(seed: int, episodes: int) -> list[int]:
    return [episode_seed(seed, EVAL_STREAM + i) for i in range(episodes)]


def evaluate(stores: list[ParamStore], model_cfg: ModelConfig = ModelConfig(),
             sim: SimConfig = SimConfig(), episodes: int = 100, steps: int | None = None,
             seed: int = 0, with_search: bool = False, search: SearchConfig = SearchConfig(),
             replay_dir=None, batch: int = 10, trace_path=None) -> EvalReport:
    """Roll out ``episodes`` episodes and score them from their replay logs.

    Without search the actor acts greedily.  With search each step runs the
    planner in eval mode (no root noise) and samples from its visit policy
    at the evaluation temperature.  ``trace_path`` writes every simulation
    (episode, step, agent, path, rewards, leaf value, returns) as JSON lines.
    """
    if episodes < 1:
        raise ValueError("evaluation needs at least one episode")
    if steps is not None:
        sim = replace(sim, horizon=steps)
    shared = len(stores) == 1
    models = [InferenceModel(s, model_cfg) for s in stores]
    seeds = eval_seeds(seed, episodes)
    out_dir = Path(replay_dir) if replay_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics: list[EpisodeMetrics] = []
    searches = 0
    trace: list | None = [] if trace_path is not None and with_search else None
    for lo in range(0, episodes, batch):
        chunk = seeds[lo:lo + batch]
        workers = [Worker(sim) for _ in chunk]
        logs = []
        for j, (w, s) in enumerate(zip(workers, chunk)):
            w.reset(s)
            path = out_dir / f"episode_{lo + j:04d}.jsonl" if out_dir is not None else None
            logs.append(ReplayLog(path))
        rngs = [np.random.default_rng([seed, lo + j, 2]) for j in range(len(chunk))]
        while not all(w.done for w in workers):
            live = [i for i, w in enumerate(workers) if not w.done]
            percepts = {i: workers[i].perceive() for i in live}
            groups: dict[int, list[tuple[int, int]]] = {}
            for i in live:
                for a in range(N_AGENTS):
                    groups.setdefault(_store_index(a, shared), []).append((i, a))
            chosen = {}
            for k, members in groups.items():
                graphs = [percepts[i][a][0] for i, a in members]
                cats = [percepts[i][a][1] for i, a in members]
                if with_search:
                    caches = models[k].prepare(graphs, cats)
                    searches += len(caches)
                    sims = [] if trace is not None else None
                    results = run_search_batch(models[k], caches, search, "eval", trace=sims)
                    for rec in sims or ():
                        i, a = members[rec.pop("root")]
                        trace.append({"episode": lo + i, "step": workers[i].obs[0].timestep, "agent": a, **rec})
                    for j, (i, a) in enumerate(members):
                        chosen[(i, a)] = _sample(results[j].policy, rngs[i])
                else:
                    probs, _ = models[k].actor(graphs, cats)
                    for j, (i, a) in enumerate(members):
                        chosen[(i, a)] = int(np.argmax(probs[j]))
            for i in live:
                res = workers[i].advance([percepts[i][a][1] for a in range(N_AGENTS)],
                                         [chosen[(i, a)] for a in range(N_AGENTS)])
                logs[i].append(res)
        for log in logs:
            log.close()
            metrics.append(compute_metrics(log.records))
    if trace is not None:
        write_trace(trace, trace_path)
    return EvalReport(seeds, metrics, aggregate(metrics), searches)
