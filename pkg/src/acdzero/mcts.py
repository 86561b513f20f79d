"""Latent-space Monte Carlo tree search with pUCT selection.

Trees for several roots (one per agent) advance in lockstep so that each
simulation issues one batched model call.  The model must provide

* ``prepare(graphs, catalogs)`` -> caches with ``latent``, ``prior``,
  ``value`` and ``legal`` attributes, and
* ``recurrent(bound, states, actions)`` -> ``(next_states, rewards,
  priors, values)`` for a batch of leaves, where ``bound`` is whatever
  the optional ``bind(caches)`` returns (the caches themselves otherwise).

:class:`acdzero.model.InferenceModel` is the learned implementation; tests
inject exact oracles with the same two methods.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import EmptySupportError


@dataclass
class SearchConfig:
    num_simulations: int = 16
    c_base: float = 19652.0
    c_init: float = 1.25
    dirichlet_alpha: float = 0.3
    noise_fraction: float = 0.25
    temperature: float = 1.0
    eval_temperature: float = 0.1
    discount: float = 0.99
    dynamic_c1: bool = True

    def validate(self) -> "SearchConfig":
        for name in ("num_simulations", "c_base", "c_init", "dirichlet_alpha", "temperature",
                     "eval_temperature", "discount"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ValueError("noise_fraction must lie in [0, 1]")
        return self


class MinMaxStats:
    """Running bounds of every Q value written in the tree."""

    def __init__(self):
        self.lo = math.inf
        self.hi = -math.inf

    def update(self, q: float) -> None:
        self.lo = min(self.lo, q)
        self.hi = max(self.hi, q)

    def normalize(self, q: np.ndarray) -> np.ndarray:
        if self.hi > self.lo:
            return (q - self.lo) / (self.hi - self.lo)
        return np.zeros_like(q)


# Returns are summed exactly as integers in units of 2**-_EXACT_BITS (every
# finite double is a multiple of 2**-1074); int / int division then gives
# the correctly rounded mean.
_EXACT_BITS = 1074


def _exact(x: float) -> int:
    num, den = float(x).as_integer_ratio()
    return num << (_EXACT_BITS - (den.bit_length() - 1))


class SearchNode:
    """Edge statistics of one latent state, stored as arrays over the catalog."""

    __slots__ = ("state", "prior", "legal", "penalty", "value", "N", "Q", "R", "W", "children")

    def __init__(self, state, prior: np.ndarray, legal: np.ndarray, value: float = 0.0,
                 penalty: np.ndarray | None = None):
        n = len(prior)
        self.state = state
        self.prior = np.asarray(prior, dtype=np.float64)
        self.legal = legal
        self.penalty = penalty if penalty is not None else np.where(legal, 0.0, -np.inf)
        self.value = float(value)
        self.N = np.zeros(n, dtype=np.int64)
        self.Q = np.zeros(n)
        self.R = np.zeros(n)
        self.W: dict[int, int] = {}  # exact sum of returns per visited edge
        self.children: dict[int, SearchNode] = {}

    @property
    def expanded(self) -> bool:
        return self.prior is not None


@dataclass
class SearchResult:
    policy: np.ndarray
    root_value: float
    visits: np.ndarray
    principal_variation: list[int]
    root: SearchNode | None = field(default=None, repr=False)


def exploration_constant(total_visits: int, config: SearchConfig) -> float:
    if not config.dynamic_c1:
        return config.c_init
    return config.c_init + math.log((total_visits + config.c_base + 1.0) / config.c_base)


def select_child(node: SearchNode, config: SearchConfig, stats: MinMaxStats | None = None) -> int:
    """Legal argmax of the pUCT score; the lowest index wins ties."""
    total = int(node.N.sum())
    c1 = exploration_constant(total, config)
    # with no visits at all the bonus would vanish; use sqrt(1) so the prior decides
    root_term = math.sqrt(total) if total > 0 else 1.0
    score = node.prior * ((root_term * c1) / (1.0 + node.N)) + node.penalty
    if total > 0 and stats is not None and stats.hi > stats.lo:
        # unvisited edges keep a normalized Q of 0
        score += np.where(node.N > 0, (node.Q - stats.lo) / (stats.hi - stats.lo), 0.0)
    return int(np.argmax(score))


def backup(path: list[tuple[SearchNode, int]], leaf_value: float, config: SearchConfig,
           stats: MinMaxStats | None = None) -> list[float]:
    """Bootstrapped returns along ``path`` (root first); updates N and Q in place.

    Returns the return G of every edge on the path, root edge first.
    """
    if not path:
        raise ValueError("backup needs a nonempty path")
    g = float(leaf_value)
    returns = []
    for node, a in reversed(path):
        g = node.R[a] + config.discount * g
        returns.append(g)
        n = int(node.N[a])
        # running mean (N Q + G) / (N + 1), kept exact
        w = node.W.get(a, 0) + _exact(g)
        node.W[a] = w
        node.N[a] = n + 1
        node.Q[a] = w / ((n + 1) << _EXACT_BITS)
        if stats is not None:
            stats.update(node.Q[a])
    returns.reverse()
    return returns


def add_root_noise(node: SearchNode, config: SearchConfig, rng: np.random.Generator) -> SearchNode:
    legal = np.flatnonzero(node.legal)
    eta = rng.dirichlet(np.full(len(legal), config.dirichlet_alpha))
    eps = config.noise_fraction
    prior = node.prior.copy()
    prior[legal] = (1.0 - eps) * prior[legal] + eps * eta
    node.prior = prior
    return node


def extract_policy(visits: np.ndarray, temperature: float) -> np.ndarray:
    """Visit counts raised to ``1 / temperature``; temperature 0 gives argmax."""
    n = np.asarray(visits, dtype=np.float64)
    if n.sum() < 1:
        raise ValueError("no visits to extract a policy from")
    if temperature == 0:
        out = np.zeros_like(n)
        out[int(np.argmax(n))] = 1.0
        return out
    scaled = (n / n.max()) ** (1.0 / temperature)
    return scaled / scaled.sum()


def _principal_variation(root: SearchNode) -> list[int]:
    out, node = [], root
    while node is not None and node.N.sum() > 0:
        a = int(np.argmax(node.N))
        out.append(a)
        node = node.children.get(a)
    return out


def run_search_batch(model, caches, config: SearchConfig, mode: str = "train",
                     rngs=None, trace: list | None = None) -> list[SearchResult]:
    """Run one search per root cache, simulations interleaved across roots."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown search mode {mode!r}")
    roots, stats = [], []
    for i, c in enumerate(caches):
        if not np.any(c.legal):
            raise EmptySupportError("search root has no legal action")
        root = SearchNode(c.latent, c.prior, c.legal, c.value)
        if mode == "train" and config.noise_fraction > 0:
            add_root_noise(root, config, rngs[i])
        roots.append(root)
        stats.append(MinMaxStats())
    bound = model.bind(caches) if hasattr(model, "bind") else caches

    for sim in range(config.num_simulations):
        paths, leaves, states, actions = [], [], [], []
        for root, st in zip(roots, stats):
            node, path = root, []
            while True:
                a = select_child(node, config, st)
                path.append((node, a))
                child = node.children.get(a)
                if child is None:
                    break
                node = child
            paths.append(path)
            leaves.append(node)
            states.append(node.state)
            actions.append(a)
        nxt, rewards, priors, values = model.recurrent(bound, states, actions)
        for i, path in enumerate(paths):
            leaf, a = path[-1]
            leaf.R[a] = float(rewards[i])
            leaf.children[a] = SearchNode(nxt[i], priors[i], roots[i].legal, float(values[i]),
                                          roots[i].penalty)
            returns = backup(path, float(values[i]), config, stats[i])
            if trace is not None:
                trace.append({"root": i, "sim": sim, "path": [int(b) for _, b in path],
                              "rewards": [float(n.R[b]) for n, b in path],
                              "value": float(values[i]), "G": returns})

    tau = config.temperature if mode == "train" else config.eval_temperature
    out = []
    for root in roots:
        visits = root.N.copy()
        value = float((visits * root.Q).sum() / visits.sum())
        out.append(SearchResult(extract_policy(visits, tau), value, visits,
                                _principal_variation(root), root))
    return out


def run_search(root_graph, model, catalog, config: SearchConfig, mode: str = "train",
               rng: np.random.Generator | None = None, trace: list | None = None) -> SearchResult:
    """Single-root search: represent the graph, expand the root, simulate."""
    cache = model.prepare([root_graph], [catalog])[0]
    rng = rng if rng is not None else np.random.default_rng(0)
    return run_search_batch(model, [cache], config, mode, [rng], trace)[0]


def write_trace(trace: list, path) -> None:
    """Line-delimited JSON, one record per simulation."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")
