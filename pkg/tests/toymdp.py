"""Two-step toy decision problems with an exact model for search tests."""
from dataclasses import dataclass

import numpy as np


@dataclass
class ToyCache:
    latent: tuple
    prior: np.ndarray
    value: float
    legal: np.ndarray


class ToyMDP:
    """Root picks ``a``, then ``b``; episode ends after two steps.

    Every state has the same ``n`` actions.  Rewards: ``r1[a]`` then
    ``r2[a, b]``; after the end every action yields 0 forever.  One root
    action is made dominant by adding ``bonus`` to one of its follow-ups.
    """

    def __init__(self, seed: int, n: int = 2, gamma: float = 0.99, bonus: float = 2.0):
        rng = np.random.default_rng(seed)
        self.n = n
        self.gamma = gamma
        self.r1 = rng.random(self.n)
        self.r2 = rng.random((self.n, self.n))
        self.best = int(rng.integers(self.n))
        self.r2[self.best, int(rng.integers(self.n))] += bonus

    def step(self, state: tuple, a: int):
        if len(state) == 0:
            return (a,), float(self.r1[a])
        if len(state) == 1:
            return (state[0], a), float(self.r2[state[0], a])
        return state, 0.0

    def value(self, state: tuple) -> float:
        """Optimal return from ``state``."""
        if len(state) == 0:
            return float(self.q_root().max())
        if len(state) == 1:
            return float(self.r2[state[0]].max())
        return 0.0

    def q_root(self) -> np.ndarray:
        return self.r1 + self.gamma * self.r2.max(axis=1)

    def optimal_action(self) -> int:
        return int(np.argmax(self.q_root()))

    def uniform_policy_value(self) -> float:
        return float(np.mean(self.r1 + self.gamma * self.r2.mean(axis=1)))


class OracleModel:
    """Exact dynamics, rewards and optimal values; uniform priors."""

    def __init__(self, mdp: ToyMDP):
        self.mdp = mdp
        self.calls = 0

    def _prior(self):
        return np.full(self.mdp.n, 1.0 / self.mdp.n)

    def prepare(self, graphs, catalogs):
        legal = np.ones(self.mdp.n, dtype=bool)
        return [ToyCache((), self._prior(), self.mdp.value(()), legal) for _ in graphs]

    def recurrent(self, caches, states, actions):
        self.calls += 1
        nxt, rewards = zip(*(self.mdp.step(s, a) for s, a in zip(states, actions)))
        values = [self.mdp.value(s) for s in nxt]
        return list(nxt), np.array(rewards), [self._prior() for _ in nxt], np.array(values)
