"""Graph encoder, latent dynamics and prediction heads.

All functions take a parameter mapping ``P`` whose values are either
:class:`~acdzero.autograd.Tensor` (training, taped) or plain arrays
(inference).  :class:`InferenceModel` adds per-root caching for search.

Parameter manifest (``H`` hidden, ``L`` latent, ``E`` action width)::

    port.W (19,H)  port.b (H)      file.W (2,H)  file.b (H)
    null.port (H)  null.file (H)   null.host (H)
    host.W1 (14+2H,H) host.b1 host.W2 (H,H) host.b2
    subnet.W1 (11+H,H) subnet.b1 subnet.W2 (H,H) subnet.b2
    latent.W1 (H+6,H) latent.b1 latent.W2 (H,L) latent.b2
    action.W (6+H,E) action.b (E)
    gru.W_z gru.W_r gru.W_h (E+L,L) and biases gru.b_z gru.b_r gru.b_h (L)
    dyn.W (L,L) dyn.b (L)
    reward.Ws (L,H) reward.Wa (E,H) reward.b1 (H) reward.W2 (H) reward.b2 (1)
    value.W1 (L,H) value.b1 (H) value.W2 (H) value.b2 (1)
    policy.Ws (L,H) policy.Wa (E,H) policy.b1 (H) policy.w2 (H)

``reward.W2``, ``value.W2`` and ``policy.w2`` (and their biases) start at
zero, so a fresh model predicts reward 0, value 0 and a uniform prior.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import autograd as ag
from .autograd import ContractError, EmptySupportError
from .graph import (
    FILE_DIM, GLOBAL_DIM, HOST_DIM, N_TEMPLATES, PORT_DIM, SUBNET_DIM, ActionCatalog,
    AttributedGraph,
)
from .params import CheckpointError, ParamStore

ZERO_INIT = ("reward.W2", "reward.b2", "value.W2", "value.b2", "policy.w2")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 256
    latent: int = 128
    action_dim: int = 32


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, L, E = cfg.hidden, cfg.latent, cfg.action_dim
    shapes = {
        "port.W": (PORT_DIM, H), "port.b": (H,),
        "file.W": (FILE_DIM, H), "file.b": (H,),
        "null.port": (H,), "null.file": (H,), "null.host": (H,),
        "host.W1": (HOST_DIM + 2 * H, H), "host.b1": (H,), "host.W2": (H, H), "host.b2": (H,),
        "subnet.W1": (SUBNET_DIM + H, H), "subnet.b1": (H,),
        "subnet.W2": (H, H), "subnet.b2": (H,),
        "latent.W1": (H + GLOBAL_DIM, H), "latent.b1": (H,),
        "latent.W2": (H, L), "latent.b2": (L,),
        "action.W": (N_TEMPLATES + H, E), "action.b": (E,),
    }
    for g in ("z", "r", "h"):
        shapes[f"gru.W_{g}"] = (E + L, L)
        shapes[f"gru.b_{g}"] = (L,)
    shapes.update({
        "dyn.W": (L, L), "dyn.b": (L,),
        "reward.Ws": (L, H), "reward.Wa": (E, H), "reward.b1": (H,),
        "reward.W2": (H,), "reward.b2": (1,),
        "value.W1": (L, H), "value.b1": (H,), "value.W2": (H,), "value.b2": (1,),
        "policy.Ws": (L, H), "policy.Wa": (E, H), "policy.b1": (H,), "policy.w2": (H,),
    })
    return shapes


def config_from_params(store: ParamStore) -> ModelConfig:
    """Recover the widths from a checkpoint and check its full manifest."""
    try:
        cfg = ModelConfig(hidden=store["port.W"].shape[1], latent=store["latent.W2"].shape[1],
                          action_dim=store["action.W"].shape[1])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks parameter {exc}") from None
    check_manifest(store, cfg)
    return cfg


def check_manifest(store: ParamStore, cfg: ModelConfig) -> None:
    expect = param_shapes(cfg)
    if sorted(store.names()) != sorted(expect):
        raise CheckpointError("parameter manifest mismatch")
    for name, shape in expect.items():
        if store[name].shape != shape:
            raise CheckpointError(f"shape mismatch for {name}: {store[name].shape} vs {shape}")


def init_params(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> ParamStore:
    """He-style normal weights, zero biases, zero output heads."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in param_shapes(cfg).items():
        if name in ZERO_INIT or len(shape) == 1 and not name.startswith("null."):
            value = np.zeros(shape)
        elif name.startswith("null."):
            value = rng.normal(0.0, 0.1, shape)
        else:
            value = rng.normal(0.0, np.sqrt(2.0 / shape[0]), shape)
        store.add(name, value)
    return store


# ---------------------------------------------------------------- batching

@dataclass
class GraphBatch:
    """Several graphs stacked with sparse pooling operators between levels."""

    n_graphs: int
    host_x: np.ndarray
    port_x: np.ndarray
    file_x: np.ndarray
    subnet_x: np.ndarray
    global_x: np.ndarray
    port_pool: sparse.csr_matrix
    port_empty: np.ndarray
    file_pool: sparse.csr_matrix
    file_empty: np.ndarray
    host_pool: sparse.csr_matrix
    host_empty: np.ndarray
    subnet_pool: sparse.csr_matrix
    host_offset: np.ndarray
    subnet_offset: np.ndarray

    @classmethod
    def from_graphs(cls, graphs: list[AttributedGraph]) -> "GraphBatch":
        if not graphs:
            raise ContractError("empty graph batch")
        host_off = np.cumsum([0] + [len(g.host_x) for g in graphs])
        sub_off = np.cumsum([0] + [len(g.subnet_x) for g in graphs])
        for g in graphs:
            if len(g.subnet_x) == 0:
                raise ContractError("graph has no subnet nodes")
            if len(g.port_host) and g.port_host.max() >= len(g.host_x):
                raise ContractError("port attached to a missing host")
            if len(g.host_subnet) and g.host_subnet.max() >= len(g.subnet_x):
                raise ContractError("host attached to a missing subnet")
        port_seg = np.concatenate([g.port_host + o for g, o in zip(graphs, host_off)])
        file_seg = np.concatenate([g.file_host + o for g, o in zip(graphs, host_off)])
        host_seg = np.concatenate([g.host_subnet + o for g, o in zip(graphs, sub_off)])
        sub_seg = np.concatenate([np.full(len(g.subnet_x), i) for i, g in enumerate(graphs)])
        nh, ns = int(host_off[-1]), int(sub_off[-1])
        return cls(
            n_graphs=len(graphs),
            host_x=np.concatenate([g.host_x for g in graphs]),
            port_x=np.concatenate([g.port_x for g in graphs]),
            file_x=np.concatenate([g.file_x for g in graphs]),
            subnet_x=np.concatenate([g.subnet_x for g in graphs]),
            global_x=np.stack([g.global_context for g in graphs]),
            port_pool=ag.pooling_matrix(port_seg, nh),
            port_empty=np.bincount(port_seg, minlength=nh) == 0,
            file_pool=ag.pooling_matrix(file_seg, nh),
            file_empty=np.bincount(file_seg, minlength=nh) == 0,
            host_pool=ag.pooling_matrix(host_seg, ns),
            host_empty=np.bincount(host_seg, minlength=ns) == 0,
            subnet_pool=ag.pooling_matrix(sub_seg, len(graphs)),
            host_offset=host_off,
            subnet_offset=sub_off,
        )


@dataclass
class ActionBatch:
    """Catalog entries of several graphs, flattened in batch order."""

    template: np.ndarray  # (N, N_TEMPLATES) one-hot
    target: sparse.csr_matrix  # (N, hosts + subnets) target selector
    segment: np.ndarray  # graph index of each entry
    legal: np.ndarray
    offset: np.ndarray  # first entry of each graph

    @classmethod
    def from_catalogs(cls, catalogs: list[ActionCatalog], batch: GraphBatch) -> "ActionBatch":
        nh = int(batch.host_offset[-1])
        sizes = np.array([len(c) for c in catalogs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        n = int(offsets[-1])
        kinds, hosts, links = zip(*(c.arrays() for c in catalogs))
        kinds = np.concatenate(kinds)
        host_rows = np.concatenate([h + np.where(h >= 0, batch.host_offset[i], 0)
                                    for i, h in enumerate(hosts)])
        link_rows = np.concatenate([lr + np.where(lr >= 0, nh + batch.subnet_offset[i], 0)
                                    for i, lr in enumerate(links)])
        idx = np.arange(n)
        is_host = host_rows >= 0
        is_link = link_rows[:, 0] >= 0
        rows = np.concatenate([idx[is_host], idx[is_link], idx[is_link]])
        cols = np.concatenate([host_rows[is_host], link_rows[is_link, 0], link_rows[is_link, 1]])
        vals = np.concatenate([np.ones(is_host.sum()), np.full(2 * is_link.sum(), 0.5)])
        target = sparse.csr_matrix((vals, (rows, cols)),
                                   shape=(n, nh + int(batch.subnet_offset[-1])))
        return cls(
            template=np.eye(N_TEMPLATES)[kinds],
            target=target,
            segment=np.repeat(np.arange(len(catalogs)), sizes),
            legal=np.concatenate([c.legal for c in catalogs]).astype(bool),
            offset=offsets,
        )


# ---------------------------------------------------------------- network pieces

def _linear(x, W, b):
    return ag.add(ag.matmul(x, W), b)


def _pooled(emb, pool, empty, null):
    """Mean of member rows, or the learned null vector when there are none."""
    out = ag.segment_pool(emb, pool)
    if empty.any():
        out = ag.add(out, ag.mul(empty[:, None].astype(np.float64), null))
    return out


def represent(P, batch: GraphBatch):
    """Two-stage aggregation.  Returns (latent (B,L), host_emb, subnet_emb)."""
    port = ag.relu(_linear(batch.port_x, P["port.W"], P["port.b"]))
    file = ag.relu(_linear(batch.file_x, P["file.W"], P["file.b"]))
    port_mean = _pooled(port, batch.port_pool, batch.port_empty, P["null.port"])
    file_mean = _pooled(file, batch.file_pool, batch.file_empty, P["null.file"])
    h = ag.relu(_linear(ag.concat([batch.host_x, port_mean, file_mean]), P["host.W1"], P["host.b1"]))
    host = ag.relu(_linear(h, P["host.W2"], P["host.b2"]))
    host_mean = _pooled(host, batch.host_pool, batch.host_empty, P["null.host"])
    h = ag.relu(_linear(ag.concat([batch.subnet_x, host_mean]), P["subnet.W1"], P["subnet.b1"]))
    subnet = ag.relu(_linear(h, P["subnet.W2"], P["subnet.b2"]))
    graph_mean = ag.segment_pool(subnet, batch.subnet_pool)
    h = ag.relu(_linear(ag.concat([graph_mean, batch.global_x]), P["latent.W1"], P["latent.b1"]))
    latent = ag.tanh(_linear(h, P["latent.W2"], P["latent.b2"]))
    return latent, host, subnet


def embed_actions(P, actions: ActionBatch, host, subnet):
    """Template one-hot and target node embedding, squashed to width E."""
    target = ag.segment_pool(ag.concat([host, subnet], axis=0), actions.target)
    return ag.tanh(_linear(ag.concat([actions.template, target]), P["action.W"], P["action.b"]))


def dynamics(P, s, a):
    """(s, a) -> (next latent, predicted reward) for batched rows."""
    gru = {k: P[f"gru.{k}"] for k in ("W_z", "b_z", "W_r", "b_r", "W_h", "b_h")}
    h = ag.gru_cell(a, s, gru)
    nxt = ag.tanh(_linear(h, P["dyn.W"], P["dyn.b"]))
    hid = ag.relu(ag.add(ag.add(ag.matmul(s, P["reward.Ws"]), ag.matmul(a, P["reward.Wa"])),
                         P["reward.b1"]))
    reward = ag.add(ag.matmul(hid, P["reward.W2"]), P["reward.b2"])
    return nxt, reward


def value_head(P, s):
    hid = ag.relu(_linear(s, P["value.W1"], P["value.b1"]))
    return ag.add(ag.matmul(hid, P["value.W2"]), P["value.b2"])


def policy_logits(P, s, a, segment):
    """Score every action row ``a`` against the latent of its graph."""
    sw = ag.gather(ag.matmul(s, P["policy.Ws"]), segment)
    hid = ag.relu(ag.add(ag.add(sw, ag.matmul(a, P["policy.Wa"])), P["policy.b1"]))
    return ag.matmul(hid, P["policy.w2"])


def policy_log_probs(P, s, a, actions: ActionBatch):
    """Flat masked log-probabilities; illegal entries hold 0."""
    logits = policy_logits(P, s, a, actions.segment)
    return ag.log_softmax_segments(logits, actions.segment, len(actions.offset) - 1, actions.legal)


def predict(P, s, a, mask):
    """Prior over one catalog and value for a single latent ``s`` (L,)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptySupportError("no legal action")
    logits = _single_logits(P, s, a)
    return ag.softmax(logits, mask), value_head(P, s)


def _single_logits(P, s, a):
    hid = ag.relu(ag.add(ag.add(ag.matmul(a, P["policy.Wa"]), ag.matmul(s, P["policy.Ws"])),
                         P["policy.b1"]))
    return ag.matmul(hid, P["policy.w2"])


# ---------------------------------------------------------------- inference

@dataclass
class RootCache:
    """Per-search constants: root latent, action terms, legality."""

    latent: np.ndarray
    legal: np.ndarray
    prior: np.ndarray
    value: float
    gx: np.ndarray  # action part of the GRU pre-activations (n, 3L)
    pa: np.ndarray  # action part of the policy hidden layer (n, H)
    ra: np.ndarray  # action part of the reward hidden layer (n, H)


class InferenceModel:
    """Read-only snapshot of the parameters with fast batched search calls."""

    def __init__(self, params, cfg: ModelConfig = ModelConfig()):
        P = params.arrays() if isinstance(params, ParamStore) else dict(params)
        self.P = P
        self.cfg = cfg
        E, L = cfg.action_dim, cfg.latent
        self._gx_W = np.concatenate([P["gru.W_z"][:E], P["gru.W_r"][:E], P["gru.W_h"][:E]], axis=1)
        self._zr_h = np.concatenate([P["gru.W_z"][E:], P["gru.W_r"][E:]], axis=1)
        self._zr_b = np.concatenate([P["gru.b_z"], P["gru.b_r"]])
        self._hh = P["gru.W_h"][E:]
        self._L = L
        self.calls = 0

    def encode(self, graphs: list[AttributedGraph], catalogs: list[ActionCatalog]):
        batch = GraphBatch.from_graphs(graphs)
        actions = ActionBatch.from_catalogs(catalogs, batch)
        latent, host, subnet = represent(self.P, batch)
        return latent, embed_actions(self.P, actions, host, subnet), actions

    def actor(self, graphs, catalogs):
        """Policy probabilities of pi_theta per graph (no search)."""
        latent, a, actions = self.encode(graphs, catalogs)
        logp = policy_log_probs(self.P, latent, a, actions)
        out = []
        for i in range(len(graphs)):
            lo, hi = actions.offset[i], actions.offset[i + 1]
            out.append(np.where(actions.legal[lo:hi], np.exp(logp[lo:hi]), 0.0))
        return out, value_head(self.P, latent)

    def prepare(self, graphs, catalogs) -> list[RootCache]:
        latent, a, actions = self.encode(graphs, catalogs)
        P = self.P
        gx = a @ self._gx_W
        pa = a @ P["policy.Wa"] + P["policy.b1"]
        ra = a @ P["reward.Wa"] + P["reward.b1"]
        values = value_head(P, latent)
        sw = latent @ P["policy.Ws"]
        caches = []
        for i in range(len(graphs)):
            lo, hi = actions.offset[i], actions.offset[i + 1]
            legal = actions.legal[lo:hi]
            logits = np.maximum(pa[lo:hi] + sw[i], 0.0) @ P["policy.w2"]
            caches.append(RootCache(latent[i], legal, ag.softmax(logits, legal), float(values[i]),
                                    gx[lo:hi], pa[lo:hi], ra[lo:hi]))
        return caches

    def bind(self, caches: list[RootCache]) -> "BoundRoots":
        """Stack the per-root action terms into padded arrays for batched steps."""
        B = len(caches)
        n = max(len(c.legal) for c in caches)
        L, H = self._L, self.cfg.hidden
        gx = np.zeros((B, n, 3 * L))
        pa = np.zeros((B, n, H))
        ra = np.zeros((B, n, H))
        legal = np.zeros((B, n), dtype=bool)
        for i, c in enumerate(caches):
            k = len(c.legal)
            gx[i, :k], pa[i, :k], ra[i, :k], legal[i, :k] = c.gx, c.pa, c.ra, c.legal
        return BoundRoots(caches, gx, pa, ra, legal, np.array([len(c.legal) for c in caches]))

    def recurrent(self, bound, states, actions):
        """One dynamics + prediction step for each (root, state, action) row."""
        if not isinstance(bound, BoundRoots):
            bound = self.bind(bound)
        self.calls += 1
        P, L = self.P, self._L
        s = np.asarray(states)
        rows = np.arange(len(s))
        idx = np.asarray(actions, dtype=np.int64)
        gx = bound.gx[rows, idx]
        zr = gx[:, :2 * L] + s @ self._zr_h + self._zr_b
        zr = 0.5 * (np.tanh(0.5 * zr) + 1.0)
        z, r = zr[:, :L], zr[:, L:]
        cand = np.tanh(gx[:, 2 * L:] + (r * s) @ self._hh + P["gru.b_h"])
        h = (1.0 - z) * s + z * cand
        nxt = np.tanh(h @ P["dyn.W"] + P["dyn.b"])
        reward = np.maximum(s @ P["reward.Ws"] + bound.ra[rows, idx], 0.0) @ P["reward.W2"] \
            + P["reward.b2"]
        value = value_head(P, nxt)
        sw = nxt @ P["policy.Ws"]
        logits = np.maximum(bound.pa + sw[:, None, :], 0.0) @ P["policy.w2"]
        logits = np.where(bound.legal, logits, -np.inf)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        priors = [probs[i, :k] for i, k in enumerate(bound.sizes)]
        return nxt, reward, priors, value


@dataclass
class BoundRoots:
    caches: list
    gx: np.ndarray
    pa: np.ndarray
    ra: np.ndarray
    legal: np.ndarray
    sizes: np.ndarray


class LatentModel:
    """Single-graph convenience wrapper around the batched functions."""

    def __init__(self, params: ParamStore | None = None, cfg: ModelConfig = ModelConfig(),
                 seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def _P(self, taped: bool):
        return self.params.tensors() if taped else self.params.arrays()

    def represent(self, graph: AttributedGraph, taped: bool = False):
        latent, _, _ = represent(self._P(taped), GraphBatch.from_graphs([graph]))
        return ag.gather(latent, 0)

    def action_embeddings(self, graph: AttributedGraph, catalog: ActionCatalog, taped: bool = False):
        P = self._P(taped)
        batch = GraphBatch.from_graphs([graph])
        _, host, subnet = represent(P, batch)
        return embed_actions(P, ActionBatch.from_catalogs([catalog], batch), host, subnet)

    def dynamics(self, s, a, taped: bool = False):
        nxt, reward = dynamics(self._P(taped), s, a)
        return nxt, reward

    def predict(self, s, a, mask, taped: bool = False):
        return predict(self._P(taped), s, a, mask)

    def inference(self) -> InferenceModel:
        return InferenceModel(self.params, self.cfg)


__all__ = [
    "ActionBatch", "BoundRoots", "check_manifest", "config_from_params", "GraphBatch", "InferenceModel", "LatentModel", "ModelConfig", "RootCache",
    "dynamics", "embed_actions", "init_params", "param_shapes", "policy_log_probs",
    "policy_logits", "predict", "represent", "value_head",
]
