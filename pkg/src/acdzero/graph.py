"""Attributed-graph observations and the graph-action catalog.

Node kinds are Host, Subnet, Port and File.  Every kind has a fixed
feature width, independent of the topology size:

* Host   (14): role one-hot (3), OS one-hot (4), alerts (scan, exploit,
  decoy), decoy count / max decoys, steps since last restore / horizon,
  scan-seen and exploit-seen since last restore (agent memory).
* Port   (19): service kind one-hot (8), port bucket one-hot (8), flags
  (ephemeral, default, decoy).
* File    (2): density, signed.
* Subnet (11): owned flag, inbound message bits (MSB first, 8),
  blocked-link fraction, any-link-blocked.
"""
from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .sim import (
    N_OS, N_SERVICE_KINDS, ActionKind, BlueAction, FileRecord, LocalObservation, Service,
)

HOST_DIM = 14
PORT_DIM = 19
FILE_DIM = 2
SUBNET_DIM = 11
GLOBAL_DIM = 6
N_TEMPLATES = len(ActionKind)
MAX_DECOYS_FEATURE = 2.0
PORT_BUCKETS = (64, 256, 1024, 4096, 16384, 32768, 49152)

NODE_KINDS = ("Host", "Subnet", "Port", "File")
EDGE_KINDS = ("port-of", "file-on", "host-in-subnet", "subnet-link")
_HOST_KINDS = (ActionKind.ANALYZE, ActionKind.RESTORE, ActionKind.DEPLOY_DECOY)
_TRAFFIC_KINDS = (ActionKind.BLOCK_TRAFFIC, ActionKind.ALLOW_TRAFFIC)


class MaskedActionError(ValueError):
    """The requested catalog index is masked out or out of range."""


def port_bucket(port: int) -> int:
    return bisect.bisect_right(PORT_BUCKETS, port)


def message_bits(value: int) -> np.ndarray:
    """Byte to 8 binary features, most significant bit first."""
    return np.array([(value >> (7 - i)) & 1 for i in range(8)], dtype=np.float64)


@dataclass
class MessageSummary:
    suspected: tuple[bool, ...] = ()
    restored: bool = False
    decoy_triggered: bool = False
    alerted_hosts: int = 0


def encode_outgoing_message(summary: MessageSummary) -> int:
    """Bits 0-3 subnet suspicion, 4 restore, 5 decoy, 6-7 alerted hosts (saturating)."""
    value = 0
    for i, flag in enumerate(summary.suspected[:4]):
        value |= int(bool(flag)) << i
    value |= int(summary.restored) << 4
    value |= int(summary.decoy_triggered) << 5
    value |= min(max(summary.alerted_hosts, 0), 3) << 6
    return value


def decode_message(value: int) -> MessageSummary:
    if not 0 <= value <= 255:
        raise ValueError(f"message {value} is not an 8-bit value")
    return MessageSummary(tuple(bool(value >> i & 1) for i in range(4)), bool(value >> 4 & 1),
                          bool(value >> 5 & 1), value >> 6 & 3)


@dataclass
class AgentMemory:
    """Per-agent history folded into node features across timesteps."""

    analysis: dict[int, tuple[FileRecord, ...]] = field(default_factory=dict)
    last_restore: dict[int, int] = field(default_factory=dict)
    scan_seen: set[int] = field(default_factory=set)
    exploit_seen: set[int] = field(default_factory=set)

    def observe(self, obs: LocalObservation) -> None:
        self.analysis.update(obs.analysis)
        for h in obs.hosts:
            if h.scan_alert:
                self.scan_seen.add(h.host)
            if h.exploit_alert or h.decoy_alert:
                self.exploit_seen.add(h.host)

    def record_action(self, action: BlueAction, t: int) -> None:
        if action.kind == ActionKind.RESTORE:
            self.last_restore[action.host] = t
            self.analysis.pop(action.host, None)
            self.scan_seen.discard(action.host)
            self.exploit_seen.discard(action.host)


def summarize(obs: LocalObservation, action: BlueAction | None = None) -> MessageSummary:
    alerted = [h for h in obs.hosts if h.scan_alert or h.exploit_alert or h.decoy_alert]
    flagged = {h.subnet for h in alerted}
    return MessageSummary(
        suspected=tuple(s in flagged for s in obs.owned_subnets[:4]),
        restored=action is not None and action.kind == ActionKind.RESTORE,
        decoy_triggered=any(h.decoy_alert for h in obs.hosts),
        alerted_hosts=len(alerted),
    )


@dataclass
class AttributedGraph:
    """Typed nodes with per-kind feature matrices and index-based edges.

    Host rows follow ``host_ids``; ``port_host`` / ``file_host`` give each
    Port / File row's host row, ``host_subnet`` each host's subnet row.
    ``subnet_links`` lists open links as pairs of subnet rows.
    """

    host_ids: list[int]
    host_x: np.ndarray
    host_subnet: np.ndarray
    subnet_ids: list[int]
    subnet_x: np.ndarray
    subnet_owned: np.ndarray
    port_x: np.ndarray
    port_host: np.ndarray
    file_x: np.ndarray
    file_host: np.ndarray
    subnet_links: list[tuple[int, int]]
    global_context: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.host_x) + len(self.subnet_x) + len(self.port_x) + len(self.file_x)

    def nodes(self) -> list[tuple[str, np.ndarray]]:
        out = [("Host", x) for x in self.host_x]
        out += [("Subnet", x) for x in self.subnet_x]
        out += [("Port", x) for x in self.port_x]
        out += [("File", x) for x in self.file_x]
        return out

    def edges(self) -> list[tuple[int, int, str]]:
        """Directed edges over the global node numbering of :meth:`nodes`."""
        nh, ns, npt = len(self.host_x), len(self.subnet_x), len(self.port_x)
        out = [(nh + ns + i, int(h), "port-of") for i, h in enumerate(self.port_host)]
        out += [(nh + ns + npt + i, int(h), "file-on") for i, h in enumerate(self.file_host)]
        out += [(i, nh + int(s), "host-in-subnet") for i, s in enumerate(self.host_subnet)]
        for a, b in self.subnet_links:
            out += [(nh + a, nh + b, "subnet-link"), (nh + b, nh + a, "subnet-link")]
        return out

    def dump(self) -> str:
        """One JSON record per node or edge, stable field order."""
        lines = []
        for i, (kind, x) in enumerate(self.nodes()):
            lines.append(json.dumps({"type": "node", "id": i, "kind": kind,
                                     "x": [round(float(v), 12) for v in x]}))
        for src, dst, kind in self.edges():
            lines.append(json.dumps({"type": "edge", "src": src, "dst": dst, "kind": kind}))
        lines.append(json.dumps({"type": "global",
                                 "x": [round(float(v), 12) for v in self.global_context]}))
        return "\n".join(lines) + "\n"


@lru_cache(maxsize=65536)
def _port_features(svc: Service, decoy: bool) -> tuple[float, ...]:
    x = [0.0] * PORT_DIM
    x[svc.kind] = 1.0
    x[N_SERVICE_KINDS + port_bucket(svc.port)] = 1.0
    x[16:19] = (float(svc.ephemeral), float(svc.default), float(decoy))
    return tuple(x)


def build_global_context(obs: LocalObservation) -> np.ndarray:
    """[t / horizon, phase one-hot (3), alerted-host share, blocked-link share]."""
    g = np.zeros(GLOBAL_DIM)
    g[0] = obs.timestep / obs.horizon
    g[1 + obs.phase] = 1.0
    if obs.hosts:
        g[4] = sum(h.scan_alert or h.exploit_alert or h.decoy_alert for h in obs.hosts) / len(obs.hosts)
    if obs.links:
        g[5] = sum(obs.links.values()) / len(obs.links)
    return g


def build_graph(obs: LocalObservation, memory: AgentMemory | None = None) -> AttributedGraph:
    memory = memory or AgentMemory()
    owned = set(obs.owned_subnets)
    subnet_ids = sorted(owned | set(obs.foreign_owner))
    srow = {s: i for i, s in enumerate(subnet_ids)}
    owner_slot = {}
    for sender in range(len(obs.inbox) + 1):
        if sender != obs.agent:
            owner_slot[sender] = sender if sender < obs.agent else sender - 1

    subnet_x = np.zeros((len(subnet_ids), SUBNET_DIM))
    subnet_owned = np.zeros(len(subnet_ids), dtype=bool)
    for s, i in srow.items():
        incident = [blocked for pair, blocked in obs.links.items() if s in pair]
        if s in owned:
            subnet_x[i, 0] = 1.0
            subnet_owned[i] = True
        else:
            subnet_x[i, 1:9] = message_bits(obs.inbox[owner_slot[obs.foreign_owner[s]]])
        if incident:
            subnet_x[i, 9] = sum(incident) / len(incident)
            subnet_x[i, 10] = float(any(incident))

    host_rows, host_sub, port_rows, port_host, file_rows, file_host = [], [], [], [], [], []
    for i, h in enumerate(obs.hosts):
        x = np.zeros(HOST_DIM)
        x[int(h.role)] = 1.0
        x[3 + h.os] = 1.0
        x[7:10] = (h.scan_alert, h.exploit_alert, h.decoy_alert)
        x[10] = len(h.decoys) / MAX_DECOYS_FEATURE
        last = memory.last_restore.get(h.host)
        x[11] = 1.0 if last is None else min(obs.timestep - last, obs.horizon) / obs.horizon
        x[12] = h.host in memory.scan_seen
        x[13] = h.host in memory.exploit_seen
        host_rows.append(x)
        host_sub.append(srow[h.subnet])
        for svc in h.services:
            port_rows.append(_port_features(svc, False))
            port_host.append(i)
        for svc in h.decoys:
            port_rows.append(_port_features(svc, True))
            port_host.append(i)
        for f in memory.analysis.get(h.host, ()):
            file_rows.append(np.array([f.density, float(f.signed)]))
            file_host.append(i)

    links = [(srow[a], srow[b]) for (a, b), blocked in sorted(obs.links.items()) if not blocked]
    return AttributedGraph(
        host_ids=[h.host for h in obs.hosts],
        host_x=np.array(host_rows).reshape(-1, HOST_DIM),
        host_subnet=np.array(host_sub, dtype=np.int64),
        subnet_ids=subnet_ids,
        subnet_x=subnet_x,
        subnet_owned=subnet_owned,
        port_x=np.array(port_rows).reshape(-1, PORT_DIM),
        port_host=np.array(port_host, dtype=np.int64),
        file_x=np.array(file_rows).reshape(-1, FILE_DIM),
        file_host=np.array(file_host, dtype=np.int64),
        subnet_links=links,
        global_context=build_global_context(obs),
    )


@dataclass(frozen=True)
class CatalogEntry:
    kind: ActionKind
    host: int | None = None  # global host id
    host_row: int | None = None  # Host node row in the graph
    link: tuple[int, int] | None = None  # global subnet ids
    link_rows: tuple[int, int] | None = None  # Subnet node rows

    def command(self) -> BlueAction:
        return BlueAction(self.kind, host=self.host, link=self.link)


@dataclass
class ActionCatalog:
    entries: list[CatalogEntry]
    legal: np.ndarray
    _arrays: tuple | None = field(default=None, repr=False, compare=False)
    _key: tuple | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def template_ids(self) -> np.ndarray:
        return self.arrays()[0]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(template id, host row or -1, link rows or -1) per entry, cached."""
        if self._arrays is None:
            kinds = np.array([int(e.kind) for e in self.entries], dtype=np.int64)
            hosts = np.array([-1 if e.host_row is None else e.host_row for e in self.entries],
                             dtype=np.int64)
            links = np.array([(-1, -1) if e.link_rows is None else e.link_rows
                              for e in self.entries], dtype=np.int64).reshape(-1, 2)
            self._arrays = (kinds, hosts, links)
        return self._arrays


def enumerate_actions(graph: AttributedGraph, obs: LocalObservation,
                      previous: ActionCatalog | None = None) -> ActionCatalog:
    """Sleep, then host actions by (subnet, host, kind), then traffic by (link, kind).

    If ``previous`` was built for the same hosts and links its entries are
    reused and only legality is recomputed.
    """
    links = sorted(obs.links)
    key = (tuple(graph.host_ids), tuple(graph.subnet_ids),
           tuple((h.subnet, h.host) for h in obs.hosts), tuple(links))
    legal = np.ones(1 + len(obs.hosts) * len(_HOST_KINDS) + len(links) * len(_TRAFFIC_KINDS),
                    dtype=bool)
    is_allow = np.array([k == ActionKind.ALLOW_TRAFFIC for k in _TRAFFIC_KINDS])
    start = 1 + len(obs.hosts) * len(_HOST_KINDS)
    for j, link in enumerate(links):
        blocked = obs.links[link]
        lo = start + j * len(_TRAFFIC_KINDS)
        legal[lo:lo + len(_TRAFFIC_KINDS)] = is_allow if blocked else ~is_allow
    if previous is not None and previous._key == key:
        return ActionCatalog(previous.entries, legal, previous._arrays, key)

    hrow = {h: i for i, h in enumerate(graph.host_ids)}
    srow = {s: i for i, s in enumerate(graph.subnet_ids)}
    entries = [CatalogEntry(ActionKind.SLEEP)]
    for h in sorted(obs.hosts, key=lambda v: (v.subnet, v.host)):
        for kind in _HOST_KINDS:
            entries.append(CatalogEntry(kind, host=h.host, host_row=hrow[h.host]))
    for link in links:
        rows = (srow[link[0]], srow[link[1]])
        for kind in _TRAFFIC_KINDS:
            entries.append(CatalogEntry(kind, link=link, link_rows=rows))
    return ActionCatalog(entries, legal, None, key)


def action_to_command(index: int, catalog: ActionCatalog) -> BlueAction:
    if not 0 <= index < len(catalog) or not catalog.legal[index]:
        raise MaskedActionError(f"catalog index {index} is not a legal action")
    return catalog.entries[index].command()


class DefenderInterface:
    """Per-agent bridge: memory upkeep, graph/catalog building, outgoing messages."""

    def __init__(self, agent: int):
        self.agent = agent
        self.memory = AgentMemory()
        self._catalog: ActionCatalog | None = None

    def perceive(self, obs: LocalObservation) -> tuple[AttributedGraph, ActionCatalog]:
        self.memory.observe(obs)
        graph = build_graph(obs, self.memory)
        self._catalog = enumerate_actions(graph, obs, self._catalog)
        return graph, self._catalog

    def act(self, obs: LocalObservation, catalog: ActionCatalog, index: int) -> tuple[BlueAction, int]:
        action = action_to_command(index, catalog)
        self.memory.record_action(action, obs.timestep)
        return action, encode_outgoing_message(summarize(obs, action))
