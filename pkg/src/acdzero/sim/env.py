"""Multi-agent cyber-defense environment with red/green/blue dynamics.

One call to :func:`step` applies blue actions, then the red kill-chain
automaton, then green user activity, then scores the step and emits
per-agent local observations.  All randomness is drawn from sub-streams
keyed by ``(seed, step, stream, entity)``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .topology import (
    N_AGENTS, SERVICE_CATALOGUE, STREAM_ENTRY, STREAM_GREEN, STREAM_OBSERVE, STREAM_RED,
    FileRecord, Role, Service, SimConfig, Topology, generate_topology, substream,
)


class Compromise(enum.IntEnum):
    CLEAN = 0
    USER_ACCESS = 1
    ROOT_ACCESS = 2


class Phase(enum.IntEnum):
    UNKNOWN = 0
    DISCOVERED = 1
    SCANNED = 2
    EXPLOITED = 3
    ESCALATED = 4
    IMPACTING = 5


class ActionKind(enum.IntEnum):
    SLEEP = 0
    ANALYZE = 1
    RESTORE = 2
    DEPLOY_DECOY = 3
    BLOCK_TRAFFIC = 4
    ALLOW_TRAFFIC = 5


HOST_ACTIONS = (ActionKind.ANALYZE, ActionKind.RESTORE, ActionKind.DEPLOY_DECOY)
TRAFFIC_ACTIONS = (ActionKind.BLOCK_TRAFFIC, ActionKind.ALLOW_TRAFFIC)
REWARD_COMPONENTS = ("user_access", "root_access", "impact", "restore",
                     "green_remote", "green_local", "analyze")


class MessageError(ValueError):
    pass


@dataclass(frozen=True)
class BlueAction:
    kind: ActionKind
    host: int | None = None
    link: tuple[int, int] | None = None

    def __str__(self) -> str:
        if self.kind in HOST_ACTIONS:
            return f"{self.kind.name}({self.host})"
        if self.kind in TRAFFIC_ACTIONS:
            return f"{self.kind.name}({self.link[0]},{self.link[1]})"
        return "SLEEP"


SLEEP = BlueAction(ActionKind.SLEEP)


@dataclass
class HostState:
    role: Role
    compromise: Compromise = Compromise.CLEAN
    decoys: list[Service] = field(default_factory=list)
    files: list[FileRecord] = field(default_factory=list)
    last_compromise_step: int | None = None


@dataclass
class RedState:
    phase: list[Phase]
    footholds: set[int] = field(default_factory=set)
    discovered_subnets: set[int] = field(default_factory=set)
    entered: bool = False


@dataclass
class NetworkState:
    topology: Topology
    config: SimConfig
    seed: int
    hosts: list[HostState]
    red: RedState
    blocked: set[tuple[int, int]] = field(default_factory=set)
    inbox: list[tuple[int, ...]] = field(default_factory=list)
    t: int = 0


@dataclass(frozen=True)
class HostView:
    host: int
    subnet: int
    index: int
    role: Role
    os: int
    services: tuple[Service, ...]
    decoys: tuple[Service, ...]
    scan_alert: bool
    exploit_alert: bool
    decoy_alert: bool


@dataclass
class LocalObservation:
    """What one blue agent sees; never includes host compromise levels."""

    agent: int
    timestep: int
    horizon: int
    phase: int
    owned_subnets: tuple[int, ...]
    hosts: tuple[HostView, ...]
    analysis: dict[int, tuple[FileRecord, ...]]
    links: dict[tuple[int, int], bool]  # link -> blocked
    foreign_owner: dict[int, int]  # adjacent foreign subnet -> owning agent
    inbox: tuple[int, ...]

    def to_record(self) -> dict:
        return {
            "agent": self.agent, "t": self.timestep, "phase": self.phase,
            "hosts": [
                {"host": h.host, "subnet": h.subnet, "role": int(h.role), "os": h.os,
                 "services": [[s.port, s.kind] for s in h.services],
                 "decoys": [[s.port, s.kind] for s in h.decoys],
                 "alerts": [h.scan_alert, h.exploit_alert, h.decoy_alert]}
                for h in self.hosts
            ],
            "analysis": {str(k): [[f.density, f.signed] for f in v] for k, v in self.analysis.items()},
            "links": [[a, b, blocked] for (a, b), blocked in self.links.items()],
            "inbox": list(self.inbox),
        }


@dataclass
class StepResult:
    observations: list[LocalObservation]
    rewards: list[float]
    reward: float
    components: dict[str, float]
    agent_components: list[dict[str, float]]
    done: bool
    rejected: list[bool]
    red_events: list[str]
    truth: dict


def initial_state(seed: int, config: SimConfig) -> NetworkState:
    topo = generate_topology(seed, config)
    hosts = [HostState(role=h.role, files=list(h.benign_files)) for h in topo.hosts]
    red = RedState(phase=[Phase.UNKNOWN] * len(hosts))
    return NetworkState(topo, config, seed, hosts, red,
                        inbox=[(0,) * (N_AGENTS - 1) for _ in range(N_AGENTS)])


def deliver_messages(outbox) -> list[tuple[int, ...]]:
    """Broadcast each agent's byte to every other agent (ascending sender order)."""
    values = [0] * N_AGENTS if outbox is None else [int(v) for v in outbox]
    if len(values) != N_AGENTS:
        raise MessageError(f"expected {N_AGENTS} outgoing messages, got {len(values)}")
    for v in values:
        if not 0 <= v <= 255:
            raise MessageError(f"message {v} is not an 8-bit value")
    return [tuple(values[j] for j in range(N_AGENTS) if j != i) for i in range(N_AGENTS)]


def is_valid_action(state: NetworkState, agent: int, action: BlueAction) -> bool:
    topo = state.topology
    owned = topo.agent_subnets[agent]
    if action.kind == ActionKind.SLEEP:
        return True
    if action.kind in HOST_ACTIONS:
        return (action.host is not None and 0 <= action.host < len(topo.hosts)
                and topo.hosts[action.host].subnet in owned)
    if action.link is None:
        return False
    link = tuple(sorted(action.link))
    return link in topo.links and (link[0] in owned or link[1] in owned)


def _link_open(state: NetworkState, a: int, b: int) -> bool:
    return a == b or (min(a, b), max(a, b)) not in state.blocked


def _reachable(state: NetworkState, src_subnet: int, dst_subnet: int) -> bool:
    if src_subnet == dst_subnet:
        return True
    pair = (min(src_subnet, dst_subnet), max(src_subnet, dst_subnet))
    return pair in state.topology.links and pair not in state.blocked


def _compromise(state: NetworkState, host: int, level: Compromise, newly: list[int]) -> None:
    hs = state.hosts[host]
    if hs.compromise == Compromise.CLEAN:
        newly.append(host)
        hs.last_compromise_step = state.t
    hs.compromise = max(hs.compromise, level)


def restore_host(state: NetworkState, host: int) -> None:
    hs = state.hosts[host]
    hs.compromise = Compromise.CLEAN
    hs.last_compromise_step = None
    hs.files = list(state.topology.hosts[host].benign_files)
    if state.red.phase[host] > Phase.DISCOVERED:
        state.red.phase[host] = Phase.DISCOVERED
    state.red.footholds.discard(host)


def _discover_subnet(state: NetworkState, subnet: int) -> None:
    state.red.discovered_subnets.add(subnet)
    for h in state.topology.subnets[subnet].hosts:
        if state.red.phase[h] == Phase.UNKNOWN:
            state.red.phase[h] = Phase.DISCOVERED


def red_entry(state: NetworkState, immune: set[int], newly: list[int], events: list[str]) -> None:
    """Phishing foothold on a clean workstation in the first zone."""
    red, cfg = state.red, state.config
    if red.footholds or state.t < cfg.red_entry_step:
        return
    rng = substream(state.seed, state.t, STREAM_ENTRY)
    if red.entered and rng.random() >= cfg.p_reentry:
        return
    topo = state.topology
    candidates = [h for s in topo.zones[0] for h in topo.subnets[s].hosts
                  if topo.hosts[h].role == Role.WORKSTATION
                  and state.hosts[h].compromise == Compromise.CLEAN and h not in immune]
    if not candidates:
        return
    host = candidates[int(rng.integers(len(candidates)))]
    red.entered = True
    red.phase[host] = Phase.EXPLOITED
    red.footholds.add(host)
    _compromise(state, host, Compromise.USER_ACCESS, newly)
    state.hosts[host].files.append(FileRecord(float(rng.uniform(0.7, 1.0)), False))
    _discover_subnet(state, topo.hosts[host].subnet)
    events.append(f"entry:{host}")


def red_eligible(state: NetworkState, foothold: int, immune: set[int]) -> list[tuple[str, int]]:
    topo, red = state.topology, state.red
    src = topo.hosts[foothold].subnet
    acts: list[tuple[str, int]] = []
    for sub in topo.adjacent(src):
        if sub not in red.discovered_subnets and _reachable(state, src, sub):
            acts.append(("discover", sub))
    reach = [src] + [s for s in topo.adjacent(src) if _reachable(state, src, s)]
    for sub in sorted(reach):
        for h in topo.subnets[sub].hosts:
            if h in immune:
                continue
            if red.phase[h] == Phase.DISCOVERED:
                acts.append(("scan", h))
            elif red.phase[h] == Phase.SCANNED:
                acts.append(("exploit", h))
    if foothold not in immune:
        if red.phase[foothold] == Phase.EXPLOITED:
            acts.append(("escalate", foothold))
        elif (red.phase[foothold] >= Phase.ESCALATED
              and topo.hosts[foothold].role == Role.OPERATIONAL_SERVER):
            acts.append(("impact", foothold))
    return acts


def red_step(state: NetworkState, immune: set[int] | None = None) -> dict:
    """Advance the active footholds by at most one action on one target each.

    At most ``red_actions_per_step`` footholds act per step, drawn uniformly.

    Returns the step's red activity: per-host detectable activity flags,
    decoy triggers, newly compromised hosts, impact count and event strings.
    """
    immune = immune or set()
    cfg, topo, red = state.config, state.topology, state.red
    activity = {"scan": set(), "exploit": set(), "decoy": set()}
    newly: list[int] = []
    events: list[str] = []
    impacts: list[int] = []
    red_entry(state, immune, newly, events)
    pick = substream(state.seed, state.t, STREAM_RED, len(topo.hosts))
    active = sorted(red.footholds)
    if len(active) > cfg.red_actions_per_step:
        chosen = pick.choice(len(active), size=cfg.red_actions_per_step, replace=False)
        active = [active[i] for i in sorted(chosen)]
    for foothold in active:
        if foothold not in red.footholds:
            continue
        acts = red_eligible(state, foothold, immune)
        if not acts:
            continue
        rng = substream(state.seed, state.t, STREAM_RED, foothold)
        kind, target = acts[int(rng.integers(len(acts)))]
        roll = rng.random()
        ok = False
        if kind == "discover":
            ok = roll < cfg.p_discover
            if ok:
                _discover_subnet(state, target)
        elif kind == "scan":
            activity["scan"].add(target)
            ok = roll < cfg.p_scan
            if ok:
                red.phase[target] = Phase.SCANNED
        elif kind == "exploit":
            hs = state.hosts[target]
            n_dec, n_real = len(hs.decoys), len(topo.hosts[target].services)
            if n_dec and rng.random() < n_dec / (n_dec + n_real):
                activity["decoy"].add(target)
                events.append(f"exploit:{foothold}->{target}:decoy")
                continue
            activity["exploit"].add(target)
            ok = roll < cfg.p_exploit
            if ok:
                red.phase[target] = Phase.EXPLOITED
                red.footholds.add(target)
                _compromise(state, target, Compromise.USER_ACCESS, newly)
                hs.files.append(FileRecord(float(rng.uniform(0.7, 1.0)), False))
        elif kind == "escalate":
            activity["exploit"].add(target)
            ok = roll < cfg.p_escalate
            if ok:
                red.phase[target] = Phase.ESCALATED
                _compromise(state, target, Compromise.ROOT_ACCESS, newly)
                state.hosts[target].files.append(FileRecord(float(rng.uniform(0.7, 1.0)), False))
        elif kind == "impact":
            activity["exploit"].add(target)
            ok = True
            red.phase[target] = Phase.IMPACTING
            impacts.append(target)
        events.append(f"{kind}:{foothold}->{target}:{'ok' if ok else 'fail'}")
    return {"activity": activity, "newly": newly, "impacts": impacts, "events": events}


def green_step(state: NetworkState) -> dict:
    """Each workstation runs one user task; failures are returned per host."""
    cfg, topo = state.config, state.topology
    local_fail: list[int] = []
    remote_blocked: list[int] = []
    for sub in topo.subnets:
        rng = substream(state.seed, state.t, STREAM_GREEN, sub.id)
        neighbours = topo.adjacent(sub.id)
        for h in sub.hosts:
            if topo.hosts[h].role != Role.WORKSTATION:
                continue
            if rng.random() < cfg.p_green_remote and neighbours:
                dst = neighbours[int(rng.integers(len(neighbours)))]
                if not _link_open(state, sub.id, dst):
                    remote_blocked.append(h)
            elif state.hosts[h].compromise != Compromise.CLEAN:
                local_fail.append(h)
    return {"local_fail": local_fail, "remote_blocked": remote_blocked}


def observe(state: NetworkState, agent: int, activity: dict | None = None,
            analysis: dict | None = None) -> LocalObservation:
    cfg, topo = state.config, state.topology
    activity = activity or {"scan": set(), "exploit": set(), "decoy": set()}
    rng = substream(state.seed, state.t, STREAM_OBSERVE, agent)
    views = []
    for h in topo.agent_hosts(agent):
        spec = topo.hosts[h]
        u = rng.random(4)
        scan = (h in activity["scan"] and u[0] < cfg.p_detect) or u[1] < cfg.p_false
        expl = (h in activity["exploit"] and u[2] < cfg.p_detect) or u[3] < cfg.p_false
        views.append(HostView(h, spec.subnet, spec.index, spec.role, spec.os, spec.services,
                              tuple(state.hosts[h].decoys), bool(scan), bool(expl),
                              h in activity["decoy"]))
    owned = set(topo.agent_subnets[agent])
    links = {pair: pair in state.blocked for pair in topo.agent_links(agent)}
    foreign = {}
    for a, b in links:
        for s in (a, b):
            if s not in owned:
                foreign[s] = topo.subnets[s].owner
    phase = min(2, 3 * state.t // cfg.horizon)
    return LocalObservation(agent, state.t, cfg.horizon, phase, tuple(topo.agent_subnets[agent]),
                            tuple(views), dict(analysis or {}), links, foreign,
                            state.inbox[agent])


def _empty_components() -> dict[str, float]:
    return {k: 0.0 for k in REWARD_COMPONENTS}


def step(state: NetworkState, actions, outbox=None) -> StepResult:
    """Advance ``state`` by one timestep in place."""
    cfg, topo = state.config, state.topology
    if len(actions) != N_AGENTS:
        raise ValueError(f"expected {N_AGENTS} actions, got {len(actions)}")
    inbox_next = deliver_messages(outbox)
    agent_comp = [_empty_components() for _ in range(N_AGENTS)]
    rejected = [False] * N_AGENTS
    analysis: list[dict] = [{} for _ in range(N_AGENTS)]
    restored: set[int] = set()
    restores: list[list] = []
    applied: list[str] = []

    for agent, action in enumerate(actions):
        if not is_valid_action(state, agent, action):
            rejected[agent] = True
            action = SLEEP
        applied.append(str(action))
        kind = action.kind
        if kind == ActionKind.ANALYZE:
            analysis[agent][action.host] = tuple(state.hosts[action.host].files)
            agent_comp[agent]["analyze"] += cfg.r_analyze
        elif kind == ActionKind.RESTORE:
            was = state.hosts[action.host].compromise != Compromise.CLEAN
            restores.append([action.host, bool(was)])
            restore_host(state, action.host)
            restored.add(action.host)
            agent_comp[agent]["restore"] += cfg.r_restore
        elif kind == ActionKind.DEPLOY_DECOY:
            hs = state.hosts[action.host]
            used = {s.kind for s in topo.hosts[action.host].services} | {s.kind for s in hs.decoys}
            free = [k for k in range(len(SERVICE_CATALOGUE)) if k not in used]
            if free and len(hs.decoys) < cfg.max_decoys:
                hs.decoys.append(Service(SERVICE_CATALOGUE[free[0]][1], free[0]))
        elif kind == ActionKind.BLOCK_TRAFFIC:
            state.blocked.add(tuple(sorted(action.link)))
        elif kind == ActionKind.ALLOW_TRAFFIC:
            state.blocked.discard(tuple(sorted(action.link)))

    red = red_step(state, immune=restored)
    green = green_step(state)

    for h in green["local_fail"]:
        agent_comp[topo.owner_of_host(h)]["green_local"] += cfg.r_green_local
    for h in green["remote_blocked"]:
        agent_comp[topo.owner_of_host(h)]["green_remote"] += cfg.r_green_remote
    for h in red["impacts"]:
        agent_comp[topo.owner_of_host(h)]["impact"] += cfg.r_impact
    counts = [0, 0, 0]
    for h, hs in enumerate(state.hosts):
        counts[hs.compromise] += 1
        if hs.compromise == Compromise.USER_ACCESS:
            agent_comp[topo.owner_of_host(h)]["user_access"] += cfg.r_user_access
        elif hs.compromise == Compromise.ROOT_ACCESS:
            agent_comp[topo.owner_of_host(h)]["root_access"] += cfg.r_root_access

    components = {k: float(np.sum([c[k] for c in agent_comp])) for k in REWARD_COMPONENTS}
    rewards = [float(np.sum(list(c.values()))) for c in agent_comp]
    truth = {
        "t": state.t, "n_hosts": len(state.hosts), "clean": counts[0], "user": counts[1],
        "root": counts[2], "restores": restores, "compromised": red["newly"],
        "impacts": len(red["impacts"]), "actions": applied,
        "compromise": [int(hs.compromise) for hs in state.hosts],
    }
    state.t += 1
    state.inbox = inbox_next
    obs = [observe(state, a, red["activity"], analysis[a]) for a in range(N_AGENTS)]
    truth["blocked"] = sorted(list(pair) for pair in state.blocked)
    truth["alerts"] = [[h.host for h in o.hosts if h.scan_alert or h.exploit_alert or h.decoy_alert]
                       for o in obs]
    return StepResult(obs, rewards, float(np.sum(list(components.values()))), components,
                      agent_comp, state.t >= cfg.horizon, rejected, red["events"], truth)


class ReplayLog:
    """Line-delimited JSON record of an episode, one line per step."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def append(self, result: StepResult) -> None:
        truth = result.truth
        rec = {
            "step": truth["t"], "actions": truth["actions"], "rejected": result.rejected,
            "reward": result.reward, "components": result.components,
            "red_events": result.red_events, "n_hosts": truth["n_hosts"],
            "clean": truth["clean"], "user": truth["user"], "root": truth["root"],
            "restores": truth["restores"], "compromised": truth["compromised"],
            "impacts": truth["impacts"], "blocked": truth["blocked"], "alerts": truth["alerts"],
            "done": result.done,
        }
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


class CyberDefenseEnv:
    """Stateful wrapper: ``reset(seed)`` then repeated ``step(actions)``."""

    def __init__(self, config: SimConfig | None = None):
        self.config = (config or SimConfig()).validate()
        self.state: NetworkState | None = None

    def reset(self, seed: int) -> list[LocalObservation]:
        self.state = initial_state(seed, self.config)
        return [observe(self.state, a) for a in range(N_AGENTS)]

    def step(self, actions, outbox=None) -> StepResult:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        return step(self.state, actions, outbox)
