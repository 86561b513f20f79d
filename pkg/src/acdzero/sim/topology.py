"""Seeded network layouts: zones, subnets, hosts, services and links."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields

import numpy as np


class ConfigError(ValueError):
    pass


class Role(enum.IntEnum):
    WORKSTATION = 0
    SERVER = 1
    OPERATIONAL_SERVER = 2


N_ZONES = 4
N_AGENTS = 5
N_OS = 4
# (kind name, default port); index is the service kind id
SERVICE_CATALOGUE = (
    ("ssh", 22), ("smtp", 25), ("http", 80), ("https", 443),
    ("smb", 445), ("mysql", 3306), ("rdp", 3389), ("http-alt", 8080),
)
N_SERVICE_KINDS = len(SERVICE_CATALOGUE)
EPHEMERAL_LOW = 49152

# rng stream ids
STREAM_TOPOLOGY, STREAM_RED, STREAM_GREEN, STREAM_OBSERVE, STREAM_ENTRY = range(5)


def substream(seed: int, step: int, stream: int, entity: int = 0) -> np.random.Generator:
    """Independent generator keyed by (seed, step, stream, entity)."""
    return np.random.default_rng([seed & 0xFFFFFFFF, step, stream, entity])


@dataclass
class SimConfig:
    horizon: int = 500
    min_subnets_per_zone: int = 2
    max_subnets_per_zone: int = 2
    router_subnets: int = 2
    min_hosts: int = 5
    max_hosts: int = 15
    min_services: int = 1
    max_services: int = 5
    max_decoys: int = 2
    p_detect: float = 0.9
    p_false: float = 0.02
    p_discover: float = 0.8
    p_scan: float = 0.75
    p_exploit: float = 0.6
    p_escalate: float = 0.5
    red_actions_per_step: int = 1
    red_entry_step: int = 1
    p_reentry: float = 0.1
    p_green_remote: float = 0.5
    r_user_access: float = -0.1
    r_root_access: float = -0.3
    r_impact: float = -2.0
    r_restore: float = -1.0
    r_green_remote: float = -0.1
    r_green_local: float = -0.2
    r_analyze: float = -0.05

    def validate(self) -> "SimConfig":
        pairs = [("min_subnets_per_zone", "max_subnets_per_zone"), ("min_hosts", "max_hosts"),
                 ("min_services", "max_services")]
        for lo, hi in pairs:
            if getattr(self, lo) > getattr(self, hi):
                raise ConfigError(f"{lo}={getattr(self, lo)} exceeds {hi}={getattr(self, hi)}")
        if not 1 <= self.min_subnets_per_zone <= self.max_subnets_per_zone <= 2:
            raise ConfigError("subnets per zone must lie in [1, 2]")
        if self.min_hosts < 2:
            raise ConfigError("each subnet needs at least 2 hosts")
        if self.min_services < 1 or self.max_services > N_SERVICE_KINDS:
            raise ConfigError(f"services per host must lie in [1, {N_SERVICE_KINDS}]")
        if self.red_actions_per_step < 1:
            raise ConfigError("red needs at least one action per step")
        if self.router_subnets < 1:
            raise ConfigError("need at least one router subnet")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        for f in fields(self):
            if f.name.startswith("p_") and not 0.0 <= getattr(self, f.name) <= 1.0:
                raise ConfigError(f"{f.name} must be a probability")
        return self


@dataclass(frozen=True)
class Service:
    port: int
    kind: int

    @property
    def default(self) -> bool:
        return SERVICE_CATALOGUE[self.kind][1] == self.port

    @property
    def ephemeral(self) -> bool:
        return self.port >= EPHEMERAL_LOW


@dataclass(frozen=True)
class FileRecord:
    density: float
    signed: bool


@dataclass
class HostSpec:
    id: int
    subnet: int
    index: int
    role: Role
    os: int
    services: tuple[Service, ...]
    benign_files: tuple[FileRecord, ...]

    @property
    def name(self) -> str:
        return f"s{self.subnet}h{self.index}"


@dataclass
class SubnetSpec:
    id: int
    zone: int | None  # None for cross-zone router subnets
    owner: int
    hosts: list[int] = field(default_factory=list)


@dataclass
class Topology:
    seed: int
    zones: list[list[int]]
    subnets: list[SubnetSpec]
    hosts: list[HostSpec]
    links: list[tuple[int, int]]  # sorted pairs, a < b
    agent_subnets: list[list[int]]

    def adjacent(self, subnet: int) -> list[int]:
        out = []
        for a, b in self.links:
            if a == subnet:
                out.append(b)
            elif b == subnet:
                out.append(a)
        return sorted(out)

    def owner_of_host(self, host: int) -> int:
        return self.subnets[self.hosts[host].subnet].owner

    def agent_hosts(self, agent: int) -> list[int]:
        return [h for s in self.agent_subnets[agent] for h in self.subnets[s].hosts]

    def agent_links(self, agent: int) -> list[tuple[int, int]]:
        owned = set(self.agent_subnets[agent])
        return [pair for pair in self.links if pair[0] in owned or pair[1] in owned]

    def is_connected(self) -> bool:
        seen, frontier = {0}, [0]
        while frontier:
            s = frontier.pop()
            for t in self.adjacent(s):
                if t not in seen:
                    seen.add(t)
                    frontier.append(t)
        return len(seen) == len(self.subnets)


def _sample_port(rng: np.random.Generator, kind: int) -> int:
    u = rng.random()
    if u < 0.7:
        return SERVICE_CATALOGUE[kind][1]
    if u < 0.85:
        return int(rng.integers(EPHEMERAL_LOW, 65536))
    return int(rng.integers(1024, EPHEMERAL_LOW))


def generate_topology(seed: int, config: SimConfig) -> Topology:
    """Sample a layout.  Zone i belongs to agent i (0-3); agent 4 owns the routers."""
    config.validate()
    rng = substream(seed, 0, STREAM_TOPOLOGY)
    subnets: list[SubnetSpec] = []
    zones: list[list[int]] = []
    for z in range(N_ZONES):
        n = int(rng.integers(config.min_subnets_per_zone, config.max_subnets_per_zone + 1))
        ids = []
        for _ in range(n):
            subnets.append(SubnetSpec(id=len(subnets), zone=z, owner=z))
            ids.append(subnets[-1].id)
        zones.append(ids)
    routers = []
    for _ in range(config.router_subnets):
        subnets.append(SubnetSpec(id=len(subnets), zone=None, owner=N_AGENTS - 1))
        routers.append(subnets[-1].id)

    links = set()
    for ids in zones:
        for a, b in zip(ids, ids[1:]):
            links.add((a, b))
        for r in routers:
            links.add((ids[0], r))
    for i, a in enumerate(routers):
        for b in routers[i + 1:]:
            links.add((a, b))

    hosts: list[HostSpec] = []
    for sub in subnets:
        n_hosts = int(rng.integers(config.min_hosts, config.max_hosts + 1))
        for idx in range(n_hosts):
            if idx == 0:
                # routers carry no operational servers
                role = Role.OPERATIONAL_SERVER if sub.zone is not None else Role.SERVER
            elif idx == 1:
                role = Role.SERVER
            else:
                role = Role.WORKSTATION
            n_services = int(rng.integers(config.min_services, config.max_services + 1))
            kinds = sorted(rng.choice(N_SERVICE_KINDS, size=n_services, replace=False).tolist())
            services = tuple(Service(_sample_port(rng, k), k) for k in kinds)
            files = tuple(
                FileRecord(float(rng.uniform(0.0, 0.4)), bool(rng.random() < 0.8))
                for _ in range(int(rng.integers(0, 3)))
            )
            hosts.append(HostSpec(len(hosts), sub.id, idx, role, int(rng.integers(N_OS)),
                                  services, files))
            sub.hosts.append(hosts[-1].id)

    agent_subnets = [[s.id for s in subnets if s.owner == a] for a in range(N_AGENTS)]
    return Topology(seed, zones, subnets, hosts, sorted(links), agent_subnets)
