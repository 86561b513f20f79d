"""Seedable multi-subnet cyber-defense simulation."""
from .env import (
    HOST_ACTIONS, REWARD_COMPONENTS, SLEEP, TRAFFIC_ACTIONS, ActionKind, BlueAction, Compromise,
    CyberDefenseEnv, HostState, HostView, LocalObservation, MessageError, NetworkState, Phase,
    RedState, ReplayLog, StepResult, deliver_messages, green_step, initial_state, is_valid_action,
    observe, red_step, restore_host, step,
)
from .topology import (
    N_AGENTS, N_OS, N_SERVICE_KINDS, SERVICE_CATALOGUE, ConfigError, FileRecord, HostSpec, Role,
    Service, SimConfig, SubnetSpec, Topology, generate_topology,
)
