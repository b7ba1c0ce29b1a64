"""Leaderless swarm consensus by min-plus-one awareness gossip."""
from .protocol import (CONFUSED, UNAWARE, Announce, Awareness, GnomeState, Mode, Proposal, Radius,
                       alpha_step, backdate_check, check_sanity, clock_step, consensus_reached,
                       on_conflict, order_proposals, phase_of, propose)
from .sim_sync import RunResult, Scenario, SyncEngine, TurnTrace, metrics, oracle_alpha, run, run_fast
from .topology import (Topology, TopologyError, diameter, eccentricity, generate, k_neighborhood, load,
                       loads, save)

__version__ = "0.1.0"
