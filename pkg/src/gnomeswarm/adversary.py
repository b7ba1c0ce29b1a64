"""Jokers, churn, and sanity enforcement for the synchronous engine.

A joker runs an honest shadow state and rewrites its outgoing announces
according to a scripted strategy.  Honest neighbors see only those announces.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

from . import protocol as pc
from .protocol import CONFUSED, UNAWARE, Announce, Awareness, Mode, Proposal
from .sim_sync import RunResult, Scenario, SyncEngine
from .topology import Topology, TopologyError

STRATEGIES = ("confuse", "fool", "trick", "backdate", "custom", "stubborn")


class ChurnError(TopologyError):
    pass


@dataclass(frozen=True)
class JokerScript:
    joker: int
    strategy: str
    inject_at: int = 0
    offset: int = 0  # backdating, in turns
    # custom: (turn, target, alpha token); target is "honest", "bogus" or a pid
    announces: tuple = ()

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.inject_at < 0:
            raise ValueError("inject_at must be >= 0")
        if self.strategy == "backdate" and self.offset < 0:
            raise ValueError("backdate offset must be >= 0")


class Joker:
    def __init__(self, script: JokerScript):
        self.script = script
        self.bogus: Proposal | None = None
        self.bogus_alpha = UNAWARE
        self.bogus_round = 0
        self.stubborn: dict[int, Awareness] = {}
        self.injected_turn: int | None = None

    def _make_bogus(self, engine, st):
        nominal = st.swarm_clock - (self.script.offset if self.script.strategy == "backdate" else 0)
        self.bogus = Proposal(engine.next_pid(), self.script.joker, nominal, engine.rank(self.script.joker),
                              b"bogus", st.round)
        engine.proposals[self.bogus.pid] = self.bogus
        self.bogus_alpha = pc.Radius(0)
        self.bogus_round = st.round
        self.injected_turn = engine.turn

    def outgoing(self, engine: SyncEngine, g: int, honest: list[Announce]) -> list[Announce]:
        s = self.script
        t = engine.turn
        st = engine.states[g]
        if s.strategy == "stubborn":
            return [Announce(g, pid, a, t, st.round, st.swarm_clock)
                    for pid, a in sorted(self.stubborn.items()) if a.is_aware]
        if t < s.inject_at:
            return honest
        if s.strategy in ("confuse", "trick", "backdate"):
            if self.bogus is None:
                self._make_bogus(engine, st)
            bogus = Announce(g, self.bogus.pid, self.bogus_alpha, t, self.bogus_round, st.swarm_clock)
            return [a for a in honest if a.pid is not None] + [bogus]
        if s.strategy == "fool":
            if self.injected_turn is None:
                self.injected_turn = t
            return [Announce(g, None, CONFUSED, t, st.round, st.swarm_clock)]
        # custom sequence
        out = [a for a in honest]
        for turn, target, tok in s.announces:
            if turn != t:
                continue
            alpha = Awareness.from_token(tok)
            if target == "honest":
                pid = next((a.pid for a in honest if a.pid is not None), None)
                if pid is None:
                    pid = next(iter(st.active), None)
            elif target == "bogus":
                if self.bogus is None:
                    self._make_bogus(engine, st)
                pid = self.bogus.pid
            else:
                pid = int(target)
            if alpha.is_confused:
                pid = None
            out = [a for a in out if a.pid != pid]
            if target == "bogus":
                out = [a for a in out if a.pid is None]
            out.append(Announce(g, pid, alpha, t, st.round, st.swarm_clock))
            if self.injected_turn is None:
                self.injected_turn = t
        return out

    def advance(self, engine: SyncEngine, g: int, st, heard, counted):
        if self.script.strategy == "stubborn":
            # never confused: tracks each pid on its own and ignores conflicts
            for a in heard:
                if a.pid is not None:
                    self.stubborn.setdefault(a.pid, UNAWARE)
            for pid, own in list(self.stubborn.items()):
                got = {a.sender: a.alpha for a in heard if a.pid == pid}
                self.stubborn[pid] = pc.alpha_step(own, [own] + [got.get(n, UNAWARE) for n in counted])
        if self.bogus is not None:
            got = {a.sender: a.alpha for a in heard if a.pid == self.bogus.pid}
            ents = [self.bogus_alpha] + [got.get(n, UNAWARE) for n in counted]
            ents = [e for e in ents if not e.is_confused]
            self.bogus_alpha = pc.alpha_step(self.bogus_alpha, ents)
        st2, _ = pc.step(st, heard, counted, engine.proposals, engine.cfg)
        return st2


def attach_joker(engine: SyncEngine, script: JokerScript) -> Joker:
    if not 0 <= script.joker < engine.topo.n:
        raise KeyError(f"unknown joker gnome {script.joker}")
    j = Joker(script)
    engine.jokers[script.joker] = j
    return j


def _with_joker(scenario: Scenario, script: JokerScript) -> Scenario:
    return replace(scenario, jokers=list(scenario.jokers) + [script])


def inject_confuse(scenario: Scenario, joker: int, t_c: int) -> Scenario:
    """Joker announces a competing proposal at turn ``t_c`` (phase 0)."""
    return _with_joker(scenario, JokerScript(joker, "confuse", t_c))


def inject_fool(scenario: Scenario, joker: int, t_f: int) -> Scenario:
    """Joker claims a confused friend from turn ``t_f`` (phase 1)."""
    return _with_joker(scenario, JokerScript(joker, "fool", t_f))


def inject_trick(scenario: Scenario, joker: int, t_t: int) -> Scenario:
    """Joker injects a competing proposal at turn ``t_t`` (phase 2)."""
    return _with_joker(scenario, JokerScript(joker, "trick", t_t))


def inject_backdate(scenario: Scenario, joker: int, t_c: int, offset: int) -> Scenario:
    """Competing proposal whose nominal turn is ``offset`` turns in the past."""
    return _with_joker(scenario, JokerScript(joker, "backdate", t_c, offset))


# --- partitions -------------------------------------------------------------

def baseline_of(scenario: Scenario) -> Scenario:
    """The same scenario with every joker behaving honestly."""
    return replace(scenario, jokers=[])


def state_signature(result: RunResult, turn: int) -> np.ndarray:
    """Per-gnome (awareness code, acted flag) at ``turn``."""
    tr = result.traces[min(turn, len(result.traces) - 1)]
    acted = np.zeros(len(tr.alpha), dtype=np.int64)
    for g, (pid, t) in result.acted.items():
        if t <= tr.turn:
            acted[g] = pid + 1
    return np.stack([tr.alpha.astype(np.int64), acted], axis=1)


def divergence(attacked: RunResult, baseline: RunResult, turn: int) -> set[int]:
    """Honest gnomes whose state at ``turn`` differs from the baseline run."""
    a = state_signature(attacked, turn)
    b = state_signature(baseline, turn)
    n = min(len(a), len(b))
    return {int(g) for g in np.flatnonzero((a[:n] != b[:n]).any(axis=1)) if g in attacked.honest}


def fooled_partition(result: RunResult, jokers=()) -> tuple[set[int], set[int]]:
    """(acting, fooled): honest gnomes that acted versus those that did not."""
    honest = set(result.honest) - set(jokers)
    acting = {g for g in honest if g in result.acted}
    return acting, honest - acting


def merry_resolve(views: dict, proposals: dict) -> dict:
    """Pick the proposal each gnome acts on in a merry swarm.

    ``views`` maps gnome -> {pid: turn the pid first reached radius d (or
    None)}.  The earliest wins; ties go to the smaller rank key.
    """
    out = {}
    for g, reached in views.items():
        cands = [(t, proposals[p].rank_key, p) for p, t in reached.items() if t is not None]
        out[g] = min(cands)[2] if cands else None
    return out


def merry_views(result: RunResult, d: int) -> dict:
    """Reconstruct per-gnome first-reach turns from an announce log."""
    if result.announces is None:
        raise ValueError("run with keep_announces=True")
    views: dict[int, dict] = {}
    for turn, anns in enumerate(result.announces):
        for a in anns:
            if a.pid is None:
                continue
            v = views.setdefault(a.sender, {})
            v.setdefault(a.pid, None)
            if v[a.pid] is None and pc.consensus_reached(a.alpha, d):
                v[a.pid] = turn
    return views


# --- churn -------------------------------------------------------------------

@dataclass
class ChurnScript:
    events: list  # (turn, gnome, "join", neighbors) or (turn, gnome, "leave")
    _applied: int = 0

    def apply_due(self, engine: SyncEngine) -> None:
        evs = sorted(self.events, key=lambda e: e[0])
        while self._applied < len(evs) and evs[self._applied][0] <= engine.turn:
            _apply_event(engine, evs[self._applied])
            self._applied += 1


def _present_topology(neighbors, present, d_bound) -> Topology:
    ids = [g for g, p in enumerate(present) if p]
    relabel = {g: i for i, g in enumerate(ids)}
    edges = [(relabel[g], relabel[h]) for g in ids for h in neighbors[g] if present[h] and g < h]
    return Topology.from_edges(len(ids), edges, d_bound)


def _simulate_events(neighbors, present, events, d_bound):
    neighbors = [list(x) for x in neighbors]
    present = list(present)
    for ev in sorted(events, key=lambda e: e[0]):
        _mutate(neighbors, present, ev)
        try:
            _present_topology(neighbors, present, d_bound)
        except TopologyError as exc:
            raise ChurnError(f"churn at turn {ev[0]} ({ev[2]} gnome {ev[1]}): {exc}") from None


def _mutate(neighbors, present, ev):
    g, kind = ev[1], ev[2]
    if kind == "leave":
        if g >= len(present) or not present[g]:
            raise ChurnError(f"gnome {g} is not in the swarm")
        present[g] = False
        for h in neighbors[g]:
            if g in neighbors[h]:
                neighbors[h].remove(g)
        neighbors[g] = []
    elif kind == "join":
        if g != len(present):
            raise ChurnError(f"joining gnome must take the next free id {len(present)}")
        nbrs = sorted(set(ev[3]))
        if not nbrs:
            raise ChurnError("joining gnome needs neighbors")
        present.append(True)
        neighbors.append(list(nbrs))
        for h in nbrs:
            if h >= len(present) - 1 or not present[h]:
                raise ChurnError(f"gnome {h} is not in the swarm")
            neighbors[h] = sorted(neighbors[h] + [g])
    else:
        raise ChurnError(f"unknown churn event {kind!r}")


def _apply_event(engine: SyncEngine, ev):
    g, kind = ev[1], ev[2]
    if kind == "join":
        rnd = max((engine.states[h].round for h in ev[3]), default=0)
        clock = max((engine.states[h].swarm_clock for h in ev[3]), default=0)
        _mutate(engine.neighbors, engine.present, ev)
        engine.states.append(pc.GnomeState(g, round=rnd, join_pending=True, swarm_clock=clock))
        engine.ignored.append(set())
        engine.join_round[g] = rnd
    else:
        _mutate(engine.neighbors, engine.present, ev)
    # revalidate the live swarm; scripts are prevalidated so this is a guard
    _present_topology(engine.neighbors, engine.present, engine.topo.d_bound)


def apply_churn(engine: SyncEngine, script: ChurnScript) -> SyncEngine:
    """Attach a churn script after checking every intermediate swarm keeps the diameter bound."""
    _simulate_events(engine.neighbors, engine.present, script.events, engine.topo.d_bound)
    engine.churn = script
    return engine


# --- sanity enforcement -----------------------------------------------------

def enforce_sanity(engine: SyncEngine, mode: str = "log") -> SyncEngine:
    if mode not in ("log", "expel"):
        raise ValueError(mode)
    engine.sanity_mode = mode
    return engine


def audit_announces(engine: SyncEngine, out: list[Announce]) -> None:
    """Every honest neighbor checks this turn's announces against its history."""
    t = engine.turn
    merry = engine.cfg.mode == Mode.MERRY
    prev_same = engine._prev.setdefault("same", {})
    prev_any = engine._prev.setdefault("any", {})
    for a in out:
        s = a.sender
        for g in engine.neighbors[s]:
            if g in engine.jokers or not engine.present[g] or engine.states[g].join_pending:
                continue
            if s in engine.ignored[g] or g not in engine.counted_neighbors(s) or s not in engine.counted_neighbors(g):
                continue
            sent = [x for x in engine._sent_full.get(g, ()) if x.round == a.round]
            if any(x.pid is None for x in sent):
                my_last = CONFUSED
            else:
                my_last = next((x.alpha for x in sent if x.pid == a.pid), UNAWARE)
            told = any(x.pid is None for x in sent)
            if engine.cfg.mode == Mode.PLAIN and a.pid is not None:
                told = told or any(x.pid is not None and x.pid != a.pid for x in sent)
            prev = prev_same.get((g, s, a.pid))
            if prev is None and not merry:
                prev = prev_any.get((g, s))
            key = (g, s, a.pid)
            old = engine._stall.get(key)
            if old is None or old[0] != a.alpha or (prev is not None and prev.round != a.round):
                engine._stall[key] = (a.alpha, t)
                elapsed = 0
            else:
                elapsed = t - old[1]
            switch_ok = False
            if prev is not None and prev.pid is not None and a.pid is not None and prev.pid != a.pid:
                pp, pa = engine.proposals.get(prev.pid), engine.proposals.get(a.pid)
                switch_ok = engine.cfg.mode == Mode.RANKED and pp is not None and pa is not None \
                    and pa.rank_key < pp.rank_key
            completed = prev is not None and pc.consensus_reached(prev.alpha, engine.d)
            if merry and a.pid is None:
                # a merry swarm never confuses: awareness fell below unaware
                rule = 1
            else:
                rule = pc.check_sanity(s, prev, a, my_last, elapsed, conflict_told=told,
                                       switch_ok=switch_ok, prev_completed=completed)
            if rule is not None:
                engine.violations.append((t, g, s, rule))
                if engine.sanity_mode == "expel":
                    engine.ignored[g].add(s)
                    engine.expulsions.append((t, g, s, f"rule{rule}"))
        for g in engine.neighbors[s]:
            prev_same[(g, s, a.pid)] = a
            prev_any[(g, s)] = a
    if merry:
        _audit_drops(engine, out)


def _audit_drops(engine: SyncEngine, out: list[Announce]) -> None:
    """Merry swarms track every pid until the round ends; silence on one is a backtrack."""
    now: dict[int, set] = {}
    for a in out:
        now.setdefault(a.sender, set()).add((a.round, a.pid))
    for s, sent in engine._sent_full.items():
        if not engine.present[s]:
            continue
        cur = now.get(s, set())
        rounds = {r for r, _ in cur}
        dropped = [a for a in sent if a.pid is not None and (a.round, a.pid) not in cur
                   and (not rounds or a.round in rounds)]
        if not dropped:
            continue
        for g in engine.neighbors[s]:
            if g in engine.jokers or not engine.present[g] or engine.states[g].join_pending:
                continue
            if s in engine.ignored[g] or g not in engine.counted_neighbors(s) or s not in engine.counted_neighbors(g):
                continue
            engine.violations.append((engine.turn, g, s, 1))
            if engine.sanity_mode == "expel":
                engine.ignored[g].add(s)
                engine.expulsions.append((engine.turn, g, s, "rule1"))


def violations_csv(violations) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["turn", "detector", "violator", "rule"])
    for row in violations:
        w.writerow(row)
    return buf.getvalue()


def audit_trace(result: RunResult, topo: Topology) -> list:
    """Vectorised rules 1-3 over a fault-free single-proposal trace.

    Equivalent to running :func:`check_sanity` on every neighbor pair each
    turn when every gnome follows the recurrence; used for large sweeps.
    """
    A = result.alpha_matrix().astype(np.int64)
    T = len(A)
    e = topo.edges()
    if not len(e):
        return []
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])  # dst checks src
    out = []
    for t in range(1, T):
        nxt, prv = A[t, src], A[t - 1, src]
        aware = nxt >= 0
        # rule 1: backtracking
        bad1 = aware & (prv >= 0) & (nxt < prv)
        # rule 2: same value over two elapsed turns
        bad2 = np.zeros_like(bad1)
        if t >= 2:
            bad2 = aware & (A[t - 2, src] == nxt) & (prv == nxt)
        # rule 3: more than one above what the detector announced last turn
        mine = A[t - 1, dst]
        bad3 = aware & (mine >= -1) & (nxt > mine + 1)
        for rule, bad in ((1, bad1), (2, bad2), (3, bad3)):
            for i in np.flatnonzero(bad & ~(bad1 if rule > 1 else False) & ~(bad2 if rule > 2 else False)):
                out.append((t, int(dst[i]), int(src[i]), rule))
    return out
