"""Turn-based simulation.

Two engines share one trace format:

* :func:`run_fast` -- vectorised recurrence for fault-free single-proposer
  plain rounds; handles million-gnome swarms.
* :class:`SyncEngine` -- per-gnome state machines with jokers, churn,
  sanity enforcement, ranked and merry modes.

:func:`oracle_alpha` iterates the global recurrence directly on adjacency
lists and shares no code with either engine.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import protocol as pc
from .protocol import (CONFUSED_CODE, UNAWARE_CODE, Announce, Awareness, GnomeState, Mode, Proposal,
                       StepConfig)
from .topology import Topology

log = logging.getLogger(__name__)


@dataclass
class TurnTrace:
    turn: int
    alpha: np.ndarray  # awareness codes: -2 confused, -1 unaware, k radius
    messages_sent: int
    bottom_code: int
    bottom_size: int
    consensus_turn: int | None = None

    @property
    def bottom(self) -> Awareness:
        return Awareness.from_code(self.bottom_code)

    @property
    def bottom_value(self) -> float:
        return self.bottom.value()

    def awareness(self, g: int) -> Awareness:
        return Awareness.from_code(int(self.alpha[g]))


def _trace_row(t, alpha, msgs, mask=None):
    vals = alpha if mask is None else alpha[mask]
    b = int(vals.min())
    return TurnTrace(t, alpha, int(msgs), b, int((vals == b).sum()))


@dataclass
class Scenario:
    topology: Topology
    proposers: list = field(default_factory=list)  # (gnome, start_turn, payload)
    jokers: list = field(default_factory=list)  # JokerScript
    churn: object = None  # ChurnScript
    mode: Mode = Mode.PLAIN
    max_turns: int | None = None
    d: int | None = None
    seed: int = 0
    ranks: dict | None = None
    retry: bool = False
    sanity: str | None = None  # None, "log", "expel"
    backdate_guard: bool = False
    confusion_timeout: int | None = None
    stop_at_consensus: bool = True

    @property
    def threshold(self) -> int:
        return self.topology.d_bound if self.d is None else self.d

    @property
    def turn_limit(self) -> int:
        if self.max_turns is not None:
            return self.max_turns
        # a retried round may start after a full confusion timeout
        return (8 if self.retry else 4) * self.threshold + 4

    @property
    def fault_free_single(self) -> bool:
        return (len(self.proposers) == 1 and not self.jokers and self.churn is None
                and self.mode == Mode.PLAIN and self.sanity is None and not self.backdate_guard)


@dataclass
class RunResult:
    traces: list
    outcome: str  # "consensus", "confused", "timeout"
    consensus_turn: int | None
    acted: dict = field(default_factory=dict)  # gnome -> (pid, turn)
    proposals: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)  # (turn, detector, violator, rule)
    expulsions: list = field(default_factory=list)  # (turn, detector, violator, reason)
    rounds: list = field(default_factory=list)  # (round, start_turn, consensus_turn or None)
    d: int = 0
    honest: frozenset = frozenset()
    announces: list | None = None  # per turn lists, kept when requested

    @property
    def total_messages(self) -> int:
        return sum(t.messages_sent for t in self.traces)

    @property
    def max_spread(self) -> int:
        best = 0
        for t in self.traces:
            a = t.alpha[t.alpha >= 0]
            if len(a) == len(t.alpha) and len(a):
                best = max(best, int(a.max() - a.min()))
        return best

    def alpha_matrix(self) -> np.ndarray:
        return np.stack([t.alpha for t in self.traces])


class TurnLimitExceeded(RuntimeError):
    def __init__(self, result):
        super().__init__(f"no termination within {len(result.traces) - 1} turns")
        self.result = result


# --- oracle --------------------------------------------------------------

def oracle_series(topo: Topology, proposer: int, turns: int) -> list[list[int]]:
    """Awareness codes for turns 0..turns-1 by iterating the global recurrence."""
    adj = [[g] + list(topo.adjacency_lists[g]) for g in range(topo.n)]
    a = [-1] * topo.n
    a[proposer] = 0
    out = []
    for _ in range(turns):
        out.append(a)
        nxt = []
        for nb in adj:
            vals = [a[h] for h in nb]
            nxt.append(1 + min(vals) if max(vals) >= 0 else -1)
        a = nxt
    return out


def oracle_alpha(topo: Topology, proposer: int, t: int) -> dict[int, Awareness]:
    """Awareness of every gnome after ``t`` turns."""
    a = oracle_series(topo, proposer, t + 1)[-1]
    return {g: (pc.UNAWARE if v < 0 else pc.Radius(v)) for g, v in enumerate(a)}


# --- vectorised engine -----------------------------------------------------

def iter_fast(topo: Topology, proposer: int, d: int, max_turns: int,
              stop_at_consensus: bool = True) -> Iterator[TurnTrace]:
    """Yield one TurnTrace per turn without keeping history."""
    indptr, indices = topo.closed_csr
    starts = indptr[:-1]
    deg = topo.degrees
    alpha = np.full(topo.n, UNAWARE_CODE, dtype=np.int32)
    alpha[proposer] = 0
    consensus = None
    msgs = 0
    t = 0
    while True:
        tr = _trace_row(t, alpha, msgs)
        done = consensus is None and bool((alpha >= d).all())
        if done:
            consensus = t
        tr.consensus_turn = consensus
        yield tr
        if (consensus is not None and t >= consensus + 1 and stop_at_consensus) or t >= max_turns:
            return
        # messages sent on this turn by every aware gnome to each neighbor
        msgs = int(deg[alpha >= 0].sum())
        gathered = alpha[indices]
        lo = np.minimum.reduceat(gathered, starts)
        hi = np.maximum.reduceat(gathered, starts)
        new = np.where(hi >= 0, lo + 1, UNAWARE_CODE).astype(np.int32)
        alpha = np.maximum(new, alpha)
        t += 1


def run_fast(topo: Topology, proposer: int, d: int | None = None, max_turns: int | None = None,
             stop_at_consensus: bool = True) -> RunResult:
    d = topo.d_bound if d is None else d
    max_turns = 4 * d + 4 if max_turns is None else max_turns
    traces = list(iter_fast(topo, proposer, d, max_turns, stop_at_consensus))
    ct = traces[-1].consensus_turn
    _check_simultaneity(traces, d, ct)
    acted = {}
    if ct is not None:
        acted = {g: (1, ct) for g in range(topo.n)}
    # pid 1, as the object engine numbers its first proposal
    return RunResult(traces, "consensus" if ct is not None else "timeout", ct, acted=acted, d=d,
                     proposals={1: Proposal(1, proposer, 0, proposer)},
                     honest=frozenset(range(topo.n)), rounds=[(0, 0, ct)])


def _check_simultaneity(traces, d, ct):
    if ct is None:
        return
    for tr in traces[:ct]:
        if (tr.alpha >= d).any():
            raise AssertionError(f"gnome reached radius {d} before the consensus turn {ct}")


# --- object engine -----------------------------------------------------------

class SyncEngine:
    """Lockstep engine over per-gnome protocol states.

    Turn ``t+1`` reads only the announces emitted on turn ``t``.
    """

    def __init__(self, scenario: Scenario, keep_announces: bool = False):
        self.sc = scenario
        self.topo = scenario.topology
        self.d = scenario.threshold
        self.cfg = StepConfig(self.d, Mode(scenario.mode), scenario.confusion_timeout, scenario.backdate_guard)
        n = self.topo.n
        self.ranks = dict(scenario.ranks or {})
        self.states = [GnomeState(g) for g in range(n)]
        self.neighbors = [list(x) for x in self.topo.adjacency_lists]
        self.present = [True] * n
        self.join_round: dict[int, int] = {}
        self.ignored: list[set] = [set() for _ in range(n)]  # per detector: expelled neighbors
        self.proposals: dict[int, Proposal] = {}
        self.turn = 0
        self.outbox: list[Announce] = []
        self.jokers = {}
        self.churn = None
        self.sanity_mode = scenario.sanity
        self.violations = []
        self.expulsions = []
        self.acted: dict[int, tuple[int, int]] = {}
        self.keep_announces = keep_announces
        self.announce_log = [] if keep_announces else None
        self.pending_proposals = sorted(scenario.proposers, key=lambda x: x[1])
        self.retry_queue: list[tuple[int, bytes]] = []
        self.rejected: list = []
        self.round_log: dict[int, list] = {}
        self._pid = 0
        self._sent_full: dict[int, list] = {}  # sender -> announces sent last turn
        self._stall: dict = {}  # (detector, sender, pid) -> (alpha, since_turn)
        self._prev: dict = {}  # (detector, sender) -> last Announce
        from . import adversary  # cycle-free at call time
        for js in scenario.jokers:
            adversary.attach_joker(self, js)
        if scenario.churn is not None:
            adversary.apply_churn(self, scenario.churn)

    # helpers --------------------------------------------------------------
    def next_pid(self) -> int:
        self._pid += 1
        return self._pid

    def rank(self, g: int) -> int:
        return self.ranks.get(g, g)

    @property
    def honest(self) -> list[int]:
        return [g for g in range(len(self.states)) if g not in self.jokers and self.present[g]]

    def counted_neighbors(self, g: int) -> list[int]:
        out = []
        for h in self.neighbors[g]:
            if not self.present[h] or h in self.ignored[g]:
                continue
            jr = self.join_round.get(h)
            if jr is not None and self.states[g].round <= jr:
                continue
            out.append(h)
        return out

    def propose(self, g: int, payload: bytes = b"", nominal_turn: int | None = None) -> Proposal:
        st = self.states[g]
        st2, ann, prop = pc.propose(st, payload, self.d, rank=self.rank(g), pid=self.next_pid(),
                                    nominal_turn=nominal_turn, merry=self.cfg.mode == Mode.MERRY)
        self.states[g] = st2
        self.proposals[prop.pid] = prop
        self.round_log.setdefault(prop.round, [self.turn, None])
        if st2.acted is not None:
            self._record_act(g, st2.acted)
        return prop

    def _record_act(self, g, pid):
        if g not in self.acted and g not in self.jokers:
            self.acted[g] = (pid, self.turn)

    # turn mechanics -------------------------------------------------------
    def _emit(self) -> list[Announce]:
        out = []
        for g, st in enumerate(self.states):
            if not self.present[g]:
                continue
            honest = pc.announces_of(st, self.turn)
            if g in self.jokers:
                honest = self.jokers[g].outgoing(self, g, honest)
            out.extend(honest)
        return out

    def _inject_proposals(self):
        while self.pending_proposals and self.pending_proposals[0][1] <= self.turn:
            g, _, payload = self.pending_proposals.pop(0)
            try:
                self.propose(g, payload if isinstance(payload, bytes) else str(payload).encode())
            except pc.ProtocolError as exc:
                log.info("turn %d: gnome %d cannot propose: %s", self.turn, g, exc)
                self.rejected.append((self.turn, g, str(exc)))
        keep = []
        for g, payload in self.retry_queue:
            st = self.states[g]
            if not st.confused and not st.busy and self.present[g]:
                self.propose(g, payload)
            else:
                keep.append((g, payload))
        self.retry_queue = keep

    def snapshot(self, msgs: int) -> TurnTrace:
        n = len(self.states)
        alpha = np.full(n, UNAWARE_CODE, dtype=np.int32)
        for g, st in enumerate(self.states):
            if st.confused:
                alpha[g] = CONFUSED_CODE
            elif st.active:
                alpha[g] = max(a.code for a in st.active.values())
        return _trace_row(self.turn, alpha, msgs)

    def step(self) -> int:
        """Emit this turn's announces and advance every gnome to the next turn."""
        out = self._emit()
        if self.announce_log is not None:
            self.announce_log.append(out)
        inbox: dict[int, list[Announce]] = {}
        msgs = 0
        for a in out:
            if a.sender not in self.jokers:
                msgs += len(self.counted_neighbors(a.sender)) if self.present[a.sender] else 0
            else:
                msgs += len(self.neighbors[a.sender])
            for h in self.neighbors[a.sender]:
                inbox.setdefault(h, []).append(a)
        if self.sanity_mode:
            self._audit(out)
        new_states = list(self.states)
        for g, st in enumerate(self.states):
            if not self.present[g]:
                continue
            counted = set(self.counted_neighbors(g))
            heard = [a for a in inbox.get(g, ()) if a.sender in counted]
            if g in self.jokers:
                new_states[g] = self.jokers[g].advance(self, g, st, heard, sorted(counted))
                continue
            st2, ev = pc.step(st, heard, sorted(counted), self.proposals, self.cfg)
            for pid, proposer in ev.implausible:
                if proposer in counted or proposer in self.neighbors[g]:
                    if proposer not in self.ignored[g]:
                        self.ignored[g].add(proposer)
                        self.expulsions.append((self.turn + 1, g, proposer, "backdate"))
            new_states[g] = st2
        self.states = new_states
        self.turn += 1
        for g, st in enumerate(self.states):
            if st.acted is not None and g not in self.acted and g not in self.jokers:
                self.acted[g] = (st.acted, self.turn)
        self._sent_full = {}
        for a in out:
            self._sent_full.setdefault(a.sender, []).append(a)
        return msgs

    def _audit(self, out: list[Announce]):
        from .adversary import audit_announces
        audit_announces(self, out)

    # driver -----------------------------------------------------------------
    def run(self) -> RunResult:
        limit = self.sc.turn_limit
        traces = []
        msgs = 0
        consensus_turn = None
        outcome = "timeout"
        confirm_left = None
        while True:
            if self.churn is not None:
                self.churn.apply_due(self)
            self._inject_proposals()
            tr = self.snapshot(msgs)
            traces.append(tr)
            honest = self.honest
            everyone = [g for g in honest if not self.states[g].join_pending]
            if consensus_turn is None and everyone and all(g in self.acted for g in everyone):
                # consensus of the latest round only counts if unanimous
                pids = {self.acted[g][0] for g in everyone}
                turns = {self.acted[g][1] for g in everyone}
                if len(pids) == 1 and len(turns) == 1:
                    consensus_turn = turns.pop()
                    outcome = "consensus"
                    confirm_left = 1
            tr.consensus_turn = consensus_turn
            if confirm_left is not None and self.sc.stop_at_consensus:
                if confirm_left == 0:
                    break
                confirm_left -= 1
            if (not self.sc.retry and consensus_turn is None and everyone
                    and all(self.states[g].confused for g in everyone) and self.sc.stop_at_consensus):
                outcome = "confused"
                break
            if self.turn >= limit:
                if consensus_turn is None and any(self.states[g].confused for g in everyone):
                    outcome = "confused" if not self.sc.retry else "timeout"
                break
            for g, st in enumerate(self.states):
                if self.sc.retry and g in {p[0] for p in self.sc.proposers} and st.confused:
                    if all(q[0] != g for q in self.retry_queue):
                        payload = next(p[2] for p in self.sc.proposers if p[0] == g)
                        self.retry_queue.append((g, payload if isinstance(payload, bytes) else str(payload).encode()))
            msgs = self.step()
        rounds = []
        for rnd, (start, _) in sorted(self.round_log.items()):
            acts = [t for (pid, t) in self.acted.values() if self.proposals[pid].round == rnd]
            rounds.append((rnd, start, max(acts) if acts and len(acts) == len(self.honest) else None))
        return RunResult(traces, outcome, consensus_turn, acted=dict(self.acted), proposals=dict(self.proposals),
                         violations=list(self.violations), expulsions=list(self.expulsions), rounds=rounds,
                         d=self.d, honest=frozenset(self.honest), announces=self.announce_log)


def run(scenario: Scenario, engine: str = "auto", keep_announces: bool = False) -> RunResult:
    """Execute a scenario.  Fault-free single-proposer plain runs take the vectorised path."""
    if engine not in ("auto", "fast", "object"):
        raise ValueError(engine)
    if engine == "fast" or (engine == "auto" and scenario.fault_free_single and not keep_announces):
        if not scenario.fault_free_single:
            raise ValueError("fast engine handles fault-free single-proposer plain runs only")
        g, start, payload = scenario.proposers[0]
        res = run_fast(scenario.topology, g, scenario.threshold, scenario.turn_limit,
                       scenario.stop_at_consensus)
        res.proposals = {1: Proposal(1, g, start, (scenario.ranks or {}).get(g, g), payload)}
        if start:
            res = _shift(res, start)
        return res
    return SyncEngine(scenario, keep_announces=keep_announces).run()


def _shift(res: RunResult, start: int) -> RunResult:
    n = len(res.traces[0].alpha)
    pre = [_trace_row(t, np.full(n, UNAWARE_CODE, np.int32), 0) for t in range(start)]
    for tr in res.traces:
        tr.turn += start
        if tr.consensus_turn is not None:
            tr.consensus_turn += start
    ct = None if res.consensus_turn is None else res.consensus_turn + start
    return replace(res, traces=pre + res.traces, consensus_turn=ct,
                   acted={g: (p, t + start) for g, (p, t) in res.acted.items()})


# --- metrics ---------------------------------------------------------------

def histogram_columns(d: int) -> list[str]:
    return (["turn", "pct_confused", "pct_unaware"] + [f"pct_alpha_{k}" for k in range(d)]
            + ["pct_alpha_ge_d", "bottom_count"])


def histogram_row(alpha: np.ndarray, d: int) -> list[float]:
    """Percentages per awareness bucket; radii at or above d share one bucket."""
    n = len(alpha)
    counts = [int((alpha == CONFUSED_CODE).sum()), int((alpha == UNAWARE_CODE).sum())]
    aware = alpha[alpha >= 0]
    bc = np.bincount(np.minimum(aware, d), minlength=d + 1) if len(aware) else np.zeros(d + 1, int)
    counts += bc.tolist()
    return [100.0 * c / n for c in counts]


def metrics(traces: Sequence[TurnTrace], d: int) -> list[dict]:
    if not traces:
        raise ValueError("empty trace")
    rows = []
    cum = 0
    for tr in traces:
        cum += tr.messages_sent
        pct = histogram_row(tr.alpha, d)
        rows.append({"turn": tr.turn, "histogram": pct, "bottom_count": tr.bottom_size,
                     "bottom_value": tr.bottom.token(), "cumulative_messages": cum})
    return rows


def format_histogram_csv(rows: list[dict], d: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(histogram_columns(d))
    for r in rows:
        w.writerow([r["turn"]] + [f"{p:.6f}" for p in r["histogram"]] + [r["bottom_count"]])
    return buf.getvalue()


def summary_json(result: RunResult, n: int) -> str:
    rows = metrics(result.traces, result.d)
    doc = {
        "n": n,
        "d": result.d,
        "outcome": result.outcome,
        "consensus_turn": result.consensus_turn,
        "total_messages": result.total_messages,
        "max_spread": result.max_spread,
        "columns": histogram_columns(result.d),
        "turns": [[r["turn"]] + [round(p, 6) for p in r["histogram"]] + [r["bottom_count"]] for r in rows],
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_trace_header(fh, n: int, d: int) -> None:
    fh.write(f"# n={n} d={d}\n")
    fh.write("turn,gnome,alpha\n")


def write_trace_turn(fh, tr: TurnTrace) -> None:
    tokens = np.where(tr.alpha == CONFUSED_CODE, "C",
                      np.where(tr.alpha == UNAWARE_CODE, "U", tr.alpha.astype(str)))
    g = np.arange(len(tr.alpha)).astype(str)
    lines = np.char.add(np.char.add(np.char.add(f"{tr.turn},", g), ","), tokens)
    fh.write("\n".join(lines.tolist()))
    fh.write("\n")


def read_trace(fh) -> tuple[int, int, list[tuple[int, np.ndarray]]]:
    """Parse a trace CSV back into per-turn awareness code arrays."""
    first = fh.readline()
    if not first.startswith("#"):
        raise ValueError("trace file lacks '# n=.. d=..' header")
    meta = dict(kv.split("=") for kv in first[1:].split())
    n, d = int(meta["n"]), int(meta["d"])
    if fh.readline().strip() != "turn,gnome,alpha":
        raise ValueError("trace file lacks column header")
    turns: dict[int, np.ndarray] = {}
    for lineno, line in enumerate(fh, 3):
        line = line.strip()
        if not line:
            continue
        try:
            t, g, a = line.split(",")
            t, g = int(t), int(g)
            code = CONFUSED_CODE if a == "C" else UNAWARE_CODE if a == "U" else int(a)
        except ValueError:
            raise ValueError(f"line {lineno}: malformed trace row {line!r}") from None
        if not 0 <= g < n:
            raise ValueError(f"line {lineno}: gnome {g} out of range")
        arr = turns.get(t)
        if arr is None:
            arr = turns[t] = np.full(n, UNAWARE_CODE - 100, dtype=np.int32)
        arr[g] = code
    out = []
    for t in sorted(turns):
        if (turns[t] == UNAWARE_CODE - 100).any():
            raise ValueError(f"turn {t} is missing gnomes")
        out.append((t, turns[t]))
    return n, d, out


def histogram_from_trace(fh) -> str:
    n, d, arrays = read_trace(fh)
    rows = []
    for t, a in arrays:
        b = int(a.min())
        rows.append({"turn": t, "histogram": histogram_row(a, d), "bottom_count": int((a == b).sum())})
    return format_histogram_csv(rows, d)
