"""Engine-independent gnome state machine.

Awareness is the radius of the neighborhood a gnome knows to be aware of a
proposal.  It is totally ordered ``Confused < Unaware < Radius(0) < ...``.
Engines call :func:`step` once per gnome per turn with the announces heard on
the previous turn; everything here is a pure function of its inputs.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

CONFUSED_CODE = -2
UNAWARE_CODE = -1


@dataclass(frozen=True, order=True)
class Awareness:
    tier: int  # 0 confused, 1 unaware, 2 aware
    radius: int = 0

    @staticmethod
    def of(k: int) -> "Awareness":
        if k < 0:
            raise ValueError("radius must be >= 0")
        return Awareness(2, int(k))

    @property
    def is_confused(self) -> bool:
        return self.tier == 0

    @property
    def is_unaware(self) -> bool:
        return self.tier == 1

    @property
    def is_aware(self) -> bool:
        return self.tier == 2

    def value(self) -> float:
        """Numeric reading: -inf, -1, or the radius."""
        if self.tier == 0:
            return float("-inf")
        return -1 if self.tier == 1 else self.radius

    @property
    def code(self) -> int:
        """Compact integer encoding used by trace arrays."""
        if self.tier == 0:
            return CONFUSED_CODE
        return UNAWARE_CODE if self.tier == 1 else self.radius

    @staticmethod
    def from_code(code: int) -> "Awareness":
        if code == CONFUSED_CODE:
            return CONFUSED
        if code == UNAWARE_CODE:
            return UNAWARE
        return Awareness(2, int(code))

    def token(self) -> str:
        return "C" if self.tier == 0 else "U" if self.tier == 1 else str(self.radius)

    @staticmethod
    def from_token(tok: str) -> "Awareness":
        tok = tok.strip()
        if tok == "C":
            return CONFUSED
        if tok == "U":
            return UNAWARE
        return Awareness.of(int(tok))

    def __repr__(self):
        return {0: "Confused", 1: "Unaware"}.get(self.tier, f"Radius({self.radius})")


CONFUSED = Awareness(0)
UNAWARE = Awareness(1)


def Radius(k: int) -> Awareness:
    return Awareness.of(k)


class Mode(str, Enum):
    PLAIN = "plain"
    RANKED = "ranked"
    MERRY = "merry"


@dataclass(frozen=True)
class Proposal:
    pid: int
    proposer: int
    nominal_turn: int
    proposer_rank: int
    payload: bytes = b""
    round: int = 0

    @property
    def rank_key(self) -> tuple[int, int, int]:
        return (self.nominal_turn, self.proposer_rank, self.pid)


@dataclass(frozen=True)
class Announce:
    sender: int
    pid: int | None  # None is the confusion marker
    alpha: Awareness
    turn: int
    round: int = 0
    clock: int | None = None

    def __post_init__(self):
        if self.alpha.is_unaware:
            raise ValueError("gnomes never announce ignorance")
        if (self.pid is None) != self.alpha.is_confused:
            raise ValueError("confusion marker must carry Confused and no pid")

    def csv_row(self) -> str:
        pid = "" if self.pid is None else str(self.pid)
        return f"{self.turn},{self.sender},{pid},{self.alpha.token()}"

    @staticmethod
    def from_csv_row(row: str) -> "Announce":
        turn, sender, pid, alpha = row.strip().split(",")
        return Announce(int(sender), int(pid) if pid else None, Awareness.from_token(alpha), int(turn))


class ProtocolError(RuntimeError):
    pass


_pid_counter = itertools.count()


def new_pid() -> int:
    return next(_pid_counter)


@dataclass(frozen=True)
class GnomeState:
    me: int
    round: int = 0
    active: dict = field(default_factory=dict)  # pid -> Awareness
    confused: bool = False
    confused_at: int | None = None
    swarm_clock: int = 0
    last_heard: dict = field(default_factory=dict)  # (neighbor, pid) -> Awareness
    join_pending: bool = False
    acted: int | None = None
    acted_at: int | None = None
    dropped: frozenset = frozenset()  # pids thrown out as implausible
    first_heard: dict = field(default_factory=dict)  # pid -> own clock on first contact

    @property
    def busy(self) -> bool:
        """A proposal is circulating in this round and has not completed."""
        return bool(self.active) and self.acted is None and not self.confused


# --- awareness --------------------------------------------------------------

def alpha_step(own: Awareness, heard: Iterable[Awareness]) -> Awareness:
    """One application of the awareness recurrence, clamped to be monotone."""
    heard = list(heard)
    if own.is_confused or any(a.is_confused for a in heard):
        return CONFUSED
    if not any(a.is_aware for a in heard):
        return own
    lo = min(a.value() for a in heard)
    return max(own, Awareness(2, int(1 + lo)))


def consensus_reached(a: Awareness, d: int) -> bool:
    if d < 0:
        raise ValueError("d must be >= 0")
    return a.is_aware and a.radius >= d


def phase_of(a: Awareness, d: int) -> int | None:
    """Consensus phase floor(radius / d); None for unaware or confused gnomes."""
    if d < 1:
        raise ValueError("phase needs d >= 1")
    if not a.is_aware:
        return None
    return a.radius // d


def order_proposals(a: Proposal, b: Proposal) -> int:
    """-1 if ``a`` wins, 1 if ``b`` wins."""
    if a.pid == b.pid:
        raise ValueError("cannot order a proposal against itself")
    return -1 if a.rank_key < b.rank_key else 1


def backdate_check(p: Proposal, first_heard_clock: int, d: int) -> str:
    # An honest proposal reaches a gnome at distance k while the hearer's
    # clock reads nominal + k - 1, so the lag never exceeds d - 1.
    return "expel_proposer" if first_heard_clock - p.nominal_turn > d else "plausible"


def clock_step(state: GnomeState, heard_clocks: Sequence[int]) -> GnomeState:
    if not heard_clocks:
        heard_clocks = [state.swarm_clock]
    return replace(state, swarm_clock=max(state.swarm_clock, 1 + min(heard_clocks)))


# --- proposing and conflicts ---------------------------------------------

def propose(state: GnomeState, payload: bytes = b"", d: int = 0, *, rank: int | None = None,
            pid: int | None = None, nominal_turn: int | None = None,
            merry: bool = False) -> tuple[GnomeState, Announce, Proposal]:
    """Start a proposal at the current swarm time.

    A completed round or an empty one is accepted; a proposal already
    circulating (or pending confusion) is a self-inflicted rule-4 violation.
    In a merry swarm proposals simply join the current round.
    """
    if state.join_pending:
        raise ProtocolError("joining gnome must wait for the next round")
    if state.confused:
        raise ProtocolError("confused gnome must wait out the confusion timeout")
    if merry:
        prop = Proposal(new_pid() if pid is None else pid, state.me,
                        state.swarm_clock if nominal_turn is None else nominal_turn,
                        state.me if rank is None else rank, payload, state.round)
        active = dict(state.active)
        active[prop.pid] = Radius(0)
        first = dict(state.first_heard)
        first[prop.pid] = state.swarm_clock
        new = replace(state, active=active, first_heard=first)
        if state.acted is None and consensus_reached(Radius(0), d):
            new = replace(new, acted=prop.pid, acted_at=state.swarm_clock)
        return new, Announce(state.me, prop.pid, Radius(0), state.swarm_clock, state.round, state.swarm_clock), prop
    if state.busy:
        raise ProtocolError("another proposal is active and uncompleted")
    rnd = state.round + 1 if state.acted is not None else state.round
    prop = Proposal(
        pid=new_pid() if pid is None else pid,
        proposer=state.me,
        nominal_turn=state.swarm_clock if nominal_turn is None else nominal_turn,
        proposer_rank=state.me if rank is None else rank,
        payload=payload,
        round=rnd,
    )
    a0 = Radius(0)
    acted, acted_at = None, None
    if consensus_reached(a0, d):
        acted, acted_at = prop.pid, state.swarm_clock
    new = replace(state, round=rnd, active={prop.pid: a0}, confused=False, confused_at=None,
                  acted=acted, acted_at=acted_at, first_heard={prop.pid: state.swarm_clock})
    ann = Announce(state.me, prop.pid, a0, state.swarm_clock, rnd, state.swarm_clock)
    return new, ann, prop


def on_conflict(state: GnomeState, pids: Iterable[int], *, proposals: dict | None = None,
                mode: Mode = Mode.PLAIN) -> GnomeState:
    pids = set(pids)
    if len(pids) < 2:
        return state
    if mode == Mode.MERRY:
        return state
    if mode == Mode.RANKED:
        if proposals is None:
            raise ValueError("ranked resolution needs the proposals")
        win = min(pids, key=lambda p: proposals[p].rank_key)
        keep = {win: state.active.get(win, UNAWARE)}
        return replace(state, active=keep)
    return replace(state, confused=True, confused_at=state.swarm_clock if state.confused_at is None else state.confused_at)


# --- per-turn transition ---------------------------------------------------

@dataclass(frozen=True)
class StepConfig:
    d: int
    mode: Mode = Mode.PLAIN
    confusion_timeout: int | None = None  # defaults to 2 * d
    backdate_guard: bool = False

    @property
    def timeout(self) -> int:
        return 2 * self.d if self.confusion_timeout is None else self.confusion_timeout


@dataclass
class StepEvents:
    """Side observations of one transition, consumed by engines."""
    acted: int | None = None
    newly_confused: bool = False
    implausible: list = field(default_factory=list)  # (pid, proposer)
    new_round: bool = False


def announces_of(state: GnomeState, turn: int) -> list[Announce]:
    """What an honest gnome says this turn.  Unaware gnomes stay silent."""
    if state.join_pending:
        return []
    if state.confused:
        return [Announce(state.me, None, CONFUSED, turn, state.round, state.swarm_clock)]
    return [Announce(state.me, pid, a, turn, state.round, state.swarm_clock)
            for pid, a in sorted(state.active.items()) if a.is_aware]


def step(state: GnomeState, heard: Sequence[Announce], neighbors: Sequence[int],
         proposals: dict, cfg: StepConfig) -> tuple[GnomeState, StepEvents]:
    """Advance one gnome by one turn.

    ``heard`` holds last turn's announces from counted neighbors (self
    excluded); ``neighbors`` lists those neighbors so that silence reads as
    Unaware.
    """
    ev = StepEvents()
    st = state
    clocks = [st.swarm_clock] + [a.clock for a in heard if a.clock is not None]

    if st.join_pending:
        newer = [a for a in heard if a.round > st.round]
        if not newer:
            return clock_step(st, clocks), ev
        st = replace(st, join_pending=False)

    top = max((a.round for a in heard), default=st.round)
    if top > st.round:
        st = replace(st, round=top, active={}, confused=False, confused_at=None, acted=None,
                     acted_at=None, first_heard={})
        ev.new_round = True
    cur = [a for a in heard if a.round == st.round]

    # record history for sanity checking
    last = dict(st.last_heard)
    for a in cur:
        last[(a.sender, a.pid)] = a.alpha

    dropped = set(st.dropped)
    first = dict(st.first_heard)
    pids = set()
    for a in cur:
        if a.pid is None or a.pid in dropped:
            continue
        if a.pid not in first:
            first[a.pid] = st.swarm_clock
            prop = proposals.get(a.pid)
            # judged on direct contact with the proposer only: every copy passes
            # its neighbors first, and farther gnomes would disagree on the verdict
            if cfg.backdate_guard and prop is not None and a.sender == prop.proposer and \
                    backdate_check(prop, st.swarm_clock, cfg.d) == "expel_proposer":
                dropped.add(a.pid)
                ev.implausible.append((a.pid, prop.proposer))
                continue
        pids.add(a.pid)
    saw_confusion = any(a.pid is None for a in cur)

    active = {p: v for p, v in st.active.items() if p not in dropped}
    confused = st.confused
    confused_at = st.confused_at
    if cfg.mode != Mode.MERRY:
        candidates = pids | set(active)
        if saw_confusion or (cfg.mode == Mode.PLAIN and len(candidates) > 1):
            if not confused:
                confused, confused_at = True, st.swarm_clock + 1
                ev.newly_confused = True
        elif cfg.mode == Mode.RANKED and len(candidates) > 1:
            win = min(candidates, key=lambda p: proposals[p].rank_key)
            active = {win: active.get(win, UNAWARE)}
        elif candidates and not active:
            active = {next(iter(candidates)): UNAWARE}
    else:
        for p in pids:
            active.setdefault(p, UNAWARE)

    st = replace(st, last_heard=last, dropped=frozenset(dropped), first_heard=first)
    st = clock_step(st, clocks)

    if confused:
        active = {p: CONFUSED for p in active} if active else {}
    else:
        by_pid: dict[int, dict[int, Awareness]] = {}
        for a in cur:
            if a.pid in active:
                by_pid.setdefault(a.pid, {})[a.sender] = a.alpha
        newly = []
        for p, own in active.items():
            got = by_pid.get(p, {})
            entries = [own] + [got.get(n, UNAWARE) for n in neighbors]
            new = alpha_step(own, entries)
            if new != own and consensus_reached(new, cfg.d) and not consensus_reached(own, cfg.d):
                newly.append(p)
            active[p] = new
        if st.acted is None and newly:
            choice = min(newly, key=lambda p: proposals[p].rank_key if p in proposals else (0, 0, p))
            deadline_ok = True
            if cfg.mode == Mode.RANKED and choice in proposals:
                deadline_ok = st.swarm_clock <= proposals[choice].nominal_turn + 2 * cfg.d
            if deadline_ok:
                st = replace(st, acted=choice, acted_at=st.swarm_clock)
                ev.acted = choice

    st = replace(st, active=active, confused=confused, confused_at=confused_at)

    if st.confused and st.confused_at is not None and st.swarm_clock - st.confused_at >= cfg.timeout:
        st = replace(st, round=st.round + 1, active={}, confused=False, confused_at=None,
                     acted=None, acted_at=None, first_heard={})
        ev.new_round = True
    return st, ev


# --- sanity checks -----------------------------------------------------------

def check_sanity(neighbor: int, prev: Announce | None, next: Announce, my_last_alpha_sent: Awareness,
                 turns_elapsed: int, *, active: bool = True, conflict_told: bool = False,
                 switch_ok: bool = False, prev_completed: bool = False) -> int | None:
    """Lowest-numbered rule a neighbor's announce breaks, or None.

    ``turns_elapsed`` counts turns since the neighbor first announced its
    current value.  ``conflict_told`` means we told this neighbor about a
    conflicting proposal last turn.  ``switch_ok`` marks a legitimate change
    of proposal (ranked takeover); ``prev_completed`` a finished round.
    """
    same = prev is not None and prev.pid == next.pid and prev.round == next.round
    if same and next.alpha < prev.alpha:
        return 1
    if (same and active and next.alpha.is_aware and next.alpha == prev.alpha
            and turns_elapsed >= 2):
        return 2
    if next.alpha.is_aware and my_last_alpha_sent.tier >= 1:
        if next.alpha.radius > my_last_alpha_sent.value() + 1:
            return 3
    if (prev is not None and prev.round == next.round and prev.pid is not None and next.pid is not None
            and prev.pid != next.pid and not switch_ok and not prev_completed):
        return 4
    if conflict_told and same and next.alpha.is_aware and next.alpha > prev.alpha:
        return 5
    return None
