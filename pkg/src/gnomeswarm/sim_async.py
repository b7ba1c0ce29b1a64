"""Discrete-event engine with bounded per-message delays.

Each gnome keeps one register per member of N(g) -- itself included --
holding the most recently *sent* value received from it.  A gnome's own
announce reaches its own register after a delay like any other, which
mirrors the one-turn lag of the synchronous recurrence.  When a batch of
deliveries lands at one instant the gnome recomputes ``1 + min`` over the
registers and announces only if its awareness changed.
"""
from __future__ import annotations

import csv
import heapq
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .protocol import CONFUSED_CODE, UNAWARE_CODE, Awareness, phase_of
from .topology import Topology


class EventOverflow(RuntimeError):
    pass


@dataclass(frozen=True)
class DelayModel:
    kind: str = "uniform"  # constant | uniform | per-edge-fixed
    tau_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "per-edge-fixed"):
            raise ValueError(f"unknown delay kind {self.kind!r}")
        if not self.tau_max > 0:
            raise ValueError("tau_max must be positive")

    def sampler(self):
        rng = np.random.default_rng(self.seed)
        tm = self.tau_max
        if self.kind == "constant":
            return lambda u, v: tm
        if self.kind == "uniform":
            # (0, tau_max]
            return lambda u, v: tm * (1.0 - rng.random())
        fixed: dict = {}

        def per_edge(u, v):
            if (u, v) not in fixed:
                fixed[(u, v)] = tm * (1.0 - rng.random())
            return fixed[(u, v)]
        return per_edge


@dataclass
class AsyncTrace:
    n: int
    d: int
    tau_max: float
    proposer: int
    taus: np.ndarray  # event timestamps, non-decreasing
    gnomes: np.ndarray
    codes: np.ndarray
    messages: int = 0
    duration: float = 0.0
    delays: list = field(default_factory=list, repr=False)

    def initial(self) -> np.ndarray:
        a = np.full(self.n, UNAWARE_CODE, dtype=np.int64)
        a[self.proposer] = 0
        return a

    def alpha_at(self, tau: float) -> np.ndarray:
        a = self.initial()
        k = int(np.searchsorted(self.taus, tau, side="right"))
        a[self.gnomes[:k]] = self.codes[:k]  # later events overwrite earlier ones
        return a

    def sample(self, step: float | None = None, until: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Awareness of every gnome on a regular grid (default step tau_max / 4)."""
        step = self.tau_max / 4 if step is None else step
        until = self.duration if until is None else until
        m = int(math.floor(until / step + 1e-9)) + 1
        grid = np.arange(m) * step
        out = np.empty((m, self.n), dtype=np.int64)
        a = self.initial()
        k = 0
        for i, tau in enumerate(grid):
            j = int(np.searchsorted(self.taus, tau + 1e-12, side="right"))
            a[self.gnomes[k:j]] = self.codes[k:j]
            k = j
            out[i] = a
        return grid, out

    def first_time_all(self, k: int) -> float | None:
        """Earliest instant at which every gnome holds radius >= k."""
        a = self.initial()
        if (a >= k).all():
            return 0.0
        for i in range(len(self.taus)):
            a[self.gnomes[i]] = self.codes[i]
            if (i + 1 == len(self.taus) or self.taus[i + 1] != self.taus[i]) and (a >= k).all():
                return float(self.taus[i])
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "gnome", "alpha"])
        w.writerow([f"{0.0:.9f}", self.proposer, "0"])
        for t, g, c in zip(self.taus.tolist(), self.gnomes.tolist(), self.codes.tolist()):
            w.writerow([f"{t:.9f}", g, Awareness.from_code(c).token()])
        return buf.getvalue()


def bottom_time(trace: AsyncTrace, tau: float) -> int:
    """Minimum awareness over the swarm at ``tau`` (unaware counts as -1)."""
    a = trace.alpha_at(tau)
    return int(a.min()) if (a >= UNAWARE_CODE).all() else CONFUSED_CODE


def phase_at(trace: AsyncTrace, gnome: int, tau: float):
    return phase_of(Awareness.from_code(int(trace.alpha_at(tau)[gnome])), trace.d)


def mu_table(trace: AsyncTrace, step: float | None = None) -> str:
    grid, A = trace.sample(step)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tau", "mu"])
    for tau, row in zip(grid.tolist(), A):
        w.writerow([f"{tau:.9f}", int(row.min())])
    return buf.getvalue()


def run_async(topo: Topology, proposer: int, delay: DelayModel, duration: float, adversary=None, *,
              d: int | None = None, max_events: int = 5_000_000, tie_seed: int | None = None) -> AsyncTrace:
    """Simulate one round in physical time.

    ``adversary`` may be a JokerScript with strategy ``fool`` or ``confuse``;
    ``inject_at`` is then a timestamp at which the joker starts telling its
    neighbors about a conflict.  ``tie_seed`` permutes the processing order
    of simultaneous deliveries (semantically neutral).
    """
    n = topo.n
    d = topo.d_bound if d is None else d
    adj = topo.adjacency_lists
    sample = delay.sampler()
    tie_rng = np.random.default_rng(tie_seed) if tie_seed is not None else None
    alpha = np.full(n, UNAWARE_CODE, dtype=np.int64)
    alpha[proposer] = 0
    regs: list[dict] = [dict() for _ in range(n)]  # sender -> (send_time, code)
    heap: list = []
    seq = 0
    messages = 0
    delays = []
    joker = None
    if adversary is not None:
        if adversary.strategy not in ("fool", "confuse"):
            raise ValueError("async engine supports fool and confuse jokers only")
        joker = adversary.joker

    def announce(g, tau, code):
        nonlocal seq, messages
        for h in [g] + adj[g]:
            dl = sample(g, h)
            if not 0 < dl <= delay.tau_max:
                raise ValueError("delay outside (0, tau_max]")
            delays.append(dl)
            tie = tie_rng.random() if tie_rng is not None else 0.0
            heapq.heappush(heap, (tau + dl, tie, g, seq, h, tau, code))
            seq += 1
            messages += h != g

    taus, gnomes, codes = [], [], []
    announce(proposer, 0.0, 0)
    injected = False
    while heap:
        now = heap[0][0]
        if joker is not None and not injected and adversary.inject_at <= now:
            injected = True
            alpha[joker] = CONFUSED_CODE
            taus.append(float(adversary.inject_at)); gnomes.append(joker); codes.append(CONFUSED_CODE)
            announce(joker, float(adversary.inject_at), CONFUSED_CODE)
            continue
        if now > duration:
            break
        touched = []
        while heap and heap[0][0] == now:
            _, _, s, _, h, sent, code = heapq.heappop(heap)
            old = regs[h].get(s)
            if old is None or sent >= old[0]:
                regs[h][s] = (sent, code)
            touched.append(h)
        for g in sorted(set(touched)):
            if g == joker and injected:
                continue
            own = int(alpha[g])
            vals = [regs[g][s][1] for s in regs[g]]
            if own == CONFUSED_CODE or CONFUSED_CODE in vals:
                new = CONFUSED_CODE
            elif max(vals) >= 0:
                # members of N(g) not heard from yet count as unaware
                lo = min(vals) if len(regs[g]) == len(adj[g]) + 1 else UNAWARE_CODE
                new = max(own, 1 + lo)
            else:
                new = own
            if new != own:
                alpha[g] = new
                taus.append(now); gnomes.append(g); codes.append(new)
                announce(g, now, new)
        if len(taus) > max_events:
            raise EventOverflow(f"more than {max_events} state changes")
    return AsyncTrace(n, d, delay.tau_max, proposer, np.asarray(taus, dtype=float),
                      np.asarray(gnomes, dtype=np.int64), np.asarray(codes, dtype=np.int64),
                      messages, float(duration), delays)
