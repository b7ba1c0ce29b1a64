"""Invariant sweeps over generated scenarios.

Each check returns a :class:`CheckResult`; on failure ``counterexample``
holds enough to rebuild the failing scenario.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adversary import audit_trace
from .sim_async import DelayModel, run_async
from .sim_sync import Scenario, oracle_series, run, run_fast
from .topology import GENERATOR_KINDS, TopologyError, bfs_distances, generate


@dataclass
class CheckResult:
    name: str
    passed: bool
    trials: int
    detail: str = ""
    counterexample: dict | None = None
    stats: dict = field(default_factory=dict)


def random_topology(rng: np.random.Generator, n_max: int, n_min: int = 2, kinds=GENERATOR_KINDS):
    """Draw a feasible (kind, n, target_d, seed) and build it."""
    while True:
        kind = kinds[int(rng.integers(len(kinds)))]
        n = int(rng.integers(n_min, n_max + 1))
        seed = int(rng.integers(2**32))
        if kind == "path" and n > 60:
            n = int(rng.integers(n_min, 61))
        if kind == "ring" and n > 80:
            n = int(rng.integers(n_min, 81))
        if kind == "path":
            target = n - 1 + int(rng.integers(0, 3))
        elif kind == "ring":
            target = (n // 2 if n >= 3 else 1) + int(rng.integers(0, 2))
        elif kind == "star":
            target = 2 + int(rng.integers(0, 2))
        elif kind == "complete":
            target = 1 + int(rng.integers(0, 2))
        elif kind == "grid":
            r = max(1, math.isqrt(n))
            target = r - 1 + math.ceil(n / r) - 1 + int(rng.integers(0, 2))
        else:
            target = int(rng.integers(4, 9))
        target = max(target, 1)
        try:
            topo = generate(kind, n, target, seed)
        except TopologyError:
            continue
        return topo, {"kind": kind, "n": n, "target_d": target, "seed": seed}


def check_simultaneity(trials: int = 500, n_max: int = 1000, seed: int = 0) -> CheckResult:
    """Consensus lands exactly on ecc(p) + d, all at once, never earlier."""
    rng = np.random.default_rng(seed)
    for i in range(trials):
        topo, spec = random_topology(rng, n_max)
        p = int(rng.integers(topo.n))
        d = topo.d_bound
        ecc = int(bfs_distances(topo, p).max())
        res = run_fast(topo, p, d)
        ct = res.consensus_turn
        A = res.alpha_matrix()
        ok = (ct == ecc + d and ct <= 2 * d and not (A[:ct] >= d).any() and (A[ct] >= d).all())
        if not ok:
            return CheckResult("theorem1", False, i + 1, f"consensus {ct}, expected {ecc + d}",
                               dict(spec, proposer=p))
    return CheckResult("theorem1", True, trials)


def check_oracle(trials: int = 20, n_max: int = 50, pairs: int = 50, pair_n_max: int = 1000,
                 seed: int = 1, engines=("fast", "object")) -> CheckResult:
    """Engine awareness equals the global recurrence at every turn."""
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(trials):
        topo, spec = random_topology(rng, n_max)
        cases += [(topo, spec, p) for p in range(topo.n)]
    for _ in range(pairs):
        topo, spec = random_topology(rng, pair_n_max)
        cases.append((topo, spec, int(rng.integers(topo.n))))
    checked = 0
    for topo, spec, p in cases:
        for eng in engines:
            if eng == "object" and topo.n > 200 and checked % 5:
                continue  # object engine on a sample of large graphs
            res = run(Scenario(topo, [(p, 0, b"")]), engine=eng)
            orc = oracle_series(topo, p, len(res.traces))
            for tr, want in zip(res.traces, orc):
                if tr.alpha.tolist() != want:
                    return CheckResult("oracle", False, checked, f"{eng} engine differs at turn {tr.turn}",
                                       dict(spec, proposer=p))
            checked += 1
    return CheckResult("oracle", True, checked)


def check_bottom_growth(trials: int = 200, n_max: int = 500, seed: int = 2) -> CheckResult:
    """Bottom value climbs by one per turn from r(p)-1; B_{t+1} is the union of N(B_t)."""
    rng = np.random.default_rng(seed)
    for i in range(trials):
        topo, spec = random_topology(rng, n_max)
        p = int(rng.integers(topo.n))
        r = int(bfs_distances(topo, p).max())
        res = run_fast(topo, p, topo.d_bound, stop_at_consensus=False, max_turns=r + topo.d_bound + 2)
        bad = bottom_growth_violation(res.alpha_matrix(), topo, r)
        if bad is not None:
            return CheckResult("lemma3", False, i + 1, bad, dict(spec, proposer=p))
    return CheckResult("lemma3", True, trials)


def bottom_growth_violation(A: np.ndarray, topo, r: int) -> str | None:
    start = max(r - 1, 0)
    for t in range(start, len(A) - 1):
        b, b1 = A[t].min(), A[t + 1].min()
        if b1 != b + 1:
            return f"b_{t + 1}={b1} but b_{t}={b}"
        B = np.flatnonzero(A[t] == b)
        grown = set(B.tolist())
        for g in B:
            grown.update(topo.neighbors(g).tolist())
        if grown != set(np.flatnonzero(A[t + 1] == b1).tolist()):
            return f"B_{t + 1} is not the closed neighborhood of B_{t}"
    return None


def check_sanity_fp(trials: int = 100, n_max: int = 300, seed: int = 3) -> CheckResult:
    """Honest traffic never trips a sanity rule."""
    rng = np.random.default_rng(seed)
    for i in range(trials):
        topo, spec = random_topology(rng, n_max)
        p = int(rng.integers(topo.n))
        res = run_fast(topo, p, topo.d_bound, stop_at_consensus=False, max_turns=3 * topo.d_bound + 2)
        v = audit_trace(res, topo)
        if v:
            return CheckResult("sanity-fp", False, i + 1, f"violation {v[0]}", dict(spec, proposer=p))
        if i % 10 == 0 and topo.n <= 200:
            sc = Scenario(topo, [(p, 0, b"")], sanity="log", stop_at_consensus=False,
                          max_turns=3 * topo.d_bound + 2)
            res = run(sc, engine="object")
            if res.violations:
                return CheckResult("sanity-fp", False, i + 1, f"violation {res.violations[0]}",
                                   dict(spec, proposer=p))
    return CheckResult("sanity-fp", True, trials)


def async_violations(tr, d: int) -> list[str]:
    """Bottom floor, per-tau_max increment, bounded spread and phase bound on the sampling grid."""
    grid, A = tr.sample()
    tm = tr.tau_max
    mu = A.min(axis=1)
    out = []
    eps = 1e-9
    for i, tau in enumerate(grid):
        if mu[i] < math.floor(tau / tm + eps) - d:
            out.append(f"bottom below floor(tau/tau_max) - d at tau={tau}")
        j = int(np.searchsorted(grid, tau + tm - eps))
        if j < len(grid) and mu[i] >= 0 and mu[j] < mu[i] + 1:
            out.append(f"bottom failed to rise within tau_max at tau={tau}")
        bound = math.floor(tau / (d * tm) + eps) - 1
        if bound >= 0 and ((A[i] < 0) | (A[i] // d < bound)).any():
            out.append(f"phase below floor(tau/(d tau_max)) - 1 at tau={tau}")
        if (A[i] >= 0).all() and A[i].max() - A[i].min() > d:
            out.append(f"awareness spread above d at tau={tau}")
    return out


def check_async(trials: int = 50, n_max: int = 120, seed: int = 4, name: str = "async") -> CheckResult:
    rng = np.random.default_rng(seed)
    for i in range(trials):
        topo, spec = random_topology(rng, n_max)
        p = int(rng.integers(topo.n))
        d = topo.d_bound
        tr = run_async(topo, p, DelayModel("uniform", 1.0, int(rng.integers(2**32))), duration=4 * d + 2)
        bad = async_violations(tr, d)
        if bad:
            return CheckResult(name, False, i + 1, bad[0], dict(spec, proposer=p))
    return CheckResult(name, True, trials)


def check_constant_delay(trials: int = 20, n_max: int = 80, seed: int = 5) -> CheckResult:
    """Delay fixed at tau_max reproduces the synchronous trace at multiples of tau_max."""
    rng = np.random.default_rng(seed)
    for i in range(trials):
        topo, spec = random_topology(rng, n_max)
        p = int(rng.integers(topo.n))
        d = topo.d_bound
        tm = float(rng.choice([0.5, 1.0, 2.0]))
        res = run_fast(topo, p, d, stop_at_consensus=False, max_turns=3 * d)
        tr = run_async(topo, p, DelayModel("constant", tm), duration=3 * d * tm)
        for t, sync in enumerate(res.traces):
            if not np.array_equal(tr.alpha_at(t * tm), sync.alpha):
                return CheckResult("constant-delay", False, i + 1, f"differs at turn {t}", dict(spec, proposer=p))
    return CheckResult("constant-delay", True, trials)


CHECKS = {
    "theorem1": check_simultaneity,
    "oracle": check_oracle,
    "lemma3": check_bottom_growth,
    "sanity-fp": check_sanity_fp,
    "lemma6": lambda **kw: check_async(name="lemma6", **kw),
    "lemma7": lambda **kw: check_async(name="lemma7", **kw),
    "corollary": lambda **kw: check_async(name="corollary", **kw),
    "theorem2": lambda **kw: check_async(name="theorem2", **kw),
    "constant-delay": check_constant_delay,
}
