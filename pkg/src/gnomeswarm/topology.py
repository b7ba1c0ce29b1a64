"""Swarm communication graphs.

A topology is an undirected connected graph stored in CSR form.  Adjacency
lists hold only *other* gnomes; every neighborhood operation treats a gnome
as a member of its own neighborhood.

Edge-list file format::

    n d_bound
    u v
    u v
    ...

Blank lines and lines starting with ``#`` are skipped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

# Above this size all-pairs BFS is too slow for a single core; large random
# graphs get a diameter bound certified by construction instead.
EXACT_DIAMETER_LIMIT = 5000
GENERATOR_KINDS = ("complete", "path", "ring", "star", "grid", "random-regular", "small-world")


class TopologyError(ValueError):
    """Invalid, disconnected, or infeasible topology."""


class DisconnectedError(TopologyError):
    pass


class TopologyFormatError(TopologyError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class Topology:
    indptr: np.ndarray
    indices: np.ndarray
    d_bound: int
    # "exact" when the diameter was measured, "construction" when a spanning
    # backbone of bounded depth guarantees it, "lower-bound" when only a
    # double sweep could be afforded.
    certificate: str = "exact"
    diameter_hint: int | None = field(default=None, repr=False)

    def __post_init__(self):
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)

    @classmethod
    def from_edges(cls, n: int, edges, d_bound: int, *, validate: bool = True,
                   certificate: str | None = None, diameter_hint: int | None = None) -> "Topology":
        if n < 1:
            raise TopologyError("a swarm needs at least one gnome")
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2) if len(edges) else np.zeros((0, 2), np.int64)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise TopologyError("edge endpoint out of range")
        e = e[e[:, 0] != e[:, 1]]
        u = np.concatenate([e[:, 0], e[:, 1]])
        v = np.concatenate([e[:, 1], e[:, 0]])
        # dedupe directed arcs
        key = np.unique(u * n + v)
        u, v = key // n, key % n
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, u + 1, 1)
        np.cumsum(indptr, out=indptr)
        dtype = np.int32 if n < 2**31 else np.int64
        topo = cls(indptr, v.astype(dtype), int(d_bound), certificate or "exact", diameter_hint)
        if validate:
            topo.validate()
        return topo

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    def _check(self, g: int) -> int:
        g = int(g)
        if not 0 <= g < self.n:
            raise KeyError(f"unknown gnome {g}")
        return g

    def neighbors(self, g: int) -> np.ndarray:
        """Other gnomes adjacent to ``g`` (sorted, self excluded)."""
        g = self._check(g)
        return self.indices[self.indptr[g]:self.indptr[g + 1]]

    def closed_neighbors(self, g: int) -> list[int]:
        """N(g) including g itself."""
        return [int(g)] + self.neighbors(g).tolist()

    def degree(self, g: int) -> int:
        g = self._check(g)
        return int(self.indptr[g + 1] - self.indptr[g])

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def num_edges(self) -> int:
        return len(self.indices) // 2

    def edges(self) -> np.ndarray:
        u = np.repeat(np.arange(self.n), self.degrees)
        mask = u < self.indices
        return np.stack([u[mask], self.indices[mask]], axis=1)

    @cached_property
    def adjacency_lists(self) -> list[list[int]]:
        return [self.indices[self.indptr[g]:self.indptr[g + 1]].tolist() for g in range(self.n)]

    @cached_property
    def matrix(self) -> csr_matrix:
        data = np.ones(len(self.indices), dtype=np.int8)
        return csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    @cached_property
    def closed_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR arrays with each gnome prepended to its own row."""
        n = self.n
        indptr = self.indptr + np.arange(n + 1)
        indices = np.empty(len(self.indices) + n, dtype=self.indices.dtype)
        self_pos = indptr[:-1]
        mask = np.ones(len(indices), dtype=bool)
        mask[self_pos] = False
        indices[self_pos] = np.arange(n)
        indices[mask] = self.indices
        return indptr, indices

    def is_connected(self) -> bool:
        if self.n == 1:
            return True
        ncomp, _ = connected_components(self.matrix, directed=False)
        return ncomp == 1

    def validate(self) -> None:
        if not self.is_connected():
            raise DisconnectedError("graph is disconnected")
        if self.certificate == "exact":
            d = diameter(self)
            if d > self.d_bound:
                raise TopologyError(f"diameter {d} exceeds bound {self.d_bound}")
        elif self.certificate == "construction":
            if self.diameter_hint is None or self.diameter_hint > self.d_bound:
                raise TopologyError("construction certificate does not cover d_bound")
        else:
            lb = diameter_lower_bound(self)
            if lb > self.d_bound:
                raise TopologyError(f"diameter at least {lb}, exceeds bound {self.d_bound}")

    def with_d_bound(self, d_bound: int) -> "Topology":
        t = Topology(self.indptr.copy(), self.indices.copy(), int(d_bound), self.certificate, self.diameter_hint)
        t.validate()
        return t


def bfs_distances(topo: Topology, source: int) -> np.ndarray:
    """Hop distances from ``source``; -1 marks unreachable gnomes."""
    source = topo._check(source)
    if topo.n == 1:
        return np.zeros(1, dtype=np.int64)
    dist = shortest_path(topo.matrix, method="D", unweighted=True, directed=False, indices=[source])[0]
    out = np.where(np.isinf(dist), -1, dist).astype(np.int64)
    return out


def k_neighborhood(topo: Topology, g: int, k: int) -> set[int]:
    """N^k(g): gnomes at most ``k`` hops from ``g``; N^-1 is empty."""
    g = topo._check(g)
    if k < 0:
        return set()
    # plain breadth-first expansion; neighborhoods stay small in tests
    seen = {g}
    frontier = [g]
    adj = topo.adjacency_lists
    for _ in range(k):
        nxt = []
        for h in frontier:
            for x in adj[h]:
                if x not in seen:
                    seen.add(x)
                    nxt.append(x)
        if not nxt:
            break
        frontier = nxt
    return seen


def eccentricity(topo: Topology, g: int) -> int:
    dist = bfs_distances(topo, g)
    if (dist < 0).any():
        raise DisconnectedError("graph is disconnected")
    return int(dist.max())


def eccentricities(topo: Topology, chunk: int = 512) -> np.ndarray:
    """Eccentricity of every gnome by level-synchronous BFS from blocks of sources."""
    n = topo.n
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    A = topo.matrix.astype(np.float32)
    ecc = np.empty(n, dtype=np.int64)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        seen = np.zeros((n, len(idx)), dtype=bool)
        seen[idx, np.arange(len(idx))] = True
        frontier = seen.astype(np.float32)
        level = np.zeros(len(idx), dtype=np.int64)
        k = 0
        while frontier.any():
            k += 1
            reach = (A @ frontier) > 0
            reach &= ~seen
            seen |= reach
            level[reach.any(axis=0)] = k
            frontier = reach.astype(np.float32)
        if not seen.all():
            raise DisconnectedError("graph is disconnected")
        ecc[idx] = level
    return ecc


def diameter(topo: Topology) -> int:
    """Exact diameter (maximum eccentricity)."""
    if topo.n > EXACT_DIAMETER_LIMIT and topo.certificate == "construction":
        raise TopologyError("graph too large for exact diameter; use diameter_bound()")
    return int(eccentricities(topo).max())


def diameter_lower_bound(topo: Topology, sweeps: int = 4, seed: int = 0) -> int:
    """Iterated double-sweep lower bound on the diameter."""
    rng = np.random.default_rng(seed)
    best = 0
    g = int(rng.integers(topo.n))
    for _ in range(sweeps):
        dist = bfs_distances(topo, g)
        if (dist < 0).any():
            raise DisconnectedError("graph is disconnected")
        far = int(dist.argmax())
        best = max(best, int(dist[far]))
        g = far
    return best


def diameter_bound(topo: Topology) -> int:
    """Best certified upper bound on the diameter."""
    if topo.certificate == "construction" and topo.diameter_hint is not None:
        return topo.diameter_hint
    return diameter(topo)


# --- generators ------------------------------------------------------------

def _complete(n):
    iu = np.triu_indices(n, 1)
    return np.stack(iu, axis=1)


def _path(n):
    a = np.arange(n - 1)
    return np.stack([a, a + 1], axis=1)


def _ring(n):
    if n < 3:
        return _path(n)
    a = np.arange(n)
    return np.stack([a, (a + 1) % n], axis=1)


def _star(n):
    a = np.arange(1, n)
    return np.stack([np.zeros_like(a), a], axis=1)


def _grid_shape(n):
    rows = max(1, int(math.isqrt(n)))
    cols = math.ceil(n / rows)
    return rows, cols


def _grid(n):
    rows, cols = _grid_shape(n)
    idx = np.arange(n)
    c = idx % cols
    right = idx[(c + 1 < cols) & (idx + 1 < n)]
    down = idx[idx + cols < n]
    return np.concatenate([np.stack([right, right + 1], 1), np.stack([down, down + cols], 1)])


def _random_regular(n, degree, rng):
    """Configuration model; loops and parallel edges are discarded."""
    if n * degree % 2:
        degree += 1
    stubs = np.repeat(np.arange(n), degree)
    rng.shuffle(stubs)
    e = stubs.reshape(-1, 2)
    return e[e[:, 0] != e[:, 1]]


def _ring_lattice_shortcuts(n, k, rng, p=0.1):
    # Newman-Watts small world: lattice plus random shortcuts, never rewired
    # away, so the ring keeps the graph connected.
    half = max(1, k // 2)
    a = np.arange(n)
    lattice = np.concatenate([np.stack([a, (a + j) % n], 1) for j in range(1, half + 1)])
    m = rng.binomial(len(lattice), p)
    shortcuts = rng.integers(0, n, size=(m, 2))
    return np.concatenate([lattice, shortcuts])


def _backbone(n, depth, rng):
    """Random spanning tree of the given depth; its diameter is at most 2*depth."""
    order = rng.permutation(n)
    b = 1
    while sum(b ** i for i in range(depth + 1)) < n:
        b += 1
    parent_pos = np.empty(n, dtype=np.int64)
    parent_pos[0] = -1
    pos = np.arange(1, n)
    # heap-like layout with branching b: children of slot i are b*i+1..b*i+b
    parent_pos[1:] = (pos - 1) // b
    return np.stack([order[1:], order[parent_pos[1:]]], axis=1)


def _default_degree(n, target_d):
    if n <= 2:
        return 1
    for k in range(3, n):
        # expected random-regular diameter ~ log_{k-1} n + 2
        if math.log(n) / math.log(k - 1) + 2 <= target_d:
            return k
    return n - 1


def _feasible_closed_form(kind, n, target_d):
    if kind == "complete":
        return (0 if n == 1 else 1) <= target_d
    if kind == "path":
        return n - 1 <= target_d
    if kind == "ring":
        return (n // 2 if n >= 3 else n - 1) <= target_d
    if kind == "star":
        return min(n - 1, 2) <= target_d
    if kind == "grid":
        rows, cols = _grid_shape(n)
        return rows - 1 + cols - 1 <= target_d
    return True


def generate(kind: str, n: int, target_d: int, seed: int = 0, *, degree: int | None = None,
             max_retries: int = 32) -> Topology:
    """Build a connected topology of ``n`` gnomes with diameter at most ``target_d``.

    Deterministic kinds fail fast when the bound is unattainable.  Random
    kinds measure and retry, then densify with random chords.  Random graphs
    above EXACT_DIAMETER_LIMIT get a spanning backbone of depth
    ``target_d // 2`` which certifies the bound without all-pairs BFS.
    """
    if kind not in GENERATOR_KINDS:
        raise TopologyError(f"unknown topology kind {kind!r}")
    if n < 1:
        raise TopologyError("n must be >= 1")
    if target_d < 0:
        raise TopologyError("target_d must be >= 0")
    if n > 1 and target_d < 1:
        raise TopologyError(f"{n} gnomes cannot have diameter 0")
    if not _feasible_closed_form(kind, n, target_d):
        raise TopologyError(f"infeasible: {kind} with n={n} cannot reach diameter <= {target_d}")

    rng = np.random.default_rng(seed)
    simple = {"complete": _complete, "path": _path, "ring": _ring, "star": _star, "grid": _grid}
    if kind in simple:
        edges = simple[kind](n) if n > 1 else np.zeros((0, 2), np.int64)
        if n > EXACT_DIAMETER_LIMIT:
            return Topology.from_edges(n, edges, target_d, certificate="construction",
                                       diameter_hint=_closed_form_diameter(kind, n))
        return Topology.from_edges(n, edges, target_d)

    if n <= 2:
        return Topology.from_edges(n, _path(n) if n > 1 else np.zeros((0, 2)), target_d)

    k = degree or _default_degree(n, target_d)
    k = min(k, n - 1)

    def draw():
        if kind == "random-regular":
            return _random_regular(n, k, rng)
        return _ring_lattice_shortcuts(n, max(k, 2), rng)

    if n > EXACT_DIAMETER_LIMIT:
        if target_d < 2:
            raise TopologyError("large random graphs need target_d >= 2")
        depth = target_d // 2
        tree = _backbone(n, depth, rng)
        edges = np.concatenate([draw(), tree])
        return Topology.from_edges(n, edges, target_d, certificate="construction", diameter_hint=2 * depth)

    edges = None
    for _ in range(max_retries):
        edges = draw()
        topo = Topology.from_edges(n, edges, target_d, validate=False)
        if _within(topo, target_d):
            return topo
    # densify the last draw until the bound holds
    while True:
        extra = rng.integers(0, n, size=(max(1, n // 10), 2))
        edges = np.concatenate([edges, extra])
        topo = Topology.from_edges(n, edges, target_d, validate=False)
        if _within(topo, target_d):
            return topo


def _within(topo, target_d):
    # a double sweep rejects most bad draws before the all-pairs pass
    if not topo.is_connected() or diameter_lower_bound(topo, sweeps=2) > target_d:
        return False
    return diameter(topo) <= target_d


def _closed_form_diameter(kind, n):
    if n == 1:
        return 0
    if kind == "complete":
        return 1
    if kind == "path":
        return n - 1
    if kind == "ring":
        return n // 2 if n >= 3 else 1
    if kind == "star":
        return min(n - 1, 2)
    rows, cols = _grid_shape(n)
    return rows - 1 + cols - 1


# --- edge-list files -------------------------------------------------------

def dumps(topo: Topology) -> str:
    lines = [f"{topo.n} {topo.d_bound}"]
    lines += [f"{u} {v}" for u, v in topo.edges().tolist()]
    return "\n".join(lines) + "\n"


def save(topo: Topology, path) -> None:
    Path(path).write_text(dumps(topo))


def loads(text: str) -> Topology:
    """Parse an edge list.

    Each ``u v`` line is an undirected edge.  If any pair is listed in both
    directions the file is read as a list of arcs, and every arc must then
    have its reverse.
    """
    header = None
    arcs: dict[tuple[int, int], int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise TopologyFormatError(lineno, f"expected two integers, got {line!r}")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise TopologyFormatError(lineno, f"not integers: {line!r}") from None
        if header is None:
            if a < 1 or b < 0:
                raise TopologyFormatError(lineno, "header must be 'n d_bound' with n >= 1")
            header = (a, b, lineno)
            continue
        n = header[0]
        if not (0 <= a < n and 0 <= b < n):
            raise TopologyFormatError(lineno, f"gnome id out of range 0..{n - 1}")
        if a == b:
            raise TopologyFormatError(lineno, "self-loops are implicit and must not be listed")
        if (a, b) in arcs:
            raise TopologyFormatError(lineno, f"duplicate edge {a} {b}")
        arcs[(a, b)] = lineno
    if header is None:
        raise TopologyFormatError(1, "missing header")
    n, d_bound, hline = header
    directed = any((b, a) in arcs for (a, b) in arcs)
    if directed:
        for (a, b), lineno in arcs.items():
            if (b, a) not in arcs:
                raise TopologyFormatError(lineno, f"asymmetric: {a} hears {b} but not the reverse")
    topo = Topology.from_edges(n, list(arcs), d_bound, validate=False,
                               certificate="exact" if n <= EXACT_DIAMETER_LIMIT else "lower-bound")
    try:
        if not topo.is_connected():
            dist = bfs_distances(topo, 0)
            missing = int(np.flatnonzero(dist < 0)[0])
            raise TopologyFormatError(hline, f"disconnected: gnome {missing} unreachable from gnome 0")
        topo.validate()
    except TopologyFormatError:
        raise
    except TopologyError as exc:
        raise TopologyFormatError(hline, str(exc)) from None
    return topo


def load(path) -> Topology:
    return loads(Path(path).read_text())
