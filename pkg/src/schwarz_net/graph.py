"""Undirected graphs, set distances, partitions and overlap expansion."""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

INF = float("inf")


@dataclass(frozen=True)
class Graph:
    """Simple undirected graph on vertices ``0..n_vertices-1``.

    ``labels`` keeps the caller's original vertex ids; all algorithms use
    the contiguous internal ids.
    """

    n_vertices: int
    adjacency: tuple
    labels: tuple = None

    def __post_init__(self):
        if self.labels is None:
            object.__setattr__(self, "labels", tuple(range(self.n_vertices)))

    @classmethod
    def from_edges(cls, n, edges, labels=None):
        n = int(n)
        if n < 0:
            raise InputError("number of vertices must be nonnegative")
        nbrs = [set() for _ in range(n)]
        for e in edges:
            i, j = int(e[0]), int(e[1])
            if not (0 <= i < n and 0 <= j < n):
                raise InputError(f"edge ({i}, {j}) references a vertex outside 0..{n - 1}")
            if i == j:
                raise InputError(f"self-loop at vertex {i}")
            nbrs[i].add(j)
            nbrs[j].add(i)
        adjacency = tuple(np.array(sorted(s), dtype=np.int64) for s in nbrs)
        return cls(n, adjacency, None if labels is None else tuple(labels))

    @classmethod
    def path(cls, n):
        return cls.from_edges(n, [(i, i + 1) for i in range(n - 1)])

    @classmethod
    def cycle(cls, n):
        return cls.from_edges(n, [(i, (i + 1) % n) for i in range(n)])

    def neighbors(self, i):
        return self.adjacency[i]

    def edges(self):
        """Edge list with the low-id endpoint first, sorted."""
        return [(i, int(j)) for i in range(self.n_vertices) for j in self.adjacency[i] if j > i]

    @property
    def n_edges(self):
        return sum(len(a) for a in self.adjacency) // 2

    def degree(self, i):
        return len(self.adjacency[i])

    def components(self):
        """Connected components as sorted vertex lists, ordered by smallest vertex."""
        seen = np.zeros(self.n_vertices, dtype=bool)
        comps = []
        for s in range(self.n_vertices):
            if seen[s]:
                continue
            comp = [s]
            seen[s] = True
            queue = deque([s])
            while queue:
                u = queue.popleft()
                for v in self.adjacency[u]:
                    if not seen[v]:
                        seen[v] = True
                        comp.append(int(v))
                        queue.append(v)
            comps.append(sorted(comp))
        return comps

    def is_connected(self):
        return self.n_vertices <= 1 or len(self.components()) == 1

    def diameter(self):
        """Largest finite distance between two vertices."""
        best = 0
        for s in range(self.n_vertices):
            d = bfs_distance(self, [s])
            finite = d[np.isfinite(d)]
            best = max(best, int(finite.max()))
        return best

    def to_json(self):
        return {"n": self.n_vertices, "edges": [list(e) for e in self.edges()]}

    @classmethod
    def from_json(cls, data):
        return cls.from_edges(data["n"], data["edges"])


def _check_vertices(g, vertices):
    out = []
    for v in vertices:
        v = int(v)
        if not 0 <= v < g.n_vertices:
            raise InputError(f"vertex id {v} out of range 0..{g.n_vertices - 1}")
        out.append(v)
    return out


def bfs_distance(g: Graph, sources: Iterable[int], cutoff: int | None = None) -> np.ndarray:
    """Edge-count distance from the vertex set ``sources`` to every vertex.

    Vertices farther than ``cutoff`` (or unreachable) get ``inf``.
    """
    src = _check_vertices(g, sources)
    if not src:
        raise InputError("bfs_distance needs at least one source")
    dist = np.full(g.n_vertices, INF)
    queue = deque()
    for s in src:
        if dist[s] != 0:
            dist[s] = 0
            queue.append(s)
    while queue:
        u = queue.popleft()
        du = dist[u]
        if cutoff is not None and du >= cutoff:
            continue
        for v in g.adjacency[u]:
            if dist[v] == INF:
                dist[v] = du + 1
                queue.append(v)
    return dist


def all_pairs_distance(g: Graph) -> np.ndarray:
    """Dense distance matrix by repeated BFS (small graphs only)."""
    return np.vstack([bfs_distance(g, [s]) for s in range(g.n_vertices)])


@dataclass(frozen=True)
class Partition:
    k_blocks: int
    assignment: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", a)
        if self.k_blocks < 1:
            raise InputError("a partition needs at least one block")
        if a.size and (a.min() < 0 or a.max() >= self.k_blocks):
            raise InputError("block id out of range in partition assignment")
        counts = np.bincount(a, minlength=self.k_blocks)
        if np.any(counts == 0):
            empty = [int(k) for k in np.flatnonzero(counts == 0)]
            raise InputError(f"partition has empty blocks: {empty}")

    @classmethod
    def from_blocks(cls, n, blocks: Sequence[Sequence[int]]):
        assignment = np.full(n, -1, dtype=np.int64)
        for k, b in enumerate(blocks):
            for v in b:
                if assignment[v] != -1:
                    raise InputError(f"vertex {v} assigned to more than one block")
                assignment[v] = k
        if np.any(assignment < 0):
            raise InputError("every vertex must belong to a block")
        return cls(len(blocks), assignment)

    def blocks(self):
        return [np.flatnonzero(self.assignment == k) for k in range(self.k_blocks)]

    def sizes(self):
        return np.bincount(self.assignment, minlength=self.k_blocks)

    def to_json(self):
        return {"k": self.k_blocks, "assignment": [int(a) for a in self.assignment]}

    @classmethod
    def from_json(cls, data):
        return cls(int(data["k"]), np.asarray(data["assignment"], dtype=np.int64))


@dataclass(frozen=True)
class OverlapBlocks:
    omega: int
    blocks: list
    interior: list
    complement_boundary: list
    n_vertices: int = 0
    _owner: np.ndarray = field(default=None, repr=False)

    @property
    def k_blocks(self):
        return len(self.blocks)

    @property
    def owner(self):
        """Block id owning each vertex (the partition assignment)."""
        return self._owner

    def restrict_positions(self, k):
        """Positions of the interior vertices inside the expanded block ``k``."""
        return np.searchsorted(self.blocks[k], self.interior[k])


def expand_overlap(g: Graph, p: Partition, omega: int, reach: int = 1) -> OverlapBlocks:
    """Grow each block to every vertex within ``omega`` hops.

    ``complement_boundary[k]`` lists the vertices outside the expanded block
    within ``reach`` further hops, i.e. the data block ``k`` must read.
    """
    omega = int(omega)
    if omega < 0:
        raise InputError("overlap omega must be nonnegative")
    if len(p.assignment) != g.n_vertices:
        raise InputError("partition size does not match the graph")
    interior = p.blocks()
    blocks, boundary = [], []
    for vk in interior:
        d = bfs_distance(g, vk, cutoff=omega + reach)
        blocks.append(np.flatnonzero(d <= omega))
        boundary.append(np.flatnonzero((d > omega) & np.isfinite(d)))
    return OverlapBlocks(omega, blocks, interior, boundary, g.n_vertices, p.assignment.copy())


def _split_counts(total, weights):
    """Largest-remainder integer split of ``total`` proportional to ``weights``."""
    w = np.asarray(weights, dtype=float)
    raw = total * w / w.sum()
    counts = np.floor(raw).astype(int)
    rem = total - counts.sum()
    order = sorted(range(len(w)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    return counts


def _pseudo_peripheral(g, allowed, start):
    """Farthest allowed vertex from ``start`` within the allowed subgraph (lowest id on ties)."""
    dist = {start: 0}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in g.adjacency[u]:
            v = int(v)
            if allowed[v] and v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    far = max(dist.values())
    return min(v for v, d in dist.items() if d == far)


def _grow(g, vertices, targets, rng, coupling=None):
    """Region-grow ``len(targets)`` blocks over ``vertices`` (one component)."""
    n = g.n_vertices
    allowed = np.zeros(n, dtype=bool)
    allowed[vertices] = True
    label = {}
    start = int(vertices[rng.integers(len(vertices))])
    seed_vertex = _pseudo_peripheral(g, allowed, start)
    for b, target in enumerate(targets):
        if target == 0:
            continue
        # priority: (-coupling strength, discovery order, vertex id)
        heap = [(0.0, 0, seed_vertex)]
        pushed = {seed_vertex}
        order = 1
        taken = 0
        strength = {}
        while taken < target:
            if not heap:
                rest = [v for v in vertices if allowed[v]]
                v0 = min(rest)
                heap = [(0.0, order, v0)]
                pushed.add(v0)
                order += 1
            _, _, u = heapq.heappop(heap)
            if not allowed[u]:
                continue
            allowed[u] = False
            label[u] = b
            taken += 1
            for v in g.adjacency[u]:
                v = int(v)
                if not allowed[v]:
                    continue
                if coupling is not None:
                    strength[v] = strength.get(v, 0.0) + abs(coupling(u, v))
                    heapq.heappush(heap, (-strength[v], order, v))
                    order += 1
                elif v not in pushed:
                    pushed.add(v)
                    heapq.heappush(heap, (0.0, order, v))
                    order += 1
        rest = [v for v in vertices if allowed[v]]
        if not rest:
            break
        # next block starts on the frontier of what has been taken, lowest id first
        frontier = sorted(v for v in rest if any(not allowed[int(w)] for w in g.adjacency[v]))
        seed_vertex = frontier[0] if frontier else min(rest)
    return label


def greedy_partition(g: Graph, k: int, balance_mode="uniform", seed: int = 0,
                     weights=None, coupling_matrix=None) -> Partition:
    """Seeded BFS region-growing partition into ``k`` blocks.

    ``balance_mode`` is ``"uniform"`` or ``"skewed"``; the skewed mode sizes
    blocks proportionally to ``weights`` (default: block 0 four times the
    others). When ``coupling_matrix`` is given,
    the frontier vertex most strongly coupled to the growing block is taken
    first, which tends to keep strong couplings inside blocks.
    """
    n = g.n_vertices
    k = int(k)
    if not 1 <= k <= n:
        raise InputError(f"cannot split {n} vertices into {k} blocks")
    if balance_mode == "uniform":
        weights = np.ones(k)
    elif balance_mode == "skewed":
        if weights is None:
            weights = [4.0] + [1.0] * (k - 1)   # one block four times the others
        if len(weights) != k:
            raise InputError("skewed partitioning needs one weight per block")
        weights = np.asarray(weights, dtype=float)
        if np.any(weights <= 0):
            raise InputError("block weights must be positive")
    else:
        raise InputError(f"unknown balance mode {balance_mode!r}")
    coupling = None
    if coupling_matrix is not None:
        csr = coupling_matrix.csr if hasattr(coupling_matrix, "csr") else coupling_matrix
        coupling = lambda u, v: csr[u, v]  # noqa: E731

    rng = np.random.default_rng(seed)
    comps = g.components()
    sizes = _split_counts(n, weights)
    assignment = np.full(n, -1, dtype=np.int64)
    if len(comps) <= k:
        # give every component at least one block, the rest by size
        n_blocks = np.ones(len(comps), dtype=int)
        extra = k - len(comps)
        if extra:
            n_blocks += _split_counts(extra, [len(c) for c in comps])
        # components can only host as many blocks as they have vertices
        for ci, c in enumerate(comps):
            while n_blocks[ci] > len(c):
                n_blocks[ci] -= 1
                spare = [j for j in range(len(comps)) if n_blocks[j] < len(comps[j])]
                n_blocks[max(spare, key=lambda j: len(comps[j]) - n_blocks[j])] += 1
        next_block = 0
        for ci, c in enumerate(comps):
            ids = list(range(next_block, next_block + n_blocks[ci]))
            next_block += n_blocks[ci]
            targets = _split_counts(len(c), weights[ids])
            targets = np.maximum(targets, 1)
            while targets.sum() > len(c):
                targets[np.argmax(targets)] -= 1
            label = _grow(g, np.asarray(c), targets, rng, coupling)
            for v, b in label.items():
                assignment[v] = ids[b]
    else:
        # more components than blocks: the k largest components seed the blocks,
        # every other component joins the block furthest below its target size
        order = sorted(range(len(comps)), key=lambda c: (-len(comps[c]), min(comps[c])))
        filled = np.zeros(k)
        for rank, ci in enumerate(order):
            b = rank if rank < k else int(np.argmax(sizes - filled))
            assignment[comps[ci]] = b
            filled[b] += len(comps[ci])
    return Partition(k, assignment)


def partition_stats(g: Graph, p: Partition, max_omega: int):
    """Table of block sizes per overlap: ``|V_k^w|`` and ring sizes ``|V_k^w \\ V_k^{w-1}|``.

    Returns a dict with ``"size"`` (shape ``(max_omega + 1, K)``, row 0 being
    ``|V_k|``), ``"ring"`` (shape ``(max_omega, K)``) and column totals.
    """
    max_omega = int(max_omega)
    if max_omega < 1:
        raise InputError("max_omega must be at least 1")
    K = p.k_blocks
    size = np.zeros((max_omega + 1, K), dtype=np.int64)
    for k, vk in enumerate(p.blocks()):
        d = bfs_distance(g, vk, cutoff=max_omega)
        for w in range(max_omega + 1):
            size[w, k] = int(np.count_nonzero(d <= w))
    ring = np.diff(size, axis=0)
    return {
        "size": size,
        "ring": ring,
        "size_total": size.sum(axis=1),
        "ring_total": ring.sum(axis=1),
    }


def format_stats_table(stats):
    """Render ``partition_stats`` output in the row layout used for reporting."""
    size, ring = stats["size"], stats["ring"]
    K = size.shape[1]
    rows = [["k", *[str(k + 1) for k in range(K)], "Total"]]
    rows.append(["|V_k|", *map(str, size[0]), str(size[0].sum())])
    for w in range(1, size.shape[0]):
        rows.append([f"|V_k^{w}|", *map(str, size[w]), str(size[w].sum())])
    for w in range(1, size.shape[0]):
        prev = "V_k" if w == 1 else f"V_k^{w - 1}"
        rows.append([f"|V_k^{w}\\{prev}|", *map(str, ring[w - 1]), str(ring[w - 1].sum())])
    return rows
