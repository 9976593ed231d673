"""Cluster-aware node reordering and the k x k cluster grid over the attention layout.

The reordering is a multilevel recursive bisection in the METIS tradition:
heavy-edge matching coarsens the graph, a greedy region-growing pass splits
the coarsest graph in two, and Fiduccia-Mattheyses boundary passes refine the
cut on the way back up. Recursing ``log2(k)`` times yields ``k`` parts; nodes
are then laid out part by part.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError
from .graph import Graph

BALANCE_TOL = 0.05
MAX_REFINE_PASSES = 10
INITIAL_TRIES = 4


@dataclass(eq=False)
class Permutation:
    forward: np.ndarray  # old id -> new position
    inverse: np.ndarray  # new position -> old id

    @classmethod
    def from_forward(cls, forward) -> "Permutation":
        forward = np.asarray(forward, dtype=np.int64)
        n = len(forward)
        if not np.array_equal(np.sort(forward), np.arange(n)):
            raise DataError("permutation is not a bijection on [0, N)")
        inverse = np.empty_like(forward)
        inverse[forward] = np.arange(n)
        return cls(forward, inverse)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n), np.arange(n))

    def __len__(self):
        return len(self.forward)

    def __eq__(self, other):
        return isinstance(other, Permutation) and np.array_equal(self.forward, other.forward)

    def dumps(self) -> str:
        return "".join(f"{old} {new}\n" for old, new in enumerate(self.forward.tolist()))

    @classmethod
    def loads(cls, text: str) -> "Permutation":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                old, new = (int(t) for t in line.split())
            except ValueError:
                raise DataError(f"line {lineno}: expected 'old new'") from None
            pairs.append((old, new))
        forward = np.full(len(pairs), -1, dtype=np.int64)
        for old, new in pairs:
            if not 0 <= old < len(pairs):
                raise DataError(f"old id {old} out of range")
            forward[old] = new
        return cls.from_forward(forward)


@dataclass(eq=False)
class ClusterGrid:
    k: int
    boundaries: np.ndarray
    cell_nnz: np.ndarray
    cell_density: np.ndarray

    @property
    def num_nodes(self) -> int:
        return int(self.boundaries[-1])

    def sizes(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def cell_of(self, positions: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.boundaries, positions, side="right") - 1


# -- weighted undirected working graph ---------------------------------------

class _WGraph:
    """Adjacency lists with integer edge and vertex weights."""

    __slots__ = ("n", "nbrs", "wts", "vw")

    def __init__(self, mat: sp.csr_matrix, vw: np.ndarray):
        mat = mat.tocsr()
        mat.sort_indices()
        self.n = mat.shape[0]
        ptr, idx, dat = mat.indptr, mat.indices, mat.data
        self.nbrs = [idx[ptr[i]:ptr[i + 1]].tolist() for i in range(self.n)]
        self.wts = [dat[ptr[i]:ptr[i + 1]].tolist() for i in range(self.n)]
        self.vw = [int(x) for x in vw]


def _symmetric_weights(g: Graph) -> sp.csr_matrix:
    a = g.to_scipy().astype(np.int64)
    w = (a + a.T).tocsr()
    w.setdiag(0)
    w.eliminate_zeros()
    return w


def _heavy_edge_matching(wg: _WGraph, rng: np.random.Generator, max_vw: int) -> np.ndarray:
    match = [-1] * wg.n
    for v in rng.permutation(wg.n).tolist():
        if match[v] >= 0:
            continue
        best, best_w = v, 0
        for u, w in zip(wg.nbrs[v], wg.wts[v]):
            if match[u] < 0 and u != v and wg.vw[u] + wg.vw[v] <= max_vw and w > best_w:
                best, best_w = u, w
        match[v] = best
        match[best] = v
    cmap = np.full(wg.n, -1, dtype=np.int64)
    nc = 0
    for v in range(wg.n):
        if cmap[v] < 0:
            cmap[v] = nc
            cmap[match[v]] = nc
            nc += 1
    return cmap


def _contract(mat: sp.csr_matrix, vw: np.ndarray, cmap: np.ndarray):
    nc = int(cmap.max()) + 1
    proj = sp.csr_matrix((np.ones(len(cmap), dtype=np.int64), (np.arange(len(cmap)), cmap)),
                         shape=(len(cmap), nc))
    coarse = (proj.T @ mat @ proj).tocsr()
    coarse.setdiag(0)
    coarse.eliminate_zeros()
    return coarse, np.bincount(cmap, weights=vw, minlength=nc).astype(np.int64)


def _cut(wg: _WGraph, part) -> int:
    total = 0
    for v in range(wg.n):
        pv = part[v]
        for u, w in zip(wg.nbrs[v], wg.wts[v]):
            if part[u] != pv:
                total += w
    return total // 2


def _bfs_farthest(wg: _WGraph, start: int) -> int:
    dist = {start: 0}
    frontier = [start]
    last = start
    while frontier:
        nxt = []
        for v in frontier:
            for u in wg.nbrs[v]:
                if u not in dist:
                    dist[u] = dist[v] + 1
                    nxt.append(u)
        if nxt:
            last = min(nxt)
        frontier = nxt
    return last


def _pseudo_peripheral(wg: _WGraph, start: int) -> int:
    v = start
    for _ in range(2):
        v = _bfs_farthest(wg, v)
    return v


def _grow_region(wg: _WGraph, seed: int, target: float, limit: int) -> list[int]:
    """Greedy graph growing: absorb the frontier node with the best cut gain."""
    part = [1] * wg.n
    weight = 0
    gain = [0] * wg.n
    rejected = [False] * wg.n
    seen = [False] * wg.n
    heap = [(0, seed)]
    seen[seed] = True
    next_free = 0
    while weight < target:
        while heap and (part[heap[0][1]] == 0 or rejected[heap[0][1]]
                        or -heap[0][0] != gain[heap[0][1]]):
            heapq.heappop(heap)
        if not heap:
            # disconnected remainder: restart from the lowest untouched id
            while next_free < wg.n and (seen[next_free] or part[next_free] == 0):
                next_free += 1
            if next_free == wg.n:
                break
            seen[next_free] = True
            heap = [(-gain[next_free], next_free)]
            continue
        _, v = heapq.heappop(heap)
        if weight + wg.vw[v] > limit:
            rejected[v] = True
            continue
        part[v] = 0
        weight += wg.vw[v]
        for u, w in zip(wg.nbrs[v], wg.wts[v]):
            if part[u] == 1 and not rejected[u]:
                gain[u] += w
                seen[u] = True
                heapq.heappush(heap, (-gain[u], u))
    return part


def _fm_refine(wg: _WGraph, part: list[int], limit: int, passes: int) -> list[int]:
    part = list(part)
    n = wg.n
    sidew = [0, 0]
    for v in range(n):
        sidew[part[v]] += wg.vw[v]
    cut = _cut(wg, part)

    def violation():
        return max(0, max(sidew) - limit)

    for _ in range(passes):
        gain = [0] * n
        for v in range(n):
            pv = part[v]
            for u, w in zip(wg.nbrs[v], wg.wts[v]):
                gain[v] += w if part[u] != pv else -w
        heaps = [[], []]
        for v in range(n):
            heaps[part[v]].append((-gain[v], v))
        heapq.heapify(heaps[0])
        heapq.heapify(heaps[1])
        locked = [False] * n
        moves = []
        start_key = (violation(), cut)
        best_key, best_len = start_key, 0
        stall = 0
        while stall < max(25, n // 10):
            choice = None
            for s in (0, 1):
                h = heaps[s]
                while h and (locked[h[0][1]] or part[h[0][1]] != s or -h[0][0] != gain[h[0][1]]):
                    heapq.heappop(h)
                if not h:
                    continue
                g_v, v = -h[0][0], h[0][1]
                t = 1 - s
                feasible = sidew[t] + wg.vw[v] <= limit or sidew[s] > sidew[t] + wg.vw[v]
                if not feasible:
                    continue
                key = (sidew[s] <= limit, -g_v, -sidew[s], v)
                if choice is None or key < choice[0]:
                    choice = (key, v, s)
            if choice is None:
                break
            _, v, s = choice
            heapq.heappop(heaps[s])
            t = 1 - s
            cut -= gain[v]
            part[v] = t
            locked[v] = True
            sidew[s] -= wg.vw[v]
            sidew[t] += wg.vw[v]
            gain[v] = -gain[v]
            for u, w in zip(wg.nbrs[v], wg.wts[v]):
                if locked[u]:
                    continue
                gain[u] += 2 * w if part[u] == s else -2 * w
                heapq.heappush(heaps[part[u]], (-gain[u], u))
            moves.append(v)
            key = (violation(), cut)
            if key < best_key:
                best_key, best_len = key, len(moves)
                stall = 0
            else:
                stall += 1
        for v in reversed(moves[best_len:]):
            s = part[v]
            t = 1 - s
            part[v] = t
            sidew[s] -= wg.vw[v]
            sidew[t] += wg.vw[v]
        cut = best_key[1]
        if best_key >= start_key:
            break
    return part


def _bisect(mat: sp.csr_matrix, rng: np.random.Generator, coarsen_to: int,
            tol: float, passes: int) -> np.ndarray:
    n = mat.shape[0]
    vw = np.ones(n, dtype=np.int64)
    total = n
    limit = max(-(-total // 2), int(np.floor(total / 2 * (1 + tol))))
    max_vw = max(1, int(1.5 * total / coarsen_to))

    levels = []
    cur_mat, cur_vw = mat, vw
    while cur_mat.shape[0] > coarsen_to:
        wg = _WGraph(cur_mat, cur_vw)
        cmap = _heavy_edge_matching(wg, rng, max_vw)
        if cmap.max() + 1 > 0.95 * cur_mat.shape[0]:
            break
        levels.append((cur_mat, cur_vw, cmap))
        cur_mat, cur_vw = _contract(cur_mat, cur_vw, cmap)

    wg = _WGraph(cur_mat, cur_vw)
    coarse_limit = max(limit, -(-total // 2) + int(cur_vw.max()) - 1)
    best = None
    starts = rng.choice(wg.n, size=min(INITIAL_TRIES, wg.n), replace=False).tolist()
    for s in starts:
        seed = _pseudo_peripheral(wg, s)
        part = _grow_region(wg, seed, total / 2, coarse_limit)
        part = _fm_refine(wg, part, coarse_limit, passes)
        key = (max(0, max(_side_weights(wg, part)) - coarse_limit), _cut(wg, part))
        if best is None or key < best[0]:
            best = (key, part)
    part = np.asarray(best[1], dtype=np.int64)

    for fine_mat, fine_vw, cmap in reversed(levels):
        part = part[cmap]
        fine = _WGraph(fine_mat, fine_vw)
        lim = limit if fine_mat is mat else max(limit, -(-total // 2) + int(fine_vw.max()) - 1)
        part = np.asarray(_fm_refine(fine, part.tolist(), lim, passes), dtype=np.int64)
    if not levels:
        fine = _WGraph(mat, vw)
        part = np.asarray(_fm_refine(fine, part.tolist(), limit, passes), dtype=np.int64)
    return part


def _side_weights(wg: _WGraph, part) -> list[int]:
    w = [0, 0]
    for v in range(wg.n):
        w[part[v]] += wg.vw[v]
    return w


def reorder(g: Graph, k: int, seed: int = 0, *, balance_tol: float = BALANCE_TOL,
            max_passes: int = MAX_REFINE_PASSES) -> Permutation:
    """Cluster-aware permutation placing each of ``k`` parts in a contiguous id range."""
    n = g.num_nodes
    if k < 1 or k & (k - 1):
        raise ConfigError(f"k must be a power of two, got {k}")
    if k > n:
        raise ConfigError(f"k={k} exceeds the number of nodes {n}")
    mat = _symmetric_weights(g)
    coarsen_to = max(2 * k, 64)
    rng = np.random.default_rng(seed)
    parts = np.zeros(n, dtype=np.int64)

    def split(ids: np.ndarray, depth: int, base: int) -> None:
        if depth == 0 or len(ids) < 2:
            parts[ids] = base
            return
        side = _bisect(mat[ids][:, ids], rng, coarsen_to, balance_tol, max_passes)
        split(ids[side == 0], depth - 1, base)
        split(ids[side == 1], depth - 1, base + (1 << (depth - 1)))

    split(np.arange(n), int(k).bit_length() - 1, 0)
    order = np.lexsort((np.arange(n), parts))
    forward = np.empty(n, dtype=np.int64)
    forward[order] = np.arange(n)
    return Permutation(forward, order)


def grid_boundaries(n: int, k: int) -> np.ndarray:
    return np.array([(a * n) // k for a in range(k + 1)], dtype=np.int64)


def build_cluster_grid(g: Graph, p: Permutation | None, k: int) -> ClusterGrid:
    """Cell edge counts of the k x k tiling of ``g``'s adjacency under ``p``."""
    n = g.num_nodes
    if k < 1 or k > max(n, 1):
        raise ConfigError(f"cluster dimensionality k={k} invalid for N={n}")
    if p is not None and len(p) != n:
        raise DataError("permutation length does not match the graph")
    bounds = grid_boundaries(n, k)
    rows, cols = g.edges()
    if p is not None:
        rows, cols = p.forward[rows], p.forward[cols]
    ca = np.searchsorted(bounds, rows, side="right") - 1
    cb = np.searchsorted(bounds, cols, side="right") - 1
    cell_nnz = np.bincount(ca * k + cb, minlength=k * k).reshape(k, k)
    sizes = np.diff(bounds)
    area = np.outer(sizes, sizes).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        cell_density = np.where(area > 0, cell_nnz / np.where(area > 0, area, 1), 0.0)
    return ClusterGrid(k, bounds, cell_nnz, cell_density)


def diagonal_edge_fraction(grid: ClusterGrid) -> float:
    total = int(grid.cell_nnz.sum())
    if total == 0:
        raise DataError("empty graph")
    return float(np.trace(grid.cell_nnz)) / total
