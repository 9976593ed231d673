"""Cluster-sparse layout construction and the auto tuner that steers it.

Sparse cells of the cluster grid are "transferred": their scattered edges are
replaced by a few dense ``d_b x d_b`` sub-blocks, giving regular tiles
instead of irregular gathers. The tuner moves the transfer threshold along a
fixed ladder by watching how fast the smoothed loss is falling.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cluster import ClusterGrid
from .errors import ConfigError, DataError
from .graph import Graph
from .kernels import Pattern

REFERENCE_L2_BYTES = 6 * 1024 * 1024
DEFAULT_K_DIVISOR = 1536  # gives k = 8 at d = 64 with the reference L2 size
DEFAULT_DELTA = 10
THRESHOLD_MULTIPLIERS = (1.5, 5.0, 7.0, 10.0)
SEARCH_MAX_ORIGINS = 4096
SEARCH_BUDGET = 200_000


class Strategy(str, enum.Enum):
    INDOLENT = "indolent"
    ELASTIC = "elastic"


class PackingError(DataError):
    pass


# -- sub-block packing --------------------------------------------------------

def _window_counts(occ: np.ndarray, d: int) -> np.ndarray:
    s = np.zeros((occ.shape[0] + 1, occ.shape[1] + 1), dtype=np.int64)
    s[1:, 1:] = occ.cumsum(0).cumsum(1)
    return s[d:, d:] - s[:-d, d:] - s[d:, :-d] + s[:-d, :-d]


def _greedy(counts: np.ndarray, d: int, b: int) -> list[tuple[int, int]] | None:
    blocked = np.zeros(counts.shape, dtype=bool)
    chosen = []
    for _ in range(b):
        masked = np.where(blocked, -1, counts)
        flat = int(np.argmax(masked))  # first max in row-major order = smallest origin
        if masked.flat[flat] < 0:
            return None
        r, c = divmod(flat, counts.shape[1])
        chosen.append((r, c))
        blocked[max(0, r - d + 1):r + d, max(0, c - d + 1):c + d] = True
    return chosen


def _search(counts: np.ndarray, d: int, b: int, total: int, budget: int):
    """Depth-first branch and bound over tiles in greedy order.

    Candidates are sorted by (covered edges desc, row, col), so the first leaf
    reached is exactly the greedy packing; later leaves replace it only when
    they cover strictly more edges.
    """
    order = sorted(((-int(counts[r, c]), r, c) for r in range(counts.shape[0])
                    for c in range(counts.shape[1])))
    cand = [(r, c, -neg) for neg, r, c in order]
    vals = [v for _, _, v in cand]
    best_cov, best = -1, None
    chosen: list[tuple[int, int]] = []
    steps = 0

    def free(r, c):
        return all(abs(r - r2) >= d or abs(c - c2) >= d for r2, c2 in chosen)

    def dfs(start: int, cov: int) -> bool:
        nonlocal best_cov, best, steps
        left = b - len(chosen)
        if left == 0:
            if cov > best_cov:
                best_cov, best = cov, list(chosen)
            return best_cov == total
        for i in range(start, len(cand)):
            steps += 1
            if steps > budget and (best is not None or steps > 10 * budget):
                return True
            if min(total, cov + sum(vals[i:i + left])) <= best_cov:
                return False
            r, c, v = cand[i]
            if not free(r, c):
                continue
            chosen.append((r, c))
            done = dfs(i + 1, cov + v)
            chosen.pop()
            if done:
                return True
        return False

    dfs(0, 0)
    return best


def pack_subblocks(cell_edges, cell_shape: tuple[int, int], d_b: int, *,
                   budget: int = SEARCH_BUDGET) -> list[tuple[int, int]]:
    """Choose ``ceil(nnz / d_b^2)`` non-overlapping ``d_b x d_b`` tiles covering the most edges.

    ``cell_edges`` are (row, col) pairs local to the cell. Returns tile origins,
    in the order they were selected.
    """
    n_a, n_b = cell_shape
    if d_b < 1 or d_b > min(n_a, n_b):
        raise PackingError(f"d_b={d_b} does not fit a {n_a}x{n_b} cell")
    edges = np.asarray(cell_edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        raise PackingError("cell has no edges")
    occ = np.zeros((n_a, n_b), dtype=np.int64)
    occ[edges[:, 0], edges[:, 1]] = 1
    nnz = int(occ.sum())
    b = -(-nnz // (d_b * d_b))
    counts = _window_counts(occ, d_b)
    greedy = _greedy(counts, d_b, b)
    if counts.size <= SEARCH_MAX_ORIGINS:
        found = _search(counts, d_b, b, nnz, budget)
        if found is not None:
            return found
    if greedy is None:
        raise PackingError(f"cannot place {b} non-overlapping {d_b}x{d_b} tiles in a {n_a}x{n_b} cell")
    return greedy


# -- layout -------------------------------------------------------------------

@dataclass(eq=False)
class ClusterSparseLayout:
    k: int
    d_b: int
    boundaries: np.ndarray
    transferred: np.ndarray  # k x k bool
    subblocks: dict = field(repr=False)  # (a, b) -> list of local tile origins
    dropped_edges: int
    infeasible_cells: int
    threshold: float
    strategy: Strategy
    pattern: Pattern = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return int(self.boundaries[-1])

    @property
    def num_transferred(self) -> int:
        return int(self.transferred.sum())

    @property
    def pair_count(self) -> int:
        return self.pattern.npairs

    def dump(self) -> str:
        lines = [f"# layout k={self.k} d_b={self.d_b} strategy={self.strategy.value} "
                 f"threshold={self.threshold:.6g} pairs={self.pair_count} "
                 f"dropped_edges={self.dropped_edges} infeasible_cells={self.infeasible_cells}"]
        for a in range(self.k):
            for b in range(self.k):
                if self.transferred[a, b]:
                    tiles = " ".join(f"{r},{c}" for r, c in self.subblocks[(a, b)])
                    lines.append(f"cell {a} {b} transferred {len(self.subblocks[(a, b)])} {tiles}")
                else:
                    lines.append(f"cell {a} {b} untouched")
        return "\n".join(lines) + "\n"


def build_layout(grid: ClusterGrid, edges: Graph, strategy: Strategy | str, beta_thre: float,
                 beta_g: float, d_b: int) -> ClusterSparseLayout:
    """Reform ``edges`` (already in grid order) into a cluster-sparse pattern.

    Cells whose density falls below the active threshold (``beta_g`` for the
    indolent strategy, ``beta_thre`` for the elastic one) trade their edges for
    packed sub-blocks. Edges a transferred cell's tiles miss are dropped, except
    self-loops, which always stay so every token still attends to itself.
    Empty cells are never transferred, and cells the tiles cannot be placed
    in stay untouched (counted in ``infeasible_cells``).
    """
    strategy = Strategy(strategy)
    n, k = edges.num_nodes, grid.k
    if grid.num_nodes != n:
        raise DataError(f"grid covers {grid.num_nodes} nodes, graph has {n}")
    bounds = grid.boundaries
    rows, cols = edges.edges()
    ca = np.searchsorted(bounds, rows, side="right") - 1
    cb = np.searchsorted(bounds, cols, side="right") - 1
    cell = ca * k + cb
    if not np.array_equal(np.bincount(cell, minlength=k * k).reshape(k, k), grid.cell_nnz):
        raise DataError("graph does not match the cluster grid (was it permuted?)")
    # densities never exceed 1, so a larger threshold (say 5 * beta_G) would only pull in full cells
    threshold = min(beta_g if strategy is Strategy.INDOLENT else beta_thre, 1.0)

    keep = np.ones(len(rows), dtype=bool)
    extra_keys = []
    transferred = np.zeros((k, k), dtype=bool)
    subblocks = {}
    dropped = infeasible = 0
    order = np.argsort(cell, kind="stable")
    starts = np.searchsorted(cell[order], np.arange(k * k + 1))
    for a in range(k):
        for b in range(k):
            nnz = grid.cell_nnz[a, b]
            if nnz == 0 or not grid.cell_density[a, b] < threshold:
                continue
            idx = order[starts[a * k + b]:starts[a * k + b + 1]]
            r0, c0 = bounds[a], bounds[b]
            local = np.stack([rows[idx] - r0, cols[idx] - c0], axis=1)
            shape = (bounds[a + 1] - r0, bounds[b + 1] - c0)
            try:
                tiles = pack_subblocks(local, shape, d_b)
            except PackingError:
                infeasible += 1
                continue
            transferred[a, b] = True
            subblocks[(a, b)] = tiles
            covered = np.zeros(len(idx), dtype=bool)
            for r, c in tiles:
                covered |= ((local[:, 0] >= r) & (local[:, 0] < r + d_b)
                            & (local[:, 1] >= c) & (local[:, 1] < c + d_b))
                tr, tc = np.meshgrid(np.arange(r, r + d_b) + r0, np.arange(c, c + d_b) + c0, indexing="ij")
                extra_keys.append((tr * n + tc).ravel())
            loops = rows[idx] == cols[idx]
            dropped += int(np.count_nonzero(~covered & ~loops))
            keep[idx[~loops]] = False

    edge_keys = rows * n + cols
    keys = np.unique(np.concatenate([edge_keys[keep]] + extra_keys)) if extra_keys else edge_keys[keep]
    prow, pcol = np.divmod(keys, n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(prow, minlength=n), out=indptr[1:])
    learned = np.isin(keys, edge_keys)
    pattern = Pattern(n, "cluster", indptr, pcol, learned)
    return ClusterSparseLayout(k, d_b, bounds.copy(), transferred, subblocks, dropped,
                               infeasible, float(threshold), strategy, pattern)


# -- auto tuner ---------------------------------------------------------------

def threshold_ladder(beta_g: float) -> list[float]:
    """Candidate transfer thresholds, de-duplicated, sorted, clamped to [0, 1]."""
    raw = [0.0, beta_g] + [m * beta_g for m in THRESHOLD_MULTIPLIERS] + [1.0]
    return sorted({min(1.0, max(0.0, float(x))) for x in raw})


@dataclass
class TunerState:
    threshold_set: list[float]
    idx: int
    delta: int = DEFAULT_DELTA
    F: float | None = None
    ldr_history: list[tuple[int, float]] = field(default_factory=list)

    @classmethod
    def initial(cls, beta_g: float, delta: int = DEFAULT_DELTA) -> "TunerState":
        ladder = threshold_ladder(beta_g)
        return cls(ladder, ladder.index(min(1.0, max(0.0, float(beta_g)))), delta)

    @property
    def beta_thre(self) -> float:
        return self.threshold_set[self.idx]


def tuner_update(state: TunerState, loss: float, epoch_time: float, epoch: int) -> TunerState:
    """Fold one epoch's loss into the smoothed loss and step the threshold.

    The first call only seeds the running average. Every later call appends a
    loss descent rate; once ``delta`` earlier rates exist, the threshold moves
    one rung up if the current rate is no lower than the rate ``delta`` epochs
    back, and one rung down otherwise.
    """
    if not epoch_time > 0:
        raise ValueError(f"epoch_time must be positive, got {epoch_time}")
    if not math.isfinite(loss):
        raise ValueError("loss must be finite")
    if state.F is None:
        return replace(state, F=float(loss), ldr_history=list(state.ldr_history))
    f_new = 0.9 * state.F + 0.1 * loss
    ldr = (f_new - state.F) / epoch_time
    history = list(state.ldr_history) + [(epoch, ldr)]
    idx = state.idx
    if len(history) > state.delta:
        earlier = history[-1 - state.delta][1]
        if ldr >= earlier:
            idx = min(idx + 1, len(state.threshold_set) - 1)
        else:
            idx = max(idx - 1, 0)
    return replace(state, F=f_new, ldr_history=history, idx=idx)


def select_k(l2_bytes: int, d: int, i: int = DEFAULT_K_DIVISOR) -> int:
    """Cluster dimensionality from the L2 size, rounded down to a power of two."""
    if l2_bytes <= 0 or d <= 0 or i <= 0:
        raise ConfigError("select_k arguments must be positive")
    raw = math.isqrt(l2_bytes // (i * d))
    if raw < 1:
        raise ConfigError(f"L2 of {l2_bytes} bytes is too small for d={d}, i={i}")
    return 1 << (raw.bit_length() - 1)


def select_db(profile: dict, candidates=None) -> int:
    """Sub-block size with the best measured throughput; ties go to the median candidate."""
    if not profile:
        raise ConfigError("empty d_b profile")
    cands = sorted(profile if candidates is None else set(candidates) | set(profile))
    mid = len(cands) // 2
    best = max(profile.values())
    tied = [d for d in profile if profile[d] == best]
    return min(tied, key=lambda d: (abs(cands.index(d) - mid), d))
