"""Choosing between topology-induced and fully-connected attention.

The sparse pattern is used only when three conditions hold for the sequence
graph: every token attends to itself, a Hamiltonian path is known to exist
(checked with Dirac's minimum-degree bound, so a failure only means
"unknown"), and every token can reach every other one within ``L`` layers.
On top of that a dense epoch is scheduled every ``dense_period`` epochs.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

import numpy as np

from .graph import Graph, undirected_adjacency

DEFAULT_DENSE_PERIOD = 10


class Mode(str, enum.Enum):
    SPARSE = "sparse"
    DENSE = "dense"


class Reason(str, enum.Enum):
    CONDITIONS_FAILED = "conditions_failed"
    SCHEDULED_DENSE = "scheduled_dense"
    CONDITIONS_PASSED = "conditions_passed"


@dataclass(frozen=True)
class ConditionReport:
    c1_self_attend: bool
    c2_hamiltonian_heuristic: str  # "pass" | "unknown"
    c3_reachable_within_L: bool
    L: int
    diameter_lower_bound: int | None = None
    sweep_endpoints: tuple[int, int] | None = None

    @property
    def all_pass(self) -> bool:
        return self.c1_self_attend and self.c2_hamiltonian_heuristic == "pass" and self.c3_reachable_within_L


@dataclass(frozen=True)
class AttentionMode:
    mode: Mode
    reason: Reason

    def __post_init__(self):
        if self.mode is Mode.SPARSE and self.reason is not Reason.CONDITIONS_PASSED:
            raise ValueError("sparse mode requires reason conditions_passed")

    @property
    def sparse(self) -> bool:
        return self.mode is Mode.SPARSE


def _bfs(nbrs: list[list[int]], src: int) -> np.ndarray:
    dist = np.full(len(nbrs), -1, dtype=np.int64)
    dist[src] = 0
    queue = deque([src])
    while queue:
        v = queue.popleft()
        for u in nbrs[v]:
            if dist[u] < 0:
                dist[u] = dist[v] + 1
                queue.append(u)
    return dist


def hop_distances(g: Graph, src: int) -> np.ndarray:
    """Undirected BFS hop counts from ``src`` (-1 where unreachable)."""
    adj = undirected_adjacency(g)
    nbrs = [adj.indices[adj.indptr[i]:adj.indptr[i + 1]].tolist() for i in range(g.num_nodes)]
    return _bfs(nbrs, src)


def check_conditions(g_seq: Graph, L: int) -> ConditionReport:
    n = g_seq.num_nodes
    rows, cols = g_seq.edges()
    c1 = np.count_nonzero(rows == cols) == n
    adj = undirected_adjacency(g_seq)
    degree = np.diff(adj.indptr)
    c2 = "pass" if n > 0 and degree.min() >= n / 2 else "unknown"
    if n == 0:
        return ConditionReport(c1, c2, False, L)
    nbrs = [adj.indices[adj.indptr[i]:adj.indptr[i + 1]].tolist() for i in range(n)]
    first = _bfs(nbrs, 0)
    if np.any(first < 0):
        return ConditionReport(c1, c2, False, L)
    # double sweep: the eccentricity of a farthest node lower-bounds the diameter
    u = int(np.argmax(first))
    second = _bfs(nbrs, u)
    v = int(np.argmax(second))
    lower = int(second[v])
    return ConditionReport(c1, c2, lower <= L, L, lower, (u, v))


def select_mode(report: ConditionReport, epoch: int, dense_period: int = DEFAULT_DENSE_PERIOD) -> AttentionMode:
    if dense_period < 1:
        raise ValueError("dense_period must be >= 1")
    if epoch % dense_period == 0:
        return AttentionMode(Mode.DENSE, Reason.SCHEDULED_DENSE)
    if not report.all_pass:
        return AttentionMode(Mode.DENSE, Reason.CONDITIONS_FAILED)
    return AttentionMode(Mode.SPARSE, Reason.CONDITIONS_PASSED)


def mode_record(epoch: int, mode: AttentionMode) -> str:
    return f"{epoch} {mode.mode.value} {mode.reason.value}"
