"""Directed graphs in compressed-row form, plus the structural tables built on them.

Row ``i`` of a :class:`Graph` lists the nodes ``i`` attends to, i.e. the arc
``(i, j)`` means token ``i`` sees token ``j``. Out-degree is the row length,
in-degree the column count.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np
import scipy.sparse as sp

from .errors import DataError, ParseError

SPD_MAX_NODES = 20_000
_GTF_MAGIC = b"GTF1"


@dataclass(eq=False)
class Graph:
    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    features: np.ndarray = None
    labels: np.ndarray | int | None = None

    def __post_init__(self):
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(self.col_indices, dtype=np.int64)
        n = int(self.num_nodes)
        if self.row_offsets.shape != (n + 1,):
            raise DataError(f"row_offsets must have length {n + 1}")
        if self.row_offsets[0] != 0 or np.any(np.diff(self.row_offsets) < 0):
            raise DataError("row_offsets must start at 0 and be non-decreasing")
        if self.row_offsets[-1] != len(self.col_indices):
            raise DataError("row_offsets[N] must equal nnz")
        if len(self.col_indices) and (self.col_indices.min() < 0 or self.col_indices.max() >= n):
            raise DataError("column index out of range")
        if len(self.col_indices) > 1:
            # within a row, columns must be strictly increasing (sorted, no duplicates)
            step = np.diff(self.col_indices)
            row_start = np.zeros(len(self.col_indices), dtype=bool)
            row_start[self.row_offsets[:-1][np.diff(self.row_offsets) > 0]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise DataError("columns within a row must be sorted and unique")
        if self.features is None:
            self.features = np.ones((n, 1))
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DataError(f"features must have shape [{n}, f]")
        if self.labels is not None and not np.isscalar(self.labels):
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise DataError(f"node labels must have length {n}")

    @classmethod
    def from_edges(cls, num_nodes: int, src, dst, features=None, labels=None) -> "Graph":
        """Build a graph from arc arrays; duplicates collapse and rows come out sorted."""
        src = np.asarray(src, dtype=np.int64).ravel()
        dst = np.asarray(dst, dtype=np.int64).ravel()
        if src.shape != dst.shape:
            raise DataError("src and dst must have the same length")
        if len(src) and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_nodes):
            raise DataError("edge endpoint out of range")
        keys = np.unique(src * num_nodes + dst)
        rows, cols = np.divmod(keys, num_nodes) if num_nodes else (keys, keys)
        offsets = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=num_nodes), out=offsets[1:])
        return cls(num_nodes, offsets, cols, features, labels)

    @property
    def nnz(self) -> int:
        return len(self.col_indices)

    def row_ids(self) -> np.ndarray:
        """Source node of every stored arc, aligned with ``col_indices``."""
        return np.repeat(np.arange(self.num_nodes), np.diff(self.row_offsets))

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return self.row_ids(), self.col_indices.copy()

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[i]:self.row_offsets[i + 1]]

    def has_edge(self, i: int, j: int) -> bool:
        row = self.neighbors(i)
        pos = np.searchsorted(row, j)
        return bool(pos < len(row) and row[pos] == j)

    def out_degree(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.col_indices, minlength=self.num_nodes)

    def to_scipy(self) -> sp.csr_matrix:
        data = np.ones(self.nnz, dtype=np.int8)
        return sp.csr_matrix((data, self.col_indices, self.row_offsets), shape=(self.num_nodes,) * 2)

    def with_features(self, features=None, labels=None) -> "Graph":
        return Graph(self.num_nodes, self.row_offsets, self.col_indices,
                     self.features if features is None else features,
                     self.labels if labels is None else labels)

    def __repr__(self):
        return f"Graph(N={self.num_nodes}, nnz={self.nnz}, f={self.features.shape[1]})"


@dataclass(eq=False)
class SpdTable:
    """All-pairs hop distances, capped at ``max_dist``.

    Pairs further than ``max_dist`` hops apart, or not connected at all, hold
    the bucket ``max_dist + 1`` (:attr:`unreachable`).
    """

    max_dist: int
    buckets: np.ndarray = field(repr=False)

    @property
    def unreachable(self) -> int:
        return self.max_dist + 1

    @property
    def num_nodes(self) -> int:
        return self.buckets.shape[0]

    def __getitem__(self, pair) -> int:
        i, j = pair
        return int(self.buckets[i, j])

    def lookup(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return self.buckets[rows, cols].astype(np.int64)

    def permuted(self, forward: np.ndarray) -> "SpdTable":
        """Table re-indexed so that entry (forward[i], forward[j]) holds spd(i, j)."""
        inverse = np.empty_like(forward)
        inverse[forward] = np.arange(len(forward))
        return SpdTable(self.max_dist, self.buckets[np.ix_(inverse, inverse)])


def _lines(source) -> Iterable[str]:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode()).readlines()
    if isinstance(source, str):
        return io.StringIO(source).readlines()
    if isinstance(source, os.PathLike):
        with open(source, "r") as fh:
            return fh.readlines()
    data = source.read()
    return (data.decode() if isinstance(data, bytes) else data).splitlines()


def load_edge_list(source, num_nodes_hint: int | None = None, *, undirected: bool = False,
                   features=None, labels=None) -> Graph:
    """Parse a whitespace separated ``src dst`` edge list.

    ``source`` may be bytes, text, a path-like or a readable stream. Lines starting
    with ``#`` are comments. With ``undirected`` every line emits both arcs.
    """
    src, dst = [], []
    for lineno, line in enumerate(_lines(source), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 2:
            raise ParseError(f"expected 'src dst', got {line!r}", lineno)
        try:
            a, b = int(tokens[0]), int(tokens[1])
        except ValueError:
            raise ParseError(f"malformed token in {line!r}", lineno) from None
        if a < 0 or b < 0:
            raise ParseError("node ids must be non-negative", lineno)
        if num_nodes_hint is not None and max(a, b) >= num_nodes_hint:
            raise DataError(f"line {lineno}: node id {max(a, b)} out of range for N={num_nodes_hint}")
        src.append(a)
        dst.append(b)
    if num_nodes_hint is None:
        if not src:
            raise DataError("empty graph")
        n = max(max(src), max(dst)) + 1
    else:
        n = num_nodes_hint
    if undirected:
        src, dst = src + dst, dst + src
    return Graph.from_edges(n, src, dst, features, labels)


def save_edge_list(g: Graph, path) -> None:
    rows, cols = g.edges()
    with open(path, "w") as fh:
        fh.write(f"# N={g.num_nodes} nnz={g.nnz}\n")
        for a, b in zip(rows.tolist(), cols.tolist()):
            fh.write(f"{a} {b}\n")


def load_features(path) -> np.ndarray:
    """Read a feature matrix from CSV or from the ``GTF1`` little-endian binary format."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == _GTF_MAGIC:
            return _read_gtf(fh)
    try:
        mat = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"bad feature CSV {path}: {exc}") from None
    return mat


def _read_gtf(fh: BinaryIO) -> np.ndarray:
    header = fh.read(16)
    if len(header) != 16:
        raise DataError("truncated GTF1 header")
    n, f = struct.unpack("<QQ", header)
    payload = fh.read()
    if len(payload) != 4 * n * f:
        raise DataError(f"GTF1 payload holds {len(payload)} bytes, expected {4 * n * f}")
    return np.frombuffer(payload, dtype="<f4").reshape(n, f).astype(np.float64)


def save_features(features: np.ndarray, path, binary: bool = False) -> None:
    features = np.asarray(features)
    if binary:
        with open(path, "wb") as fh:
            fh.write(_GTF_MAGIC)
            fh.write(struct.pack("<QQ", *features.shape))
            fh.write(features.astype("<f4").tobytes())
    else:
        np.savetxt(path, features, delimiter=",", fmt="%.8g")


def add_self_loops(g: Graph) -> Graph:
    """Return ``g`` with every (i, i) arc present. Idempotent."""
    rows, cols = g.edges()
    loops = np.arange(g.num_nodes)
    return Graph.from_edges(g.num_nodes, np.concatenate([rows, loops]),
                            np.concatenate([cols, loops]), g.features, g.labels)


def has_all_self_loops(g: Graph) -> bool:
    rows, cols = g.edges()
    return np.count_nonzero(rows == cols) == g.num_nodes


def density(g: Graph) -> float:
    """Fraction of nonzero entries in the N x N adjacency matrix."""
    if g.num_nodes < 1:
        raise DataError("density of an empty graph is undefined")
    return g.nnz / (g.num_nodes * g.num_nodes)


def undirected_adjacency(g: Graph, self_loops: bool = False) -> sp.csr_matrix:
    a = g.to_scipy().astype(np.int8)
    a = ((a + a.T) > 0).astype(np.int8)
    if not self_loops:
        a.setdiag(0)
        a.eliminate_zeros()
    return a.tocsr()


def spd_table(g: Graph, max_dist: int, *, max_nodes: int = SPD_MAX_NODES) -> SpdTable:
    """Hop distances over the undirected structure of ``g``, capped at ``max_dist``."""
    n = g.num_nodes
    if n > max_nodes:
        raise DataError(f"spd_table refuses N={n} > {max_nodes} (all-pairs table would not fit)")
    if max_dist < 0:
        raise DataError("max_dist must be non-negative")
    dtype = np.uint8 if max_dist + 1 < 256 else np.uint16
    unreachable = max_dist + 1
    adj = undirected_adjacency(g).astype(np.float32)
    dist = np.full((n, n), unreachable, dtype=dtype)
    chunk = 1024
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        block = dist[start:stop]
        seen = np.zeros((stop - start, n), dtype=bool)
        seen[np.arange(stop - start), np.arange(start, stop)] = True
        block[seen] = 0
        frontier = seen.astype(np.float32)
        for hop in range(1, max_dist + 1):
            reach = np.asarray(adj.T @ frontier.T).T > 0
            new = reach & ~seen
            if not new.any():
                break
            block[new] = hop
            seen |= new
            frontier = new.astype(np.float32)
    return SpdTable(max_dist, dist)


def induced_subgraph(g: Graph, nodes) -> Graph:
    """Subgraph on ``nodes``; node ``nodes[t]`` becomes ``t``."""
    nodes = np.asarray(nodes, dtype=np.int64).ravel()
    if len(nodes) and (nodes.min() < 0 or nodes.max() >= g.num_nodes):
        raise DataError("induced_subgraph: node index out of range")
    if len(np.unique(nodes)) != len(nodes):
        raise DataError("induced_subgraph: duplicate node index")
    relabel = np.full(g.num_nodes, -1, dtype=np.int64)
    relabel[nodes] = np.arange(len(nodes))
    rows, cols = g.edges()
    keep = (relabel[rows] >= 0) & (relabel[cols] >= 0)
    labels = g.labels
    if labels is not None and not np.isscalar(labels):
        labels = labels[nodes]
    return Graph.from_edges(len(nodes), relabel[rows[keep]], relabel[cols[keep]],
                            g.features[nodes], labels)


def permute(g: Graph, forward: np.ndarray) -> Graph:
    """Relabel node ``i`` as ``forward[i]``; features and labels move with their node."""
    forward = np.asarray(forward, dtype=np.int64)
    inverse = np.empty_like(forward)
    inverse[forward] = np.arange(len(forward))
    rows, cols = g.edges()
    labels = g.labels
    if labels is not None and not np.isscalar(labels):
        labels = labels[inverse]
    return Graph.from_edges(g.num_nodes, forward[rows], forward[cols], g.features[inverse], labels)
