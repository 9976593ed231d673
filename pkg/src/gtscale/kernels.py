"""Scaled dot-product attention over three pair patterns, with exact MAC counts.

A pattern is the set of (query, key) pairs that get a score. Dense attention
scores every pair; the sparse patterns keep a CSR pair list and run the
score step as an SDDMM, the normalisation as a segmented softmax and the
aggregation as an SpMM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DataError, NonFiniteError
from .graph import Graph


@dataclass
class AttnInputs:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    bias: np.ndarray | None = None  # [S, S] for dense, [npairs] for pair patterns

    @property
    def seq_len(self) -> int:
        return self.q.shape[0]


@dataclass
class MacCounter:
    score_macs: int = 0
    weight_macs: int = 0

    def __iadd__(self, other: "MacCounter"):
        self.score_macs += other.score_macs
        self.weight_macs += other.weight_macs
        return self

    def __add__(self, other: "MacCounter") -> "MacCounter":
        return MacCounter(self.score_macs + other.score_macs, self.weight_macs + other.weight_macs)


@dataclass(eq=False)
class Pattern:
    """Attended pair set over ``num_rows`` tokens.

    ``indptr``/``indices`` are ``None`` for the dense pattern. ``learned`` marks
    pairs whose bias comes from the learned table; fabricated pairs (introduced
    by sub-block packing) get a fixed zero bias.
    """

    num_rows: int
    kind: str = "dense"
    indptr: np.ndarray | None = None
    indices: np.ndarray | None = None
    learned: np.ndarray | None = None

    @classmethod
    def dense(cls, s: int) -> "Pattern":
        return cls(s, "dense")

    @classmethod
    def from_graph(cls, g: Graph, kind: str = "edge") -> "Pattern":
        return cls(g.num_nodes, kind, g.row_offsets, g.col_indices, np.ones(g.nnz, dtype=bool))

    @property
    def is_dense(self) -> bool:
        return self.indptr is None

    @property
    def npairs(self) -> int:
        return self.num_rows * self.num_rows if self.is_dense else len(self.indices)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        if self.is_dense:
            r, c = np.divmod(np.arange(self.num_rows * self.num_rows), self.num_rows)
            return r, c
        return np.repeat(np.arange(self.num_rows), np.diff(self.indptr)), self.indices

    def learned_mask(self) -> np.ndarray:
        if self.learned is None:
            return np.ones(self.npairs, dtype=bool)
        return self.learned


@dataclass(eq=False)
class AttnContext:
    """Forward state kept for the backward pass."""

    inputs: AttnInputs
    pattern: Pattern
    weights: np.ndarray  # softmax probabilities, [S, S] or [npairs]
    scale: float
    dropout: np.ndarray | None = None  # multiplier applied to weights, same shape


@dataclass
class AttnGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    dbias: np.ndarray  # [S, S] for dense, [npairs] otherwise


def _check(inp: AttnInputs, pattern: Pattern) -> None:
    s = inp.q.shape[0]
    if inp.k.shape != inp.q.shape or inp.v.shape[0] != s:
        raise DataError(f"shape mismatch: Q{inp.q.shape} K{inp.k.shape} V{inp.v.shape}")
    if inp.q.shape[1] < 1:
        raise DataError("d_K must be at least 1")
    if pattern.num_rows != s:
        raise DataError(f"pattern covers {pattern.num_rows} tokens, sequence has {s}")
    for name in ("q", "k", "v", "bias"):
        arr = getattr(inp, name)
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in {name}")
    if inp.bias is not None:
        want = (s, s) if pattern.is_dense else (pattern.npairs,)
        if inp.bias.shape != want:
            raise DataError(f"bias shape {inp.bias.shape} does not cover the pattern {want}")
    if not pattern.is_dense and np.any(np.diff(pattern.indptr) == 0):
        raise DataError("node attends to nothing; run add_self_loops")


def _segment_rows(pattern: Pattern) -> np.ndarray:
    return np.repeat(np.arange(pattern.num_rows), np.diff(pattern.indptr))


def attention_forward(inp: AttnInputs, pattern: Pattern, dropout: np.ndarray | None = None):
    """Run attention under ``pattern``; returns ``(output, counter, context)``."""
    _check(inp, pattern)
    q, k, v = inp.q, inp.k, inp.v
    d_k, d_v = q.shape[1], v.shape[1]
    scale = 1.0 / np.sqrt(d_k)
    if pattern.is_dense:
        scores = (q @ k.T) * scale
        if inp.bias is not None:
            scores = scores + inp.bias
        scores = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        w = e / e.sum(axis=1, keepdims=True)
        out = (w if dropout is None else w * dropout) @ v
    else:
        rows, cols, starts = _segment_rows(pattern), pattern.indices, pattern.indptr[:-1]
        scores = np.einsum("ij,ij->i", q[rows], k[cols]) * scale
        if inp.bias is not None:
            scores = scores + inp.bias
        scores = scores - np.maximum.reduceat(scores, starts)[rows]
        e = np.exp(scores)
        w = e / np.add.reduceat(e, starts)[rows]
        mat = sp.csr_matrix((w if dropout is None else w * dropout, cols, pattern.indptr),
                            shape=(pattern.num_rows, pattern.num_rows))
        out = np.asarray(mat @ v)
    counter = MacCounter(pattern.npairs * d_k, pattern.npairs * d_v)
    return out, counter, AttnContext(inp, pattern, w, scale, dropout)


def dense_attention(inp: AttnInputs, dropout: np.ndarray | None = None):
    out, counter, _ = attention_forward(inp, Pattern.dense(inp.seq_len), dropout)
    return out, counter


def edge_sparse_attention(inp: AttnInputs, g: Graph, dropout: np.ndarray | None = None):
    """Each token attends only to its out-neighbours in ``g``."""
    if g.num_nodes != inp.seq_len:
        raise DataError(f"graph has {g.num_nodes} nodes, sequence has {inp.seq_len} tokens")
    out, counter, _ = attention_forward(inp, Pattern.from_graph(g), dropout)
    return out, counter


def cluster_sparse_attention(inp: AttnInputs, layout, dropout: np.ndarray | None = None):
    """Attention over a reformed cluster-sparse layout (see :mod:`gtscale.reformation`)."""
    if layout.num_nodes != inp.seq_len:
        raise DataError(f"layout built for {layout.num_nodes} tokens, sequence has {inp.seq_len}")
    out, counter, _ = attention_forward(inp, layout.pattern, dropout)
    return out, counter


def attention_backward(inp: AttnInputs, pattern: Pattern, upstream_grad: np.ndarray, *,
                       ctx: AttnContext | None = None, dropout: np.ndarray | None = None) -> AttnGrads:
    """Gradients of ``sum(upstream_grad * output)`` w.r.t. Q, K, V and the bias.

    Pass the ``ctx`` from :func:`attention_forward` to skip recomputing the forward.
    """
    if ctx is None:
        _, _, ctx = attention_forward(inp, pattern, dropout)
    q, k, v = inp.q, inp.k, inp.v
    if upstream_grad.shape != (q.shape[0], v.shape[1]):
        raise DataError(f"upstream grad shape {upstream_grad.shape} != {(q.shape[0], v.shape[1])}")
    w, mult, scale = ctx.weights, ctx.dropout, ctx.scale
    if pattern.is_dense:
        wd = w if mult is None else w * mult
        dv = wd.T @ upstream_grad
        dw = upstream_grad @ v.T
        if mult is not None:
            dw = dw * mult
        ds = w * (dw - (w * dw).sum(axis=1, keepdims=True))
        dq = (ds @ k) * scale
        dk = (ds.T @ q) * scale
        return AttnGrads(dq, dk, dv, ds)
    n = pattern.num_rows
    rows, cols, starts = _segment_rows(pattern), pattern.indices, pattern.indptr[:-1]
    wd = w if mult is None else w * mult
    wmat = sp.csr_matrix((wd, cols, pattern.indptr), shape=(n, n))
    dv = np.asarray(wmat.T @ upstream_grad)
    dw = np.einsum("ij,ij->i", upstream_grad[rows], v[cols])
    if mult is not None:
        dw = dw * mult
    ds = w * (dw - np.add.reduceat(w * dw, starts)[rows])
    smat = sp.csr_matrix((ds, cols, pattern.indptr), shape=(n, n))
    dq = np.asarray(smat @ k) * scale
    dk = np.asarray(smat.T @ q) * scale
    return AttnGrads(dq, dk, dv, ds)
