"""Simulated P-worker sequence parallelism for graph attention.

Each logical worker owns ``S/P`` tokens with all ``d`` feature columns. An
all-to-all turns that into all ``S`` tokens for ``d/P`` columns (a slice of
whole heads); attention then runs per head in the cluster-permuted order, and
a second all-to-all returns the output to the token-sharded layout. The
collectives are the only cross-worker data flow, and every element they move
is tallied in a :class:`CommLedger`.

Ledger ``elements`` count everything a worker sends, self-addressed chunk
included, so a layer's forward pass costs exactly ``4 S d / P`` per worker;
``cross_worker`` excludes the self chunk (zero when ``P == 1``).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cluster import Permutation
from .errors import ConfigError, DataError
from .graph import Graph, SpdTable, permute
from .interleave import AttentionMode
from .kernels import AttnContext, AttnInputs, MacCounter, Pattern, attention_backward, attention_forward


@dataclass(eq=False)
class WorkerShard:
    worker_id: int
    token_ids: np.ndarray
    num_real: int  # tokens with id >= num_real are padding
    q: np.ndarray | None = None
    k: np.ndarray | None = None
    v: np.ndarray | None = None

    @property
    def real_mask(self) -> np.ndarray:
        return self.token_ids < self.num_real


def partition_sequence(tokens: int, P: int, seed: int = 0) -> list[WorkerShard]:
    """Shuffle token ids (plus padding up to a multiple of P) and split them evenly."""
    if P <= 0:
        raise ConfigError(f"worker count must be positive, got {P}")
    padded = -(-tokens // P) * P
    ids = np.arange(padded) if P == 1 else np.random.default_rng(seed).permutation(padded)
    per = padded // P
    return [WorkerShard(p, ids[p * per:(p + 1) * per].copy(), tokens) for p in range(P)]


@dataclass
class LedgerRecord:
    layer: int
    worker: int
    collective: str
    elements: int
    cross_worker: int

    def line(self) -> str:
        return f"{self.layer} {self.worker} {self.collective} {self.elements} {self.cross_worker}"


@dataclass
class CommLedger:
    records: list[LedgerRecord] = field(default_factory=list)

    def add(self, layer: int, worker: int, collective: str, elements: int, cross_worker: int) -> None:
        self.records.append(LedgerRecord(layer, worker, collective, int(elements), int(cross_worker)))

    def per_worker(self, collectives=None, layer: int | None = None, cross: bool = False) -> dict[int, int]:
        if isinstance(collectives, str):
            collectives = (collectives,)
        out: dict[int, int] = {}
        for r in self.records:
            if (collectives is None or r.collective in collectives) and (layer is None or r.layer == layer):
                out[r.worker] = out.get(r.worker, 0) + (r.cross_worker if cross else r.elements)
        return dict(sorted(out.items()))

    def total(self, collectives=None, cross: bool = False) -> int:
        return sum(self.per_worker(collectives, cross=cross).values())

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]

    def extend(self, other: "CommLedger") -> None:
        self.records.extend(other.records)


def _check_split(d: int, heads: int, P: int) -> None:
    if heads % P:
        raise ConfigError(f"heads H={heads} must be divisible by the worker count P={P}")
    if d % heads:
        raise ConfigError(f"hidden dim d={d} must be divisible by heads H={heads}")


def all_to_all_seq_to_head(shards: list[np.ndarray], token_ids: list[np.ndarray], heads: int,
                           ledger: CommLedger | None = None, collective: str = "qkv_gather",
                           layer: int = 0) -> list[np.ndarray]:
    """Gather the sequence dimension, split the feature (head) dimension.

    Worker ``p`` ends with every token's columns ``p*d/P:(p+1)*d/P``, rows in
    global token-id order.
    """
    P = len(shards)
    d = shards[0].shape[1]
    _check_split(d, heads, P)
    width = d // P
    total = sum(len(t) for t in token_ids)
    out = []
    for p in range(P):
        full = np.empty((total, width), dtype=shards[0].dtype)
        for q in range(P):
            full[token_ids[q]] = shards[q][:, p * width:(p + 1) * width]
        out.append(full)
    if ledger is not None:
        for q in range(P):
            n = shards[q].shape[0]
            ledger.add(layer, q, collective, n * d, n * (d - width))
    return out


def all_to_all_head_to_seq(full: list[np.ndarray], token_ids: list[np.ndarray], heads: int,
                           ledger: CommLedger | None = None, collective: str = "output_scatter",
                           layer: int = 0) -> list[np.ndarray]:
    """Inverse of :func:`all_to_all_seq_to_head`."""
    P = len(full)
    width = full[0].shape[1]
    d = width * P
    _check_split(d, heads, P)
    out = []
    for q in range(P):
        shard = np.empty((len(token_ids[q]), d), dtype=full[0].dtype)
        for p in range(P):
            shard[:, p * width:(p + 1) * width] = full[p][token_ids[q]]
        out.append(shard)
    if ledger is not None:
        for p in range(P):
            rows = full[p].shape[0]
            own = len(token_ids[p])
            ledger.add(layer, p, collective, rows * width, (rows - own) * width)
    return out


@dataclass(eq=False)
class AttentionPlan:
    """Everything a layer needs to run attention on one sequence, in cluster order."""

    num_tokens: int
    mode: AttentionMode
    perm: Permutation
    pattern: Pattern
    buckets: np.ndarray | None = None  # SPD bucket per attended pair ([S, S] when dense)

    def bias(self, table: np.ndarray | None) -> np.ndarray | None:
        if table is None or self.buckets is None:
            return None
        values = table[self.buckets]
        if not self.pattern.is_dense:
            values = np.where(self.pattern.learned_mask(), values, 0.0)
        return values

    def bias_grad(self, dbias: np.ndarray, table_size: int) -> np.ndarray:
        """Scatter a per-pair bias gradient into the bucket table."""
        if self.pattern.is_dense:
            return np.bincount(self.buckets.ravel(), weights=dbias.ravel(), minlength=table_size)
        mask = self.pattern.learned_mask()
        return np.bincount(self.buckets[mask], weights=dbias[mask], minlength=table_size)


def make_plan(g_seq: Graph | None, mode: AttentionMode, layout=None, perm: Permutation | None = None,
              spd: SpdTable | None = None, num_tokens: int | None = None) -> AttentionPlan:
    """Build the attention plan; ``g_seq`` (with self-loops) is required in sparse mode."""
    if g_seq is None and num_tokens is None:
        raise DataError("need a sequence graph or a token count")
    s = g_seq.num_nodes if g_seq is not None else num_tokens
    perm = perm if perm is not None else Permutation.identity(s)
    if len(perm) != s:
        raise DataError(f"permutation covers {len(perm)} tokens, sequence has {s}")
    if mode.sparse:
        if layout is not None:
            if layout.num_nodes != s:
                raise DataError("layout does not match the sequence length")
            pattern = layout.pattern
        elif g_seq is None:
            raise DataError("sparse attention mode needs the sequence graph")
        else:
            pattern = Pattern.from_graph(permute(g_seq, perm.forward))
    else:
        pattern = Pattern.dense(s)
    buckets = None
    if spd is not None:
        table = spd.permuted(perm.forward)
        if pattern.is_dense:
            buckets = table.buckets.astype(np.int64)
        else:
            rows, cols = pattern.pairs()
            buckets = table.lookup(rows, cols)
    return AttentionPlan(s, mode, perm, pattern, buckets)


@dataclass(eq=False)
class DistContext:
    plan: AttentionPlan
    token_ids: list[np.ndarray]
    heads: int
    head_ctx: list[list[AttnContext]]  # [worker][local head]
    counter: MacCounter


def _map(fn, items, concurrent: bool):
    if concurrent and len(items) > 1:
        with ThreadPoolExecutor(max_workers=len(items)) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def distributed_attention(q_shards, k_shards, v_shards, token_ids, plan: AttentionPlan, heads: int, *,
                          bias_table: np.ndarray | None = None,
                          dropout: Callable[[int], np.ndarray | None] | None = None,
                          ledger: CommLedger | None = None, layer: int = 0,
                          concurrent: bool = False):
    """One attention layer across workers; returns ``(output shards, DistContext)``.

    ``dropout(head)`` may supply a multiplier for that head's attention weights.
    """
    P = len(q_shards)
    s = plan.num_tokens
    fq = all_to_all_seq_to_head(q_shards, token_ids, heads, ledger, "qkv_gather", layer)
    fk = all_to_all_seq_to_head(k_shards, token_ids, heads, ledger, "qkv_gather", layer)
    fv = all_to_all_seq_to_head(v_shards, token_ids, heads, ledger, "qkv_gather", layer)
    bias = plan.bias(bias_table)
    if ledger is not None and bias is not None:
        for p in range(P):
            ledger.add(layer, p, "bias_exchange", plan.pattern.npairs, plan.pattern.npairs if P > 1 else 0)
    per_worker = heads // P
    width = fq[0].shape[1]
    dk = width // per_worker
    inv, fwd = plan.perm.inverse, plan.perm.forward

    def work(p):
        out = fv[p].copy()  # padding rows attend only to themselves
        ctxs = []
        counter = MacCounter()
        for h in range(per_worker):
            cols = slice(h * dk, (h + 1) * dk)
            inp = AttnInputs(fq[p][:s, cols][inv], fk[p][:s, cols][inv], fv[p][:s, cols][inv], bias)
            o, c, ctx = attention_forward(inp, plan.pattern,
                                          dropout(p * per_worker + h) if dropout else None)
            out[:s, cols] = o[fwd]
            ctxs.append(ctx)
            counter += c
        return out, ctxs, counter

    results = _map(work, list(range(P)), concurrent)
    outputs = all_to_all_head_to_seq([r[0] for r in results], token_ids, heads, ledger,
                                     "output_scatter", layer)
    total = MacCounter()
    for r in results:
        total += r[2]
    return outputs, DistContext(plan, token_ids, heads, [r[1] for r in results], total)


def distributed_attention_backward(ctx: DistContext, grad_shards: list[np.ndarray], *,
                                   ledger: CommLedger | None = None, layer: int = 0,
                                   concurrent: bool = False):
    """Backward of :func:`distributed_attention`.

    Returns ``(dq_shards, dk_shards, dv_shards, dbias)`` where ``dbias`` is the
    per-pair bias gradient summed over heads in worker/head order.
    """
    plan, heads = ctx.plan, ctx.heads
    P = len(grad_shards)
    s = plan.num_tokens
    gfull = all_to_all_seq_to_head(grad_shards, ctx.token_ids, heads, ledger, "output_grad_gather", layer)
    per_worker = heads // P
    width = gfull[0].shape[1]
    dk = width // per_worker
    inv, fwd = plan.perm.inverse, plan.perm.forward

    def work(p):
        dq = np.zeros_like(gfull[p])
        dkk = np.zeros_like(gfull[p])
        dv = gfull[p].copy()  # padding: output row == its own value row
        dv[:s] = 0.0
        dbias = None
        for h in range(per_worker):
            cols = slice(h * dk, (h + 1) * dk)
            hctx = ctx.head_ctx[p][h]
            g = attention_backward(hctx.inputs, plan.pattern, gfull[p][:s, cols][inv], ctx=hctx)
            dq[:s, cols] = g.dq[fwd]
            dkk[:s, cols] = g.dk[fwd]
            dv[:s, cols] = g.dv[fwd]
            dbias = g.dbias if dbias is None else dbias + g.dbias
        return dq, dkk, dv, dbias

    results = _map(work, list(range(P)), concurrent)
    out = []
    for i in range(3):
        out.append(all_to_all_head_to_seq([r[i] for r in results], ctx.token_ids, heads, ledger,
                                          "qkv_grad_scatter", layer))
    dbias = results[0][3]
    for r in results[1:]:
        dbias = dbias + r[3]
    return out[0], out[1], out[2], dbias


def run_distributed_layer(shards: list[WorkerShard], g_seq: Graph | None, mode: AttentionMode,
                          layout=None, perm: Permutation | None = None, P: int | None = None, *,
                          heads: int, spd: SpdTable | None = None, bias_table: np.ndarray | None = None,
                          ledger: CommLedger | None = None, layer: int = 0, concurrent: bool = False):
    """Attention for one layer on sharded Q/K/V; returns ``(output shards, ledger)``."""
    if P is not None and P != len(shards):
        raise ConfigError(f"P={P} but {len(shards)} shards were given")
    ledger = ledger if ledger is not None else CommLedger()
    plan = make_plan(g_seq, mode, layout, perm, spd, num_tokens=shards[0].num_real)
    outputs, _ = distributed_attention([w.q for w in shards], [w.k for w in shards], [w.v for w in shards],
                                       [w.token_ids for w in shards], plan, heads, bias_table=bias_table,
                                       ledger=ledger, layer=layer, concurrent=concurrent)
    return outputs, ledger
