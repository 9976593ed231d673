"""A small Graphormer-style encoder with a hand-written backward pass.

Pre-LN blocks: ``h += Drop(MHA(LN(h)) W_O)``, ``h += Drop(FFN(LN(h)))``, then a
final LN and a linear classifier. Inputs add in/out-degree embeddings to the
projected node features; attention scores get a learned scalar per
shortest-path bucket. All row-wise work happens on the worker that owns the
token; attention goes through :mod:`gtscale.parallel`.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .graph import SpdTable
from .kernels import MacCounter, Pattern
from .parallel import (AttentionPlan, CommLedger, distributed_attention,
                       distributed_attention_backward, partition_sequence)

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


class ModelParams(dict):
    """Named parameter arrays. Per-layer entries are keyed ``"{layer}.{name}"``."""

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams({k: np.zeros_like(v) for k, v in self.items()})


def init_params(in_dim: int, num_classes: int, hidden: int, layers: int, *, ffn_dim: int | None = None,
                max_degree: int = 512, max_dist: int = 8, global_token: bool = False,
                seed: int = 0, dtype=np.float64) -> ModelParams:
    rng = np.random.default_rng(seed)
    ffn_dim = ffn_dim or 2 * hidden

    def lin(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) / np.sqrt(max(n_in, 1))

    p = {
        "w_in": lin(in_dim, hidden),
        "z_in": 0.1 * rng.standard_normal((max_degree + 1, hidden)),
        "z_out": 0.1 * rng.standard_normal((max_degree + 1, hidden)),
        "spd_bias": 0.02 * rng.standard_normal(max_dist + 2),
    }
    for l in range(layers):
        p[f"{l}.ln1_g"] = np.ones(hidden)
        p[f"{l}.ln1_b"] = np.zeros(hidden)
        for name in ("w_q", "w_k", "w_v", "w_o"):
            p[f"{l}.{name}"] = lin(hidden, hidden)
        p[f"{l}.ln2_g"] = np.ones(hidden)
        p[f"{l}.ln2_b"] = np.zeros(hidden)
        p[f"{l}.w_1"] = lin(hidden, ffn_dim)
        p[f"{l}.b_1"] = np.zeros(ffn_dim)
        p[f"{l}.w_2"] = lin(ffn_dim, hidden)
        p[f"{l}.b_2"] = np.zeros(hidden)
    p["lnf_g"] = np.ones(hidden)
    p["lnf_b"] = np.zeros(hidden)
    p["w_cls"] = lin(hidden, num_classes)
    p["b_cls"] = np.zeros(num_classes)
    if global_token:
        p["global_emb"] = 0.1 * rng.standard_normal(hidden)
    return ModelParams({k: np.asarray(v, dtype=dtype) for k, v in p.items()})


def num_layers(params: ModelParams) -> int:
    return sum(1 for k in params if k.endswith(".w_q"))


# -- row-wise pieces ------------------------------------------------------------

def layer_norm(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, dg, db


def gelu(x):
    """tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


# -- encodings --------------------------------------------------------------------

def encode_inputs(features: np.ndarray, in_degree: np.ndarray, out_degree: np.ndarray,
                  params: ModelParams) -> np.ndarray:
    """Projected features plus in- and out-degree embeddings, degrees clamped to the table."""
    last = params["z_in"].shape[0] - 1
    return (features @ params["w_in"] + params["z_in"][np.minimum(in_degree, last)]
            + params["z_out"][np.minimum(out_degree, last)])


def build_bias(spd: SpdTable, pattern: Pattern, params: ModelParams) -> np.ndarray:
    """Bias value per attended pair (an S x S matrix for the dense pattern)."""
    table = params["spd_bias"]
    if pattern.is_dense:
        return table[spd.buckets.astype(np.int64)]
    rows, cols = pattern.pairs()
    return np.where(pattern.learned_mask(), table[spd.lookup(rows, cols)], 0.0)


# -- full model ---------------------------------------------------------------------

@dataclass(eq=False)
class SequenceInputs:
    """Per-token arrays of one sequence, in original token order."""

    features: np.ndarray  # [S, f]; zero row for a global token
    in_degree: np.ndarray
    out_degree: np.ndarray
    targets: np.ndarray  # class id per token, -1 where the token carries no loss
    global_index: int | None = None

    @property
    def num_tokens(self) -> int:
        return self.features.shape[0]


@dataclass
class StepResult:
    loss: float
    logits: np.ndarray  # [S, C] in token order
    grads: ModelParams | None
    counter: MacCounter
    ledger: CommLedger


@dataclass(frozen=True)
class Dropout:
    attn: float = 0.0
    input: float = 0.0
    other: float = 0.0
    key: tuple = (0,)

    @property
    def active(self) -> bool:
        return self.attn > 0 or self.input > 0 or self.other > 0

    def mask(self, tag: tuple, shape, rate: float):
        if rate <= 0:
            return None
        words = [t if isinstance(t, int) else zlib.crc32(str(t).encode()) for t in (*self.key, *tag)]
        rng = np.random.default_rng(words)
        return (rng.random(shape) >= rate) / (1.0 - rate)


def _rows(mask, ids):
    return None if mask is None else mask[ids]


def forward_backward(params: ModelParams, seq: SequenceInputs, plan: AttentionPlan, *, heads: int,
                     workers: int = 1, shard_seed: int = 0, dropout: Dropout | None = None,
                     need_grad: bool = True, ledger: CommLedger | None = None,
                     concurrent: bool = False) -> StepResult:
    """Mean cross-entropy over tokens with a target, and its gradient, on ``workers`` simulated workers."""
    dropout = dropout or Dropout()
    ledger = ledger if ledger is not None else CommLedger()
    L = num_layers(params)
    s = seq.num_tokens
    d = params["w_in"].shape[1]
    dtype = params["w_in"].dtype
    shards = partition_sequence(s, workers, shard_seed)
    ids = [w.token_ids for w in shards]
    padded = sum(len(t) for t in ids)
    real = [t < s for t in ids]

    # global-order input table, padding rows are zero
    h0_full = np.zeros((padded, d), dtype=dtype)
    h0_full[:s] = encode_inputs(seq.features, seq.in_degree, seq.out_degree, params)
    if seq.global_index is not None:
        h0_full[seq.global_index] = params["global_emb"]
    m_in = dropout.mask(("in",), (padded, d), dropout.input)

    h = []
    for p in range(workers):
        x = h0_full[ids[p]]
        h.append(x if m_in is None else x * m_in[ids[p]])

    caches = []
    bias_table = params["spd_bias"]
    counter = MacCounter()
    for l in range(L):
        c = {}
        a, ln1 = zip(*(layer_norm(h[p], params[f"{l}.ln1_g"], params[f"{l}.ln1_b"]) for p in range(workers)))
        q = [x @ params[f"{l}.w_q"] for x in a]
        k = [x @ params[f"{l}.w_k"] for x in a]
        v = [x @ params[f"{l}.w_v"] for x in a]
        attn_rate = dropout.attn

        def attn_mask(head, _l=l):
            shape = (s, s) if plan.pattern.is_dense else (plan.pattern.npairs,)
            return dropout.mask(("attn", _l, head), shape, attn_rate)

        o, dctx = distributed_attention(q, k, v, ids, plan, heads, bias_table=bias_table,
                                        dropout=attn_mask if attn_rate > 0 else None,
                                        ledger=ledger, layer=l, concurrent=concurrent)
        counter += dctx.counter
        m1 = dropout.mask(("attn_out", l), (padded, d), dropout.other)
        u = [o[p] @ params[f"{l}.w_o"] for p in range(workers)]
        u = [x if m1 is None else x * m1[ids[p]] for p, x in enumerate(u)]
        h_mid = [h[p] + u[p] for p in range(workers)]
        f, ln2 = zip(*(layer_norm(x, params[f"{l}.ln2_g"], params[f"{l}.ln2_b"]) for x in h_mid))
        z = [x @ params[f"{l}.w_1"] + params[f"{l}.b_1"] for x in f]
        gz = [gelu(x) for x in z]
        y = [x @ params[f"{l}.w_2"] + params[f"{l}.b_2"] for x in gz]
        m2 = dropout.mask(("ffn_out", l), (padded, d), dropout.other)
        y = [x if m2 is None else x * m2[ids[p]] for p, x in enumerate(y)]
        h = [h_mid[p] + y[p] for p in range(workers)]
        c.update(a=a, ln1=ln1, q=q, k=k, v=v, o=o, dctx=dctx, m1=m1, ln2=ln2, f=f, z=z, gz=gz, m2=m2)
        caches.append(c)

    hf, lnf = zip(*(layer_norm(x, params["lnf_g"], params["lnf_b"]) for x in h))
    logits = [x @ params["w_cls"] + params["b_cls"] for x in hf]

    # loss over tokens with a target, reduced in worker order
    count = int(np.count_nonzero(seq.targets >= 0))
    loss = 0.0
    dlogits = []
    for p in range(workers):
        tgt = np.full(len(ids[p]), -1)
        tgt[real[p]] = seq.targets[ids[p][real[p]]]
        lg = logits[p]
        z_ = lg - lg.max(axis=1, keepdims=True)
        logp = z_ - np.log(np.exp(z_).sum(axis=1, keepdims=True))
        sel = tgt >= 0
        loss += -logp[sel, tgt[sel]].sum()
        g = np.exp(logp)
        g[sel, tgt[sel]] -= 1.0
        g[~sel] = 0.0
        dlogits.append(g / max(count, 1))
    loss /= max(count, 1)

    out_logits = np.zeros((s, logits[0].shape[1]), dtype=dtype)
    for p in range(workers):
        out_logits[ids[p][real[p]]] = logits[p][real[p]]
    if not need_grad:
        return StepResult(float(loss), out_logits, None, counter, ledger)

    grads = params.zeros_like()

    def acc(name, value):
        grads[name] += value

    dh = []
    for p in range(workers):
        acc("w_cls", hf[p].T @ dlogits[p])
        acc("b_cls", dlogits[p].sum(axis=0))
        dx, dg, db = layer_norm_backward(dlogits[p] @ params["w_cls"].T, params["lnf_g"], lnf[p])
        acc("lnf_g", dg)
        acc("lnf_b", db)
        dh.append(dx)

    for l in reversed(range(L)):
        c = caches[l]
        for p in range(workers):
            dy = dh[p] if c["m2"] is None else dh[p] * c["m2"][ids[p]]
            acc(f"{l}.w_2", c["gz"][p].T @ dy)
            acc(f"{l}.b_2", dy.sum(axis=0))
            dz = (dy @ params[f"{l}.w_2"].T) * gelu_grad(c["z"][p])
            acc(f"{l}.w_1", c["f"][p].T @ dz)
            acc(f"{l}.b_1", dz.sum(axis=0))
            dx, dg, db = layer_norm_backward(dz @ params[f"{l}.w_1"].T, params[f"{l}.ln2_g"], c["ln2"][p])
            acc(f"{l}.ln2_g", dg)
            acc(f"{l}.ln2_b", db)
            dh[p] = dh[p] + dx
        do = []
        for p in range(workers):
            du = dh[p] if c["m1"] is None else dh[p] * c["m1"][ids[p]]
            acc(f"{l}.w_o", c["o"][p].T @ du)
            do.append(du @ params[f"{l}.w_o"].T)
        dq, dk, dv, dbias = distributed_attention_backward(c["dctx"], do, ledger=ledger, layer=l,
                                                           concurrent=concurrent)
        acc("spd_bias", plan.bias_grad(dbias, len(bias_table)))
        for p in range(workers):
            acc(f"{l}.w_q", c["a"][p].T @ dq[p])
            acc(f"{l}.w_k", c["a"][p].T @ dk[p])
            acc(f"{l}.w_v", c["a"][p].T @ dv[p])
            da = dq[p] @ params[f"{l}.w_q"].T + dk[p] @ params[f"{l}.w_k"].T + dv[p] @ params[f"{l}.w_v"].T
            dx, dg, db = layer_norm_backward(da, params[f"{l}.ln1_g"], c["ln1"][p])
            acc(f"{l}.ln1_g", dg)
            acc(f"{l}.ln1_b", db)
            dh[p] = dh[p] + dx

    dh0 = np.zeros((padded, d), dtype=dtype)
    for p in range(workers):
        dh0[ids[p]] = dh[p] if m_in is None else dh[p] * m_in[ids[p]]
    dh0 = dh0[:s]
    node = np.ones(s, dtype=bool)
    if seq.global_index is not None:
        node[seq.global_index] = False
        acc("global_emb", dh0[seq.global_index])
    last = params["z_in"].shape[0] - 1
    acc("w_in", seq.features[node].T @ dh0[node])
    np.add.at(grads["z_in"], np.minimum(seq.in_degree[node], last), dh0[node])
    np.add.at(grads["z_out"], np.minimum(seq.out_degree[node], last), dh0[node])
    return StepResult(float(loss), out_logits, grads, counter, ledger)
