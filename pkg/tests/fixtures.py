"""Builders shared by the unit tests and the acceptance module."""

from __future__ import annotations

import numpy as np

from gtscale.cluster import build_cluster_grid, reorder
from gtscale.data import generate_sbm
from gtscale.graph import Graph, add_self_loops, density, permute, spd_table
from gtscale.interleave import AttentionMode, Mode, Reason
from gtscale.kernels import AttnInputs, Pattern, attention_backward, attention_forward
from gtscale.model import forward_backward, init_params
from gtscale.parallel import make_plan, partition_sequence, run_distributed_layer
from gtscale.reformation import Strategy, build_layout
from gtscale.train import TrainConfig, prepare_graph_task, prepare_node_task

from .oracles import central_diff


def complete_with_loops(n: int) -> Graph:
    src, dst = np.nonzero(np.ones((n, n), dtype=bool))
    return Graph.from_edges(n, src, dst)


def random_sparse(n: int, rng: np.random.Generator, p: float = 0.3) -> Graph:
    src, dst = np.nonzero(rng.random((n, n)) < p)
    return add_self_loops(Graph.from_edges(n, src, dst))


def random_inputs(rng, s, d, d_v=None, bias_shape=None):
    d_v = d_v or d
    bias = None if bias_shape is None else rng.standard_normal(bias_shape)
    return AttnInputs(rng.standard_normal((s, d)), rng.standard_normal((s, d)),
                      rng.standard_normal((s, d_v)), bias)


def cluster_pattern(g: Graph, k: int, d_b: int, beta_thre: float, seed: int = 0):
    """Cluster-sparse pattern for ``g`` laid out in its own (reordered) order."""
    perm = reorder(g, k, seed)
    gp = permute(g, perm.forward)
    grid = build_cluster_grid(gp, None, k)
    return build_layout(grid, gp, Strategy.ELASTIC, beta_thre, density(g), d_b)


def kernel_pattern(kind: str, s: int, rng) -> Pattern:
    if kind == "dense":
        return Pattern.dense(s)
    g = random_sparse(s, rng)
    if kind == "edge":
        return Pattern.from_graph(g)
    k = 2 if s >= 2 else 1
    return cluster_pattern(g, k, 1 if s < 4 else 2, 1.0, seed=int(rng.integers(1 << 30))).pattern


def kernel_gradcheck(seed: int, kind: str, h: float = 1e-4) -> float:
    """Worst entrywise relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``; the floor keeps entries that
    are zero up to rounding from dominating.
    """
    rng = np.random.default_rng(seed)
    s = int(rng.integers(1, 9))
    d = int(rng.integers(1, 5))
    pattern = kernel_pattern(kind, s, rng)
    bias_shape = (s, s) if pattern.is_dense else (pattern.npairs,)
    inp = random_inputs(rng, s, d, bias_shape=bias_shape)
    upstream = rng.standard_normal((s, d))

    def loss():
        out, _, _ = attention_forward(inp, pattern)
        return float(np.sum(out * upstream))

    grads = attention_backward(inp, pattern, upstream)
    worst = 0.0
    for name, analytic in (("q", grads.dq), ("k", grads.dk), ("v", grads.dv), ("bias", grads.dbias)):
        numeric = central_diff(loss, getattr(inp, name), h)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        worst = max(worst, float(rel.max()))
    return worst


def model_case(seed: int, *, kind: str, task: str = "node", n: int = 6, hidden: int = 4,
               heads: int = 2, layers: int = 1):
    """A tiny model, sequence and attention plan for gradient and invariance checks.

    ``kind`` is "dense", "edge" or "cluster"; the cluster layout transfers every
    non-full cell it can into 2x2 sub-blocks.
    """
    cfg = TrainConfig(layers=layers, hidden=hidden, heads=heads, max_degree=8, max_dist=3, k=2,
                      d_b=1, task=task, seed=seed)
    g = generate_sbm(n, 2, 0.9, 0.3, seed=seed, noise=0.5)
    if task == "graph":
        seq = prepare_graph_task([g.with_features(g.features, seed % 2)], cfg)[0]
    else:
        seq = prepare_node_task(g, cfg)[0]
    mode = (AttentionMode(Mode.DENSE, Reason.SCHEDULED_DENSE) if kind == "dense"
            else AttentionMode(Mode.SPARSE, Reason.CONDITIONS_PASSED))
    layout = seq.layout(Strategy.ELASTIC, 1.0, 2) if kind == "cluster" else None
    plan = make_plan(seq.graph, mode, layout, seq.perm, seq.spd)
    params = init_params(seq.inputs.features.shape[1], 2, hidden, layers, max_degree=8, max_dist=3,
                         global_token=task == "graph", seed=seed)
    # perturb the zero/one initialised tensors so every gradient path is exercised
    rng = np.random.default_rng(seed + 1000)
    for name in params:
        params[name] = params[name] + 0.1 * rng.standard_normal(params[name].shape)
    return params, seq, plan, cfg


def model_gradcheck(seed: int, *, kind: str, task: str = "node", workers: int = 1,
                    n: int = 6, h: float = 1e-5) -> float:
    """Worst per-tensor relative error ``|a - n| / max(|a|, |n|)`` (norms) over all parameters."""
    params, seq, plan, cfg = model_case(seed, kind=kind, task=task, n=n)
    res = forward_backward(params, seq.inputs, plan, heads=cfg.heads, workers=workers, shard_seed=seed)

    def loss():
        return forward_backward(params, seq.inputs, plan, heads=cfg.heads, workers=workers,
                                shard_seed=seed, need_grad=False).loss

    worst = 0.0
    for name, value in params.items():
        analytic = res.grads[name]
        numeric = central_diff(loss, value, h)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale > 1e-9:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


def split(mat, shards):
    padded = sum(len(s.token_ids) for s in shards)
    full = np.zeros((padded, mat.shape[1]))
    full[:mat.shape[0]] = mat
    return [full[s.token_ids] for s in shards]


def sharded_layer(g, q, k, v, P, mode, *, layout=None, perm=None, table=None, heads=4, seed=0,
                  concurrent=False):
    """One attention layer run on ``P`` simulated workers, reassembled in token order."""
    shards = partition_sequence(q.shape[0], P, seed)
    for sh, a, b, c in zip(shards, split(q, shards), split(k, shards), split(v, shards)):
        sh.q, sh.k, sh.v = a, b, c
    spd = spd_table(g, 4) if table is not None else None
    outs, ledger = run_distributed_layer(shards, g, mode, layout, perm, P, heads=heads, spd=spd,
                                         bias_table=table, concurrent=concurrent)
    padded = sum(len(sh.token_ids) for sh in shards)
    full = np.zeros((padded, q.shape[1]))
    for sh, o in zip(shards, outs):
        full[sh.token_ids] = o
    return full[:q.shape[0]], ledger
