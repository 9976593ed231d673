"""Synthetic desk-scale datasets: planted-partition graphs and random attention graphs."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .graph import Graph, add_self_loops


def generate_sbm(n: int, blocks: int, p_in: float, p_out: float, seed: int = 0, *,
                 noise: float = 0.1, shuffle: bool = True) -> Graph:
    """Undirected stochastic block model with node labels.

    Blocks have near-equal sizes. Each node's features are the one-hot vector
    of its block plus i.i.d. Gaussian noise of scale ``noise``. With
    ``shuffle`` the node ids are randomly permuted so that block membership
    is not visible from the id order.
    """
    if not 0 <= p_out <= p_in <= 1:
        raise ConfigError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if n < 1 or not 1 <= blocks <= n:
        raise ConfigError(f"invalid SBM size n={n}, blocks={blocks}")
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) * blocks) // n
    prob = np.where(labels[:, None] == labels[None, :], p_in, p_out)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    src, dst = np.nonzero(upper)
    order = rng.permutation(n) if shuffle else np.arange(n)
    feats = np.eye(blocks)[labels] + noise * rng.standard_normal((n, blocks))
    # planted position t is stored under node id order[t]
    new_labels = np.empty(n, dtype=np.int64)
    new_labels[order] = labels
    new_feats = np.empty_like(feats)
    new_feats[order] = feats
    a, b = order[src], order[dst]
    return Graph.from_edges(n, np.concatenate([a, b]), np.concatenate([b, a]), new_feats, new_labels)


def random_graph(n: int, target_density: float, seed: int = 0, *, self_loops: bool = True) -> Graph:
    """Directed graph with exactly ``round(target_density * n^2)`` arcs (at least the loops)."""
    if not 0 <= target_density <= 1:
        raise ConfigError("density must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    want = int(round(target_density * n * n))
    if self_loops:
        loops = np.arange(n) * n + np.arange(n)
        others = np.setdiff1d(np.arange(n * n), loops)
        extra = max(0, want - n)
        picked = np.concatenate([loops, rng.choice(others, size=min(extra, len(others)), replace=False)])
    else:
        picked = rng.choice(n * n, size=want, replace=False)
    src, dst = np.divmod(picked, n)
    g = Graph.from_edges(n, src, dst, rng.standard_normal((n, 4)))
    return add_self_loops(g) if self_loops else g
