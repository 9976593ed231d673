"""Training loop: condition checks, interleaving, reformation, tuning and parallel execution."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .cluster import ClusterGrid, Permutation, build_cluster_grid, reorder
from .errors import ConfigError, DataError, DivergenceError, NonFiniteError
from .graph import Graph, SpdTable, add_self_loops, density, induced_subgraph, permute, spd_table
from .interleave import (AttentionMode, ConditionReport, Mode, Reason, check_conditions,
                         select_mode)
from .model import Dropout, ModelParams, SequenceInputs, forward_backward, init_params
from .parallel import AttentionPlan, CommLedger, make_plan
from .reformation import (DEFAULT_K_DIVISOR, REFERENCE_L2_BYTES, ClusterSparseLayout, Strategy,
                          TunerState, build_layout, select_k, tuner_update)

log = logging.getLogger(__name__)

STRATEGIES = ("edge", "indolent", "elastic")


@dataclass
class TrainConfig:
    layers: int = 2
    hidden: int = 32
    heads: int = 4
    ffn_mult: int = 2
    max_degree: int = 512
    max_dist: int = 8
    task: str = "node"  # "node" or "graph"
    lr_start: float = 2e-4
    lr_end: float = 1e-9
    lr_power: float = 1.0
    momentum: float = 0.0
    dropout_attn: float = 0.5
    dropout_input: float = 0.1
    dropout: float = 0.3
    dense_period: int = 10
    strategy: str = "elastic"
    beta_thre: float | None = None  # None: tuned (elastic) or 5 * beta_G
    tuner: bool = True
    delta: int = 10
    tuner_clock: str = "macs"  # "macs" (deterministic) or "wall"
    k: int | None = None  # None: derived from the L2 size
    l2_bytes: int = REFERENCE_L2_BYTES
    k_divisor: int = DEFAULT_K_DIVISOR
    d_b: int = 16
    workers: int = 1
    seq_len: int | None = None
    train_fraction: float = 1.0
    epochs: int = 10
    seed: int = 0
    concurrent: bool = False

    def validate(self) -> "TrainConfig":
        for name in ("layers", "hidden", "heads", "ffn_mult", "dense_period", "workers", "d_b", "delta"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.heads % self.workers:
            raise ConfigError(f"heads={self.heads} is not divisible by workers={self.workers}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.task not in ("node", "graph"):
            raise ConfigError("task must be 'node' or 'graph'")
        if self.tuner_clock not in ("macs", "wall"):
            raise ConfigError("tuner_clock must be 'macs' or 'wall'")
        for name in ("dropout_attn", "dropout_input", "dropout"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.k is not None and (self.k < 1 or self.k & (self.k - 1)):
            raise ConfigError("k must be a power of two")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must lie in (0, 1]")
        return self

    def cluster_k(self) -> int:
        return self.k if self.k is not None else select_k(self.l2_bytes, self.hidden, self.k_divisor)

    def lr_at(self, step: int, total: int) -> float:
        frac = min(step / max(total, 1), 1.0)
        return (self.lr_start - self.lr_end) * (1.0 - frac) ** self.lr_power + self.lr_end

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass(eq=False)
class PreparedSequence:
    """A training sequence with everything that does not change between epochs."""

    graph: Graph  # attention graph: self-loops, plus the global token when present
    inputs: SequenceInputs
    eval_targets: np.ndarray
    spd: SpdTable
    report: ConditionReport
    perm: Permutation
    grid: ClusterGrid
    permuted: Graph
    beta_g: float
    layouts: dict = field(default_factory=dict)

    def layout(self, strategy: Strategy, beta_thre: float, d_b: int) -> ClusterSparseLayout:
        key = (strategy, beta_thre if strategy is Strategy.ELASTIC else None, d_b)
        if key not in self.layouts:
            self.layouts[key] = build_layout(self.grid, self.permuted, strategy, beta_thre, self.beta_g, d_b)
        return self.layouts[key]


def _largest_pow2(n: int) -> int:
    return 1 << (max(n, 1).bit_length() - 1)


def prepare_sequence(g: Graph, cfg: TrainConfig, *, targets: np.ndarray, eval_targets: np.ndarray,
                     seed: int = 0) -> PreparedSequence:
    n = g.num_nodes
    in_deg, out_deg = g.in_degree(), g.out_degree()
    feats = g.features
    gidx = None
    if cfg.task == "graph":
        gidx = n
        rows, cols = g.edges()
        hub = np.full(n, n)
        nodes = np.arange(n)
        att = Graph.from_edges(n + 1, np.concatenate([rows, hub, nodes]), np.concatenate([cols, nodes, hub]))
        att = add_self_loops(att)
        base = spd_table(g, cfg.max_dist)
        buckets = np.ones((n + 1, n + 1), dtype=base.buckets.dtype)
        buckets[:n, :n] = base.buckets
        buckets[n, n] = 0
        spd = SpdTable(cfg.max_dist, buckets)
        feats = np.vstack([feats, np.zeros((1, feats.shape[1]))])
        in_deg = np.append(in_deg, 0)
        out_deg = np.append(out_deg, 0)
    else:
        att = add_self_loops(g)
        spd = spd_table(g, cfg.max_dist)
    s = att.num_nodes
    k = min(cfg.cluster_k(), _largest_pow2(s))
    perm = reorder(att, k, seed)
    grid = build_cluster_grid(att, perm, k)
    inputs = SequenceInputs(feats, in_deg, out_deg, targets, gidx)
    return PreparedSequence(att, inputs, eval_targets, spd, check_conditions(att, cfg.layers), perm, grid,
                            permute(att, perm.forward), density(att))


def prepare_node_task(g: Graph, cfg: TrainConfig) -> list[PreparedSequence]:
    """Split a labelled graph into training sequences (induced subgraphs)."""
    if g.labels is None or np.isscalar(g.labels):
        raise DataError("node task needs one label per node")
    rng = np.random.default_rng(cfg.seed)
    n = g.num_nodes
    train = np.ones(n, dtype=bool)
    if cfg.train_fraction < 1:
        train[:] = False
        train[rng.permutation(n)[:max(1, int(round(cfg.train_fraction * n)))]] = True
    seq_len = cfg.seq_len or n
    order = np.arange(n) if seq_len >= n else rng.permutation(n)
    seqs = []
    for start in range(0, n, seq_len):
        nodes = np.sort(order[start:start + seq_len])
        sub = g if len(nodes) == n else induced_subgraph(g, nodes)
        labels = np.asarray(g.labels)[nodes]
        tr = train[nodes]
        seqs.append(prepare_sequence(sub, cfg, targets=np.where(tr, labels, -1),
                                     eval_targets=np.where(tr if cfg.train_fraction == 1 else ~tr, labels, -1),
                                     seed=cfg.seed + start))
    return seqs


def prepare_graph_task(graphs: list[Graph], cfg: TrainConfig) -> list[PreparedSequence]:
    seqs = []
    for i, g in enumerate(graphs):
        if g.labels is None or not np.isscalar(g.labels):
            raise DataError("graph task needs one integer label per graph")
        tgt = np.full(g.num_nodes + 1, -1)
        tgt[g.num_nodes] = int(g.labels)
        seqs.append(prepare_sequence(g, cfg, targets=tgt, eval_targets=tgt, seed=cfg.seed + i))
    return seqs


@dataclass
class EpochResult:
    loss: float
    epoch_time: float
    metrics: dict


class Trainer:
    """Owns parameters, optimizer state and the tuner across epochs."""

    def __init__(self, cfg: TrainConfig, sequences: list[PreparedSequence], num_classes: int,
                 params: ModelParams | None = None):
        self.cfg = cfg.validate()
        if not sequences:
            raise DataError("no training sequences")
        self.sequences = sequences
        in_dim = sequences[0].inputs.features.shape[1]
        self.params = params or init_params(in_dim, num_classes, cfg.hidden, cfg.layers,
                                            ffn_dim=cfg.ffn_mult * cfg.hidden, max_degree=cfg.max_degree,
                                            max_dist=cfg.max_dist, global_token=cfg.task == "graph",
                                            seed=cfg.seed)
        self.velocity = self.params.zeros_like()
        self.step = 0
        self.total_steps = max(cfg.epochs * len(sequences), 1)
        self.beta_g = float(np.mean([s.beta_g for s in sequences]))
        self.strategy = None if cfg.strategy == "edge" else Strategy(cfg.strategy)
        self.tuner = None
        if self.strategy is Strategy.ELASTIC and cfg.beta_thre is None and cfg.tuner:
            self.tuner = TunerState.initial(self.beta_g, cfg.delta)
        self.ledger = CommLedger()
        self.last_modes: list[AttentionMode] = []

    @property
    def beta_thre(self) -> float:
        if self.tuner is not None:
            return self.tuner.beta_thre
        return self.cfg.beta_thre if self.cfg.beta_thre is not None else 5 * self.beta_g

    def plan_for(self, seq: PreparedSequence, mode: AttentionMode) -> tuple[AttentionPlan, int]:
        layout = None
        if mode.sparse and self.strategy is not None:
            layout = seq.layout(self.strategy, self.beta_thre, self.cfg.d_b)
        plan = make_plan(seq.graph, mode, layout, seq.perm, seq.spd)
        return plan, (layout.dropped_edges if layout is not None else 0)

    def train_epoch(self, epoch: int) -> EpochResult:
        cfg = self.cfg
        start = time.perf_counter()
        losses, macs, dropped = [], 0, 0
        modes = []
        ledger = CommLedger()
        for i, seq in enumerate(self.sequences):
            mode = select_mode(seq.report, epoch, cfg.dense_period)
            modes.append(mode)
            plan, drop = self.plan_for(seq, mode)
            dropped += drop
            drop_cfg = Dropout(cfg.dropout_attn, cfg.dropout_input, cfg.dropout, (cfg.seed, epoch, i))
            try:
                res = forward_backward(self.params, seq.inputs, plan, heads=cfg.heads, workers=cfg.workers,
                                       shard_seed=cfg.seed + epoch * 7919 + i, dropout=drop_cfg,
                                       ledger=ledger, concurrent=cfg.concurrent)
            except NonFiniteError as exc:
                # overflowing activations: the parameters are finite but far too large
                raise DivergenceError(f"{exc} at epoch {epoch}", epoch) from exc
            if not math.isfinite(res.loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch)
            self.apply(res.grads)
            if not all(np.all(np.isfinite(v)) for v in self.params.values()):
                raise DivergenceError(f"non-finite parameters after the update at epoch {epoch}", epoch)
            losses.append(res.loss)
            macs += res.counter.score_macs + res.counter.weight_macs
        loss = float(np.mean(losses))
        wall = time.perf_counter() - start
        et = wall if cfg.tuner_clock == "wall" else max(macs, 1) * 1e-9
        beta_used = self.beta_thre
        if self.tuner is not None:
            self.tuner = tuner_update(self.tuner, loss, et, epoch)
        self.ledger.extend(ledger)
        self.last_modes = modes
        dense = sum(1 for m in modes if not m.sparse)
        metrics = {
            "epoch": epoch,
            "mode": modes[0].mode.value if len(modes) == 1 else f"dense:{dense}/{len(modes)}",
            "reason": modes[0].reason.value if len(modes) == 1 else "mixed",
            "beta_thre": beta_used,
            "loss": loss,
            "F": self.tuner.F if self.tuner is not None else None,
            "LDR": self.tuner.ldr_history[-1][1] if self.tuner and self.tuner.ldr_history else None,
            "epoch_time": wall,
            "tuner_time": et,
            "dropped_edges": dropped,
            "comm_elements": ledger.total(),
            "macs": macs,
        }
        return EpochResult(loss, wall, metrics)

    def apply(self, grads: ModelParams) -> None:
        lr = self.cfg.lr_at(self.step, self.total_steps)
        mu = self.cfg.momentum
        for name, g in grads.items():
            if mu > 0:
                self.velocity[name] = mu * self.velocity[name] + g
                g = self.velocity[name]
            self.params[name] -= lr * g
        self.step += 1

    def evaluate(self, sequences: list[PreparedSequence] | None = None) -> float:
        try:
            return evaluate(self.params, sequences if sequences is not None else self.sequences, self.cfg,
                            beta_thre=self.beta_thre)
        except NonFiniteError as exc:
            raise DivergenceError(f"{exc} during evaluation after step {self.step}") from exc


def evaluate(params: ModelParams, sequences: list[PreparedSequence], cfg: TrainConfig, *,
             beta_thre: float | None = None) -> float:
    """Accuracy over every token with an evaluation target, without dropout.

    Runs the pattern training mostly sees: sparse when the conditions pass, unless
    every epoch is scheduled dense.
    """
    correct = total = 0
    strategy = None if cfg.strategy == "edge" else Strategy(cfg.strategy)
    for seq in sequences:
        mask = seq.eval_targets >= 0
        if not mask.any():
            continue
        if cfg.dense_period == 1:
            mode = AttentionMode(Mode.DENSE, Reason.SCHEDULED_DENSE)
        elif seq.report.all_pass:
            mode = AttentionMode(Mode.SPARSE, Reason.CONDITIONS_PASSED)
        else:
            mode = AttentionMode(Mode.DENSE, Reason.CONDITIONS_FAILED)
        layout = None
        if mode.sparse and strategy is not None:
            thre = beta_thre if beta_thre is not None else 5 * seq.beta_g
            layout = seq.layout(strategy, thre, cfg.d_b)
        plan = make_plan(seq.graph, mode, layout, seq.perm, seq.spd)
        res = forward_backward(params, seq.inputs, plan, heads=cfg.heads, workers=cfg.workers,
                               need_grad=False)
        pred = res.logits.argmax(axis=1)
        correct += int(np.count_nonzero(pred[mask] == seq.eval_targets[mask]))
        total += int(mask.sum())
    if total == 0:
        raise DataError("empty evaluation set")
    return correct / total


def train_epoch(trainer: Trainer, epoch: int) -> EpochResult:
    return trainer.train_epoch(epoch)


def fit(trainer: Trainer, epochs: int | None = None, *, on_epoch=None) -> list[dict]:
    """Run epochs 1..E, recording accuracy next to each epoch's metrics."""
    history = []
    for epoch in range(1, (epochs if epochs is not None else trainer.cfg.epochs) + 1):
        res = trainer.train_epoch(epoch)
        res.metrics["accuracy"] = trainer.evaluate()
        history.append(res.metrics)
        if on_epoch is not None:
            on_epoch(res.metrics)
        log.debug("epoch %d loss %.5f acc %.4f", epoch, res.loss, res.metrics["accuracy"])
    return history
