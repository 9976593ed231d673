"""Command line entry point: ``gtscale {train,bench,reorder,inspect,gen-sbm}``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import build_cluster_grid, diagonal_edge_fraction, reorder
from .config import RunConfig, load_run_config
from .data import generate_sbm, random_graph
from .errors import ConfigError, DataError, DivergenceError, GTError
from .graph import (Graph, add_self_loops, density, load_edge_list, load_features, permute,
                    save_edge_list, save_features)
from .interleave import mode_record
from .kernels import AttnInputs, Pattern, attention_forward
from .reformation import Strategy, build_layout, select_db
from .train import Trainer, prepare_graph_task, prepare_node_task

log = logging.getLogger("gtscale")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _load_labels(path: str) -> np.ndarray:
    try:
        return np.loadtxt(path, dtype=np.int64, ndmin=1)
    except ValueError as exc:
        raise DataError(f"bad label file {path}: {exc}") from None


def load_dataset(run: RunConfig) -> tuple[list, int]:
    """Build prepared training sequences and the class count for ``run``."""
    data, cfg = run.data, run.train
    if data.graphs:
        graphs = []
        for item in data.graphs:
            g = load_edge_list(Path(item.edges), item.num_nodes, undirected=data.undirected)
            feats = load_features(item.features) if item.features else None
            graphs.append(g.with_features(feats, int(item.label)))
        if cfg.task != "graph":
            raise ConfigError("data.graphs needs train.task = graph")
        seqs = prepare_graph_task(graphs, cfg)
        labels = np.array([g.labels for g in graphs])
    else:
        if cfg.task != "node":
            raise ConfigError("train.task = graph needs data.graphs")
        if data.edges is not None:
            g = load_edge_list(Path(data.edges), data.num_nodes, undirected=data.undirected)
            feats = load_features(data.features) if data.features else None
            if data.labels is None:
                raise DataError("node task needs data.labels")
            g = g.with_features(feats, _load_labels(data.labels))
        else:
            s = data.sbm
            if s is None:
                raise ConfigError("data: no dataset given (edges, sbm or graphs)")
            g = generate_sbm(s.n, s.blocks, s.p_in, s.p_out, s.seed, noise=s.noise)
        seqs = prepare_node_task(g, cfg)
        labels = np.asarray(g.labels)
    num_classes = data.num_classes or int(labels.max()) + 1
    return seqs, num_classes


def _jsonable(metrics: dict) -> dict:
    return {k: (float(v) if isinstance(v, np.floating) else v) for k, v in metrics.items()}


def cmd_train(args) -> int:
    run = load_run_config(args.config, args.set)
    run.check_paths()
    out = Path(args.out or run.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(run.dumps())
    seqs, num_classes = load_dataset(run)
    trainer = Trainer(run.train, seqs, num_classes)
    with open(out / "metrics.jsonl", "w") as metrics, open(out / "modes.txt", "w") as modes:
        for epoch in range(1, run.train.epochs + 1):
            try:
                res = trainer.train_epoch(epoch)
                res.metrics["accuracy"] = trainer.evaluate()
            except DivergenceError as exc:
                dump = out / "divergence.npz"
                np.savez(dump, epoch=epoch, **trainer.params)
                exc.dump_path = str(dump)
                raise
            metrics.write(json.dumps(_jsonable(res.metrics), sort_keys=True) + "\n")
            for m in trainer.last_modes:
                modes.write(mode_record(epoch, m) + "\n")
            if not args.quiet:
                m = res.metrics
                print(f"epoch {epoch:4d} {m['mode']:>6} loss {m['loss']:.5f} acc {m['accuracy']:.4f} "
                      f"beta_thre {m['beta_thre']:.4g}")
    np.savez(out / "params.npz", **trainer.params)
    (out / "ledger.txt").write_text("\n".join(trainer.ledger.lines()) + "\n")
    return EXIT_OK


def bench_records(run: RunConfig):
    """Yield one benchmark record per (sequence length, hidden size, pattern, d_b) point."""
    b = run.bench
    if not (b.seq_lens and b.hidden and b.patterns):
        raise ConfigError("bench sweep is empty")
    for s in b.seq_lens:
        g = random_graph(s, b.density, b.seed)
        beta_g = density(g)
        k = min(b.k, 1 << (s.bit_length() - 1))
        perm = reorder(g, k, b.seed)
        grid = build_cluster_grid(g, perm, k)
        gp = permute(g, perm.forward)
        for d in b.hidden:
            rng = np.random.default_rng([b.seed, s, d])
            inp = AttnInputs(*(rng.standard_normal((s, d)) for _ in range(3)))
            for name in b.patterns:
                sizes = b.d_b if name == "cluster" else [None]
                for d_b in sizes:
                    extra = {}
                    if name == "dense":
                        pattern = Pattern.dense(s)
                    elif name == "edge":
                        pattern = Pattern.from_graph(gp)
                    else:
                        thre = b.beta_thre if b.beta_thre is not None else 5 * beta_g
                        layout = build_layout(grid, gp, Strategy.ELASTIC, thre, beta_g, d_b)
                        pattern = layout.pattern
                        extra = {"d_b": d_b, "transferred": layout.num_transferred,
                                 "dropped_edges": layout.dropped_edges}
                    best = float("inf")
                    for _ in range(b.repeats):
                        t0 = time.perf_counter()
                        _, counter, _ = attention_forward(inp, pattern)
                        best = min(best, time.perf_counter() - t0)
                    yield {"seq_len": s, "hidden": d, "pattern": name, "wall_time": best,
                           "score_macs": counter.score_macs, "weight_macs": counter.weight_macs,
                           "pairs": pattern.npairs, "density": beta_g, **extra}


def check_density_identity(records: list[dict]) -> None:
    """Edge over dense score MACs must equal the graph density exactly."""
    dense = {(r["seq_len"], r["hidden"]): r for r in records if r["pattern"] == "dense"}
    for r in records:
        ref = dense.get((r["seq_len"], r["hidden"]))
        if r["pattern"] != "edge" or ref is None:
            continue
        ratio = Fraction(r["score_macs"], ref["score_macs"])
        if ratio != Fraction(r["pairs"], r["seq_len"] ** 2):
            raise DataError(f"MAC ratio {ratio} breaks the density identity at S={r['seq_len']}")


def cmd_bench(args) -> int:
    run = load_run_config(args.config, args.set)
    records = []
    sink = open(args.out, "w") if args.out else sys.stdout
    try:
        for rec in bench_records(run):
            records.append(rec)
            sink.write(json.dumps(rec, sort_keys=True) + "\n")
        check_density_identity(records)
        cluster = [r for r in records if r["pattern"] == "cluster"]
        if len({r["d_b"] for r in cluster}) > 1:
            profile = {}
            for r in cluster:
                profile[r["d_b"]] = profile.get(r["d_b"], 0.0) + r["pairs"] / max(r["wall_time"], 1e-12)
            sink.write(json.dumps({"select_db": select_db(profile), "profile": profile}, sort_keys=True) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


def _load_graph(args) -> Graph:
    g = load_edge_list(Path(args.graph), args.num_nodes, undirected=args.undirected)
    return g if args.no_self_loops else add_self_loops(g)


def cmd_reorder(args) -> int:
    g = _load_graph(args)
    perm = reorder(g, args.k, args.seed)
    text = perm.dumps()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _grid_text(mat: np.ndarray, fmt: str) -> list[str]:
    return ["  " + " ".join(format(x, fmt) for x in row) for row in mat]


def inspect_report(g: Graph, k: int, d_b: int, beta_thre: float | None, seed: int = 0,
                   strategy: str = "elastic", *, dump_layout: bool = False) -> str:
    beta_g = density(g)
    before = diagonal_edge_fraction(build_cluster_grid(g, None, k))
    perm = reorder(g, k, seed)
    grid = build_cluster_grid(g, perm, k)
    after = diagonal_edge_fraction(grid)
    thre = beta_thre if beta_thre is not None else 5 * beta_g
    layout = build_layout(grid, permute(g, perm.forward), strategy, thre, beta_g, d_b)
    lines = [f"nodes {g.num_nodes} edges {g.nnz}",
             f"beta_G {beta_g:.6g}",
             f"k {k} d_b {d_b} strategy {layout.strategy.value} threshold {layout.threshold:.6g}",
             f"diagonal_edge_fraction before {before:.6f} after {after:.6f}",
             "beta_C:", *_grid_text(grid.cell_density, ".4f"),
             "transferred:", *_grid_text(layout.transferred.astype(int), "d"),
             "subblocks:",
             *_grid_text(np.array([[len(layout.subblocks.get((a, b), ())) for b in range(k)]
                                   for a in range(k)]), "d"),
             f"transferred_cells {layout.num_transferred}",
             f"dropped_edges {layout.dropped_edges}",
             f"infeasible_cells {layout.infeasible_cells}",
             f"pairs {layout.pair_count}"]
    text = "\n".join(lines) + "\n"
    return text + layout.dump() if dump_layout else text


def cmd_inspect(args) -> int:
    g = _load_graph(args)
    sys.stdout.write(inspect_report(g, args.k, args.d_b, args.beta_thre, args.seed, args.strategy,
                                    dump_layout=args.layout))
    return EXIT_OK


def cmd_gen_sbm(args) -> int:
    g = generate_sbm(args.n, args.blocks, args.p_in, args.p_out, args.seed, noise=args.noise)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_edge_list(g, f"{prefix}.edges")
    save_features(g.features, f"{prefix}.{'gtf' if args.binary else 'csv'}", binary=args.binary)
    np.savetxt(f"{prefix}.labels", np.asarray(g.labels), fmt="%d")
    print(f"wrote {prefix}.edges ({g.nnz} arcs, {g.num_nodes} nodes)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gtscale", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", nargs="?", help="YAML or JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. train.epochs=5")
        p.add_argument("--out")

    p = sub.add_parser("train", help="train on a graph dataset")
    with_config(p)
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="time attention kernels over a sweep")
    with_config(p)
    p.set_defaults(func=cmd_bench)

    def with_graph(p):
        p.add_argument("graph", help="edge list file")
        p.add_argument("--num-nodes", type=int)
        p.add_argument("--undirected", action="store_true", help="emit both arcs per line")
        p.add_argument("--no-self-loops", action="store_true")
        p.add_argument("--k", type=int, default=8)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("reorder", help="write a cluster-aware node permutation")
    with_graph(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reorder)

    p = sub.add_parser("inspect", help="report cluster densities and the reformed layout")
    with_graph(p)
    p.add_argument("--d-b", type=int, default=16)
    p.add_argument("--beta-thre", type=float)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default="elastic")
    p.add_argument("--layout", action="store_true", help="also print the per-cell layout dump")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gen-sbm", help="write a planted-partition dataset")
    p.add_argument("--n", type=int, default=80)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--p-in", type=float, default=0.95)
    p.add_argument("--p-out", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--binary", action="store_true", help="features in GTF1 instead of CSV")
    p.add_argument("--out", default="sbm")
    p.set_defaults(func=cmd_gen_sbm)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc} (state dumped to {exc.dump_path})", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, GTError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
