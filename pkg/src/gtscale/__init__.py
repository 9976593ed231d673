"""Desk-scale graph transformer training with interleaved sparse attention,
simulated sequence parallelism and cluster-sparse layout reformation."""

__version__ = "0.1.0"

from .cluster import ClusterGrid, Permutation, build_cluster_grid, diagonal_edge_fraction, reorder
from .data import generate_sbm, random_graph
from .errors import ConfigError, DataError, DivergenceError, GTError, NonFiniteError, ParseError
from .graph import (Graph, SpdTable, add_self_loops, density, induced_subgraph, load_edge_list,
                    spd_table)
from .interleave import AttentionMode, ConditionReport, Mode, Reason, check_conditions, select_mode
from .kernels import (AttnInputs, MacCounter, attention_backward, cluster_sparse_attention,
                      dense_attention, edge_sparse_attention)
from .parallel import CommLedger, WorkerShard, partition_sequence, run_distributed_layer
from .reformation import (ClusterSparseLayout, Strategy, TunerState, build_layout, pack_subblocks,
                          select_db, select_k, tuner_update)
from .train import TrainConfig, Trainer, evaluate, fit, train_epoch
