import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtscale.errors import DataError, ParseError
from gtscale.graph import (Graph, SpdTable, add_self_loops, density, has_all_self_loops,
                           induced_subgraph, load_edge_list, load_features, permute, save_edge_list,
                           save_features, spd_table)

from .oracles import floyd_warshall


@st.composite
def graphs(draw, max_nodes=12):
    n = draw(st.integers(1, max_nodes))
    arcs = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=3 * n))
    src = [a for a, _ in arcs]
    dst = [b for _, b in arcs]
    return Graph.from_edges(n, src, dst)


def test_load_simple():
    g = load_edge_list(b"0 1\n1 2")
    assert g.num_nodes == 3 and g.nnz == 2
    assert g.row_offsets.tolist() == [0, 1, 2, 2]


def test_load_collapses_duplicates():
    g = load_edge_list(b"0 1\n0 1")
    assert (g.num_nodes, g.nnz) == (2, 1)


def test_load_sorts_rows_and_skips_comments():
    g = load_edge_list("# header\n0 3\n\n0 1\n  0 2  \n")
    assert g.neighbors(0).tolist() == [1, 2, 3]


def test_load_malformed_token_reports_line():
    with pytest.raises(ParseError) as err:
        load_edge_list(b"0 x")
    assert err.value.line == 1
    assert str(err.value).startswith("line 1:")


def test_load_wrong_arity_reports_line():
    with pytest.raises(ParseError) as err:
        load_edge_list("0 1\n2 3 4\n")
    assert err.value.line == 2


def test_load_range_error_with_hint():
    with pytest.raises(DataError, match="out of range"):
        load_edge_list(b"0 5", num_nodes_hint=3)


def test_load_empty_without_hint():
    with pytest.raises(DataError, match="empty graph"):
        load_edge_list(b"# nothing\n")


def test_load_empty_with_hint_gives_isolated_nodes():
    g = load_edge_list(b"", num_nodes_hint=4)
    assert g.num_nodes == 4 and g.nnz == 0


def test_load_undirected_emits_both_arcs(tmp_path):
    path = tmp_path / "g.txt"
    path.write_text("0 1\n1 2\n")
    g = load_edge_list(path, undirected=True)
    assert g.nnz == 4 and g.has_edge(1, 0) and g.has_edge(2, 1)


def test_load_from_stream():
    g = load_edge_list(io.BytesIO(b"1 0\n"))
    assert g.has_edge(1, 0) and not g.has_edge(0, 1)


def test_edge_list_roundtrip(tmp_path):
    g = Graph.from_edges(5, [0, 1, 4, 4], [1, 0, 4, 2])
    path = tmp_path / "g.txt"
    save_edge_list(g, path)
    h = load_edge_list(path, 5)
    assert np.array_equal(h.row_offsets, g.row_offsets)
    assert np.array_equal(h.col_indices, g.col_indices)


def test_invalid_graph_rejected():
    with pytest.raises(DataError):
        Graph(2, np.array([0, 1, 1]), np.array([5]))
    with pytest.raises(DataError):
        Graph(2, np.array([0, 2, 2]), np.array([1, 1]))


@pytest.mark.parametrize("binary", [False, True])
def test_features_roundtrip(tmp_path, binary):
    feats = np.arange(12, dtype=np.float64).reshape(4, 3) / 8
    path = tmp_path / ("f.gtf" if binary else "f.csv")
    save_features(feats, path, binary=binary)
    assert np.array_equal(load_features(path), feats)


def test_gtf_header_layout(tmp_path):
    path = tmp_path / "f.gtf"
    save_features(np.ones((2, 3)), path, binary=True)
    raw = path.read_bytes()
    assert raw[:4] == b"GTF1"
    assert int.from_bytes(raw[4:12], "little") == 2
    assert int.from_bytes(raw[12:20], "little") == 3
    assert len(raw) == 20 + 2 * 3 * 4


def test_gtf_truncated(tmp_path):
    path = tmp_path / "f.gtf"
    path.write_bytes(b"GTF1" + (2).to_bytes(8, "little") + (2).to_bytes(8, "little") + b"\0" * 4)
    with pytest.raises(DataError):
        load_features(path)


def test_add_self_loops_counts():
    g = add_self_loops(Graph.from_edges(3, [0, 1], [1, 2]))
    assert g.nnz == 5 and has_all_self_loops(g)


def test_add_self_loops_idempotent():
    g = add_self_loops(Graph.from_edges(3, [0, 1], [1, 2]))
    h = add_self_loops(g)
    assert np.array_equal(g.col_indices, h.col_indices)


def test_add_self_loops_single_node():
    g = add_self_loops(Graph.from_edges(1, [], []))
    assert g.edges()[0].tolist() == [0] and g.edges()[1].tolist() == [0]


def test_density_values():
    assert density(Graph.from_edges(4, [0, 1, 2, 3], [1, 2, 3, 0])) == 0.25
    full = add_self_loops(Graph.from_edges(5, *np.nonzero(~np.eye(5, dtype=bool))))
    assert density(full) == 1.0


def test_density_at_reference_scale():
    # 169343 nodes with 1166243 arcs; only the ratio matters, so no edges are materialised
    n, nnz = 169343, 1166243
    offsets = np.zeros(n + 1, dtype=np.int64)
    offsets[1:] = np.minimum(np.arange(1, n + 1) * 7, nnz)
    offsets[-1] = nnz
    cols = np.tile(np.arange(7), nnz // 7 + 1)[:nnz]
    assert density(Graph(n, offsets, cols)) == pytest.approx(4.1e-5, rel=0.02)


def test_spd_path():
    g = Graph.from_edges(3, [0, 1, 1, 2], [1, 0, 2, 1])
    assert spd_table(g, 4)[0, 2] == 2
    capped = spd_table(g, 1)
    assert capped[0, 2] == capped.unreachable == 2


def test_spd_disconnected():
    t = spd_table(Graph.from_edges(2, [], []), 3)
    assert t[0, 1] == t.unreachable == 4 and t[0, 0] == 0


def test_spd_size_guard():
    with pytest.raises(DataError):
        spd_table(Graph.from_edges(10, [], []), 3, max_nodes=5)


def test_spd_matches_floyd_warshall_on_random_graphs():
    rng = np.random.default_rng(0)
    for trial in range(30):
        n = int(rng.integers(1, 51))
        m = int(rng.integers(0, 3 * n))
        src, dst = rng.integers(0, n, m), rng.integers(0, n, m)
        g = Graph.from_edges(n, src, dst)
        cap = int(rng.integers(1, 7))
        expected = floyd_warshall(n, list(zip(src.tolist(), dst.tolist())), cap)
        assert np.array_equal(spd_table(g, cap).buckets, expected), trial


@settings(max_examples=60, deadline=None)
@given(graphs())
def test_spd_invariants(g):
    t = spd_table(g, 3)
    assert np.all(np.diag(t.buckets) == 0)
    assert t.buckets.max(initial=0) <= t.unreachable
    rows, cols = g.edges()
    off = rows != cols
    assert np.all(t.buckets[rows[off], cols[off]] == 1)
    # distance 1 only where an arc exists in some direction
    ones = np.argwhere(t.buckets == 1)
    for i, j in ones:
        assert g.has_edge(i, j) or g.has_edge(j, i)


def test_spd_permuted_follows_relabeling():
    g = Graph.from_edges(4, [0, 1, 2], [1, 2, 3])
    t = spd_table(g, 5)
    fwd = np.array([2, 0, 3, 1])
    tp = t.permuted(fwd)
    for i in range(4):
        for j in range(4):
            assert tp[fwd[i], fwd[j]] == t[i, j]


def test_induced_subgraph_k3():
    k3 = Graph.from_edges(3, [0, 0, 1, 1, 2, 2], [1, 2, 0, 2, 0, 1])
    sub = induced_subgraph(k3, [0, 1])
    assert sub.num_nodes == 2 and sub.nnz == 2 and sub.has_edge(0, 1) and sub.has_edge(1, 0)


def test_induced_subgraph_relabels_and_carries_rows():
    feats = np.arange(8.0).reshape(4, 2)
    g = Graph.from_edges(4, [3, 1, 0], [1, 3, 2], feats, np.array([5, 6, 7, 8]))
    sub = induced_subgraph(g, [3, 1])
    assert sub.has_edge(0, 1) and sub.has_edge(1, 0) and sub.nnz == 2
    assert np.array_equal(sub.features, feats[[3, 1]])
    assert sub.labels.tolist() == [8, 6]


@pytest.mark.parametrize("nodes", [[0, 0], [0, 7], [-1]])
def test_induced_subgraph_bad_nodes(nodes):
    with pytest.raises(DataError):
        induced_subgraph(Graph.from_edges(3, [0], [1]), nodes)


@settings(max_examples=60, deadline=None)
@given(graphs())
def test_induced_subgraph_all_nodes_is_identity(g):
    sub = induced_subgraph(g, list(range(g.num_nodes)))
    assert sub.nnz == g.nnz
    assert np.array_equal(sub.row_offsets, g.row_offsets)
    assert np.array_equal(sub.col_indices, g.col_indices)


@settings(max_examples=60, deadline=None)
@given(graphs())
def test_self_loops_never_lower_density(g):
    h = add_self_loops(g)
    assert density(h) >= density(g)
    assert (density(h) == density(g)) == has_all_self_loops(g)


@settings(max_examples=40, deadline=None)
@given(graphs(), st.randoms(use_true_random=False))
def test_permute_relabels_edge_multiset(g, rnd):
    fwd = list(range(g.num_nodes))
    rnd.shuffle(fwd)
    fwd = np.array(fwd)
    h = permute(g, fwd)
    rows, cols = g.edges()
    expect = sorted(zip(fwd[rows].tolist(), fwd[cols].tolist()))
    got = sorted(zip(*(a.tolist() for a in h.edges())))
    assert got == expect


def test_pipeline_deterministic():
    data = b"0 1\n3 2\n1 3\n2 0\n"
    a = density(add_self_loops(load_edge_list(data)))
    b = density(add_self_loops(load_edge_list(data)))
    assert a == b == 8 / 16


def test_spd_table_type():
    t = SpdTable(2, np.array([[0, 3], [3, 0]]))
    assert t.unreachable == 3
    assert t.lookup(np.array([0, 1]), np.array([1, 1])).tolist() == [3, 0]
