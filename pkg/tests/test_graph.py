import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphda.graph import (
    UNKNOWN, Graph, GraphError, LoadError, align_attributes, common_attribute_rate,
    from_edges, load_graph, read_vocabulary, select_labeled_per_class, write_graph,
)


def _vocab_with_counts(shared, union, source_only):
    src = [f"s{i}" for i in range(shared + source_only)]
    tgt = [f"s{i}" for i in range(shared)] + [f"t{i}" for i in range(union - shared - source_only)]
    return align_attributes(src, tgt)


def test_union_order_and_maps():
    v = align_attributes(["a", "b"], ["b", "c"])
    assert v.union_names == ("a", "b", "c")
    assert v.source_index_map == {0: 0, 1: 1}
    assert v.target_index_map == {0: 1, 1: 2}


def test_identical_and_disjoint_rates():
    assert common_attribute_rate(align_attributes(["a"], ["a"])) == 1.0
    assert common_attribute_rate(align_attributes(["a", "b"], ["c"])) == 0.0


@pytest.mark.parametrize("shared,union,reported", [(4285, 6665, 0.6429), (4094, 4185, 0.9783)])
def test_rates_reported_for_benchmark_pairs(shared, union, reported):
    v = _vocab_with_counts(shared, union, source_only=(union - shared) // 2)
    assert v.size == union
    assert common_attribute_rate(v) == pytest.approx(reported, abs=5e-5)


def test_duplicate_token_rejected():
    with pytest.raises(GraphError, match="duplicate"):
        align_attributes(["a", "a"], ["b"])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 30), unique=True), st.lists(st.integers(0, 30), unique=True), st.randoms())
def test_rate_ignores_list_order(src, tgt, r):
    src, tgt = [str(x) for x in src], [str(x) for x in tgt]
    base = common_attribute_rate(align_attributes(src, tgt))
    r.shuffle(src)
    r.shuffle(tgt)
    assert common_attribute_rate(align_attributes(src, tgt)) == base
    v = align_attributes(src, tgt)
    assert sorted(v.union_names) == sorted(set(src) | set(tgt))


def _write(tmp_path, edges="", attrs="", labels=""):
    paths = [tmp_path / n for n in ("e.txt", "a.txt", "l.txt")]
    for p, text in zip(paths, (edges, attrs, labels)):
        p.write_text(text)
    return paths


def _load(paths, **kw):
    vocab = align_attributes(read_vocabulary(paths[1]), [])
    return load_graph(*paths, vocab, "source", **kw)


def test_two_node_edge(tmp_path):
    g = _load(_write(tmp_path, "0 1\n", "0 x 1\n1 x 1\n", "0 0\n1 1\n"))
    assert g.neighbors(0).tolist() == [1]
    assert g.neighbors(1).tolist() == [0]


def test_duplicate_edge_lines_merge(tmp_path):
    g = _load(_write(tmp_path, "0 1\n1 0\n", "0 x 1\n1 x 1\n", "0 0\n"))
    assert g.num_edges() == 1


def test_empty_edge_file_isolated_nodes(tmp_path):
    g = _load(_write(tmp_path, "# nodes=3\n", "0 x 1\n", ""), num_classes=2)
    assert g.num_nodes == 3
    assert g.degrees().tolist() == [0, 0, 0]
    assert np.all(g.labels == UNKNOWN)


@pytest.mark.parametrize("edges,attrs,labels,bad,line", [
    ("0 5\n", "0 x 1\n", "", "e.txt", 2),
    ("0 1\n0\n", "0 x 1\n", "", "e.txt", 3),
    ("0 1\n", "0 x 1\n1 x oops\n", "", "a.txt", 2),
    ("0 1\n", "0 x 1\n", "0 0\n1 3\n", "l.txt", 3),
])
def test_load_errors_name_file_and_line(tmp_path, edges, attrs, labels, bad, line):
    paths = _write(tmp_path, "# nodes=2\n" + edges, attrs, "# classes=2\n" + labels)
    with pytest.raises(LoadError) as info:
        _load(paths)
    assert bad in str(info.value)
    assert info.value.lineno == line


def test_write_then_load_roundtrip(tmp_path, rng):
    n = 12
    edges = [(i, (i * 5 + 1) % n) for i in range(n) if i != (i * 5 + 1) % n]
    x = np.round(rng.uniform(0, 1, size=(n, 4)) * (rng.uniform(size=(n, 4)) > 0.4), 6)
    labels = rng.integers(0, 3, size=n)
    g = from_edges(n, edges, x, labels, 3)
    paths = [tmp_path / f for f in ("e", "a", "l")]
    names = ["w0", "w1", "w2", "w3"]
    write_graph(g, names, *paths)
    vocab = align_attributes(names, [])
    back = load_graph(*paths, vocab, "source")
    assert back.num_nodes == n and back.num_classes == 3
    assert np.array_equal(back.adjacency(), g.adjacency())
    assert np.array_equal(back.attributes, g.attributes)
    assert np.array_equal(back.labels, g.labels)


def test_symmetry_and_self_loops():
    g = from_edges(4, [(0, 1), (2, 2), (3, 1)], np.ones((4, 1)), [0, 0, 1, 1], 2)
    a = g.adjacency()
    assert np.array_equal(a, a.T)
    assert np.all(np.diag(a) == 0)
    assert g.is_symmetric()
    with pytest.raises(GraphError):
        Graph([np.array([0])], np.ones((1, 1)), [0], 1)


def test_negative_attributes_rejected():
    with pytest.raises(GraphError):
        from_edges(2, [], np.array([[1.0], [-0.5]]), [0, 0], 1)


def _labeled_graph(per_class, classes):
    labels = np.repeat(np.arange(classes), per_class)
    return from_edges(labels.size, [], np.ones((labels.size, 1)), labels, classes)


def test_select_labeled_sizes_and_determinism():
    g = _labeled_graph(20, 5)
    ids = select_labeled_per_class(g, 5, seed=3)
    assert ids.size == 25
    assert np.bincount(g.labels[ids], minlength=5).tolist() == [5] * 5
    assert np.array_equal(ids, select_labeled_per_class(g, 5, seed=3))
    assert select_labeled_per_class(g, 0, seed=3).size == 0


def test_select_labeled_short_class_named():
    labels = np.array([0] * 6 + [1] * 2)
    g = from_edges(8, [], np.ones((8, 1)), labels, 2)
    with pytest.raises(GraphError, match="class 1"):
        select_labeled_per_class(g, 3, seed=0)


def test_permuted_graph_relabels_consistently(rng):
    g = from_edges(5, [(0, 1), (1, 2), (3, 4)], rng.uniform(size=(5, 2)), [0, 1, 0, 1, 0], 2)
    perm = rng.permutation(5)
    h = g.permuted(perm)
    a, b = g.adjacency(), h.adjacency()
    # node v of g becomes node perm[v] of h, or the inverse; accept whichever convention holds
    fwd = np.array_equal(b[np.ix_(perm, perm)], a)
    inv = np.argsort(perm)
    bwd = np.array_equal(b[np.ix_(inv, inv)], a)
    assert fwd or bwd
