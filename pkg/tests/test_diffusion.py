import numpy as np
import pytest

from graphda.diffusion import (
    DiffusionError, build_diffusion, diffuse, diffuse_series, load_diffusion,
    save_diffusion, sparsify_topk, transition_matrix,
)
from graphda.graph import from_edges


def random_graph(n, p, seed):
    r = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = r.random(iu.size) < p
    return from_edges(n, list(zip(iu[keep], ju[keep])), np.ones((n, 1)), np.zeros(n, dtype=int), 1)


def _empty(n):
    return from_edges(n, [], np.ones((n, 1)), np.zeros(n, dtype=int), 1)


def test_transition_small_cases():
    assert transition_matrix(_empty(1)).tolist() == [[1.0]]
    assert np.array_equal(transition_matrix(_empty(3)), np.eye(3))
    two = from_edges(2, [(0, 1)], np.ones((2, 1)), [0, 0], 1)
    assert np.allclose(transition_matrix(two), 0.5, atol=1e-15)


def test_identity_transition_is_fixed_point():
    for a in (0.05, 0.5, 0.9):
        assert np.allclose(diffuse(np.eye(4), a), np.eye(4), atol=1e-14)


def test_two_node_closed_form():
    two = from_edges(2, [(0, 1)], np.ones((2, 1)), [0, 0], 1)
    # (I - 0.9 * 0.5 J)^-1 with J the all-ones 2x2: inverse of [[.55,-.45],[-.45,.55]] is [[5.5,4.5],[4.5,5.5]]
    oracle = 0.1 * np.linalg.inv(np.array([[0.55, -0.45], [-0.45, 0.55]]))
    out = diffuse(transition_matrix(two), 0.1)
    assert np.max(np.abs(out - [[0.55, 0.45], [0.45, 0.55]])) <= 1e-12
    assert np.max(np.abs(out - oracle)) <= 1e-12
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_matches_series_and_is_symmetric(seed):
    g = random_graph(30, 0.15, seed)
    t = transition_matrix(g)
    out = diffuse(t, 0.1)
    assert np.max(np.abs(out - diffuse_series(t, 0.1, 200))) <= 1e-8
    assert np.max(np.abs(out - out.T)) <= 1e-10
    assert out.min() >= 0 and out.max() <= 1


def test_bad_alpha():
    with pytest.raises(DiffusionError):
        diffuse(np.eye(2), 1.0)


def test_topk_order_statistics_and_ties():
    dense = np.array([[0.5, 0.3, 0.2, 0.0], [0.25, 0.25, 0.25, 0.25]])
    dm = sparsify_topk(dense, 2)
    assert dm.rows[0][0].tolist() == [0, 1]
    assert dm.rows[0][1].tolist() == [0.5, 0.3]
    assert dm.rows[1][0].tolist() == [0, 1]


def test_topk_tie_break_not_position_dependent():
    dense = np.array([[0.1, 0.4, 0.4, 0.4]])
    assert sparsify_topk(dense, 2).rows[0][0].tolist() == [1, 2]


def test_topk_large_s_keeps_row_and_is_idempotent(rng):
    dense = rng.uniform(size=(5, 5))
    full = sparsify_topk(dense, 10)
    assert all(ids.size == 5 for ids, _ in full.rows)
    once = sparsify_topk(dense, 3)
    again = sparsify_topk(once.to_sparse().toarray(), 3)
    for (i1, w1), (i2, w2) in zip(once.rows, again.rows):
        assert np.array_equal(i1, i2) and np.array_equal(w1, w2)


def test_no_renormalization_by_default():
    g = random_graph(20, 0.3, 1)
    dm = build_diffusion(g, 0.1, 3)
    sums = np.array([w.sum() for _, w in dm.rows])
    assert np.all(sums < 1.0)
    renorm = build_diffusion(g, 0.1, 3, renormalize=True)
    assert np.allclose([w.sum() for _, w in renorm.rows], 1.0)


def test_cache_roundtrip_bit_exact(tmp_path):
    dm = build_diffusion(random_graph(25, 0.2, 4), 0.15, 5)
    path = tmp_path / "ppr.txt"
    save_diffusion(dm, path)
    back = load_diffusion(path)
    assert back.alpha == dm.alpha and back.s == dm.s and back.num_nodes == dm.num_nodes
    for (i1, w1), (i2, w2) in zip(dm.rows, back.rows):
        assert np.array_equal(i1, i2)
        assert w1.tobytes() == w2.tobytes()


def test_empty_graph_diffusion_is_identity():
    dm = build_diffusion(_empty(4), 0.1, 3)
    assert np.allclose(dm.to_sparse().toarray(), np.eye(4), atol=1e-14)


@pytest.mark.parametrize("alpha", [0.05, 0.1, 0.2])
def test_matches_long_series_at_every_alpha(alpha):
    t = transition_matrix(random_graph(40, 0.1, 7))
    assert np.max(np.abs(diffuse(t, alpha) - diffuse_series(t, alpha, 2000))) <= 1e-12


def test_short_series_gap_is_its_own_tail():
    t = transition_matrix(random_graph(30, 0.2, 8))
    gap = np.max(np.abs(diffuse(t, 0.05) - diffuse_series(t, 0.05, 200)))
    assert 0 < gap <= 0.95 ** 200 + 1e-15
