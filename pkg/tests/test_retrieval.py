import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d2fel.retrieval import EvalProtocol, ProtocolError, evaluate, evaluate_distances, pairwise_distances


def brute_force(q_feats, q_ids, q_cams, g_feats, g_ids, g_cams):
    """Textbook mAP and CMC with scalar loops: rank = 1 + #valid rows ordered before the row."""
    Ng = len(g_ids)
    aps, first_hits = [], []
    for i in range(len(q_ids)):
        dist = [math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(q_feats[i], g_feats[j])))
                for j in range(Ng)]
        valid = [j for j in range(Ng) if not (g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i])]
        rank = {}
        for j in valid:
            rank[j] = 1 + sum(1 for k in valid if (dist[k], k) < (dist[j], j))
        pos = sorted(rank[j] for j in valid if g_ids[j] == q_ids[i])
        if not pos:
            continue
        aps.append(sum((n + 1) / r for n, r in enumerate(pos)) / len(pos))
        first_hits.append(pos[0])
    cmc = [sum(1 for h in first_hits if h <= r) / len(first_hits) for r in range(1, Ng + 1)]
    return sum(aps) / len(aps), cmc, aps


def random_config(seed):
    rng = np.random.default_rng(seed)
    Ng = int(rng.integers(5, 51))
    Nq = int(rng.integers(1, 11))
    n_ids = int(rng.integers(2, 6))
    dim = int(rng.integers(1, 6))
    g_ids = rng.integers(0, n_ids, Ng)
    g_cams = rng.integers(0, 3, Ng)
    q_ids = rng.integers(0, n_ids, Nq)
    q_cams = rng.integers(0, 3, Nq)
    # coarse grid features produce plenty of distance ties
    g = rng.integers(-2, 3, (Ng, dim)).astype(np.float64)
    q = rng.integers(-2, 3, (Nq, dim)).astype(np.float64)
    return q, q_ids, q_cams, g, g_ids, g_cams


def test_distance_examples():
    e = np.eye(2)
    np.testing.assert_allclose(pairwise_distances(e, e), [[0, math.sqrt(2)], [math.sqrt(2), 0]], atol=1e-12)
    np.testing.assert_allclose(pairwise_distances(e, e, "cosine"), [[0, 1], [1, 0]], atol=1e-12)


def test_distance_loop_oracle():
    rng = np.random.default_rng(0)
    q, g = rng.standard_normal((10, 4)), rng.standard_normal((10, 4))
    loop = np.array([[math.dist(a, b) for b in g] for a in q])
    np.testing.assert_allclose(pairwise_distances(q, g), loop, atol=1e-6)


def test_cosine_zero_vector_is_one_and_flagged():
    q = np.array([[0.0, 0.0], [1.0, 0.0]])
    g = np.array([[1.0, 0.0], [0.0, 1.0]])
    d = pairwise_distances(q, g, "cosine")
    np.testing.assert_array_equal(d[0], [1.0, 1.0])
    rep = evaluate(q, [0, 0], [0, 0], g, [0, 1], [1, 1], EvalProtocol("cosine"))
    assert rep.zero_vectors == 1


def test_distance_dim_mismatch():
    with pytest.raises(ValueError):
        pairwise_distances(np.zeros((1, 2)), np.zeros((1, 3)))


def test_single_positive_first():
    rep = evaluate(np.zeros((1, 1)), [1], [0], np.array([[0.0], [5.0]]), [1, 2], [1, 1])
    assert rep.mAP == 1.0
    assert rep.rank1 == 1.0


def test_positives_at_ranks_one_and_three():
    g = np.array([[1.0], [2.0], [3.0], [4.0]])
    rep = evaluate(np.zeros((1, 1)), [7], [0], g, [7, 8, 7, 8], [1, 1, 1, 1])
    assert rep.mAP == pytest.approx((1 / 1 + 2 / 3) / 2)
    assert rep.mAP == pytest.approx(0.8333, abs=5e-5)


def test_junk_rows_removed_before_ranking():
    # nearest row is same identity and same camera, so it must not count
    g = np.array([[0.0], [1.0], [2.0]])
    rep = evaluate(np.zeros((1, 1)), [3], [0], g, [3, 4, 3], [0, 1, 1])
    assert rep.mAP == pytest.approx(0.5)
    assert rep.cmc[:2] == [0.0, 1.0]


def test_queries_without_positive_are_skipped_and_counted():
    g = np.array([[0.0], [1.0]])
    rep = evaluate(np.zeros((2, 1)), [1, 9], [0, 0], g, [1, 2], [1, 1])
    assert rep.num_queries == 2
    assert rep.num_valid_queries == 1


def test_no_valid_query_raises():
    with pytest.raises(ProtocolError):
        evaluate(np.zeros((1, 1)), [1], [0], np.zeros((2, 1)), [1, 2], [0, 0])


@pytest.mark.parametrize("seed", range(50))
def test_matches_brute_force_exactly(seed):
    q, qi, qc, g, gi, gc = random_config(seed)
    try:
        oracle = brute_force(q, qi, qc, g, gi, gc)
    except ZeroDivisionError:
        with pytest.raises(ProtocolError):
            evaluate(q, qi, qc, g, gi, gc)
        return
    rep = evaluate(q, qi, qc, g, gi, gc)
    assert rep.mAP == pytest.approx(oracle[0], abs=1e-12)
    assert rep.cmc == pytest.approx(oracle[1], abs=1e-12)
    assert rep.ap == pytest.approx(oracle[2], abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.01, 100.0))
def test_scale_invariance(seed, scale):
    q, qi, qc, g, gi, gc = random_config(seed)
    # continuous features avoid ties that scaling could break through rounding
    rng = np.random.default_rng(seed)
    q, g = rng.standard_normal(q.shape), rng.standard_normal(g.shape)
    try:
        a = evaluate(q, qi, qc, g, gi, gc)
    except ProtocolError:
        return
    b = evaluate(q * scale, qi, qc, g * scale, gi, gc)
    assert a.ap == pytest.approx(b.ap, abs=1e-12)
    assert a.cmc == b.cmc


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_gallery_permutation_invariance(seed):
    q, qi, qc, g, gi, gc = random_config(seed)
    rng = np.random.default_rng(seed)
    q, g = rng.standard_normal(q.shape), rng.standard_normal(g.shape)
    perm = rng.permutation(len(gi))
    try:
        a = evaluate(q, qi, qc, g, gi, gc)
    except ProtocolError:
        return
    b = evaluate(q, qi, qc, g[perm], gi[perm], gc[perm])
    assert a.mAP == pytest.approx(b.mAP, abs=1e-12)
    assert a.cmc == pytest.approx(b.cmc, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_report_invariants(seed):
    q, qi, qc, g, gi, gc = random_config(seed)
    try:
        rep = evaluate(q, qi, qc, g, gi, gc)
    except ProtocolError:
        return
    assert 0.0 <= rep.mAP <= 1.0
    assert all(b >= a for a, b in zip(rep.cmc, rep.cmc[1:]))
    assert rep.rank1 == rep.cmc[0]
    assert rep.cmc[-1] == pytest.approx(1.0)
    assert rep.mAP <= rep.cmc[-1] + 1e-12


def test_concat_differs_from_single_head():
    rng = np.random.default_rng(5)
    ids = np.repeat(np.arange(6), 4)
    cams = np.tile([0, 1], 12)
    h1, h2 = rng.standard_normal((24, 3)), rng.standard_normal((24, 3))
    one = evaluate(h1[::2], ids[::2], cams[::2], h1[1::2], ids[1::2], cams[1::2]).mAP
    both = np.hstack([h1, h2])
    two = evaluate(both[::2], ids[::2], cams[::2], both[1::2], ids[1::2], cams[1::2]).mAP
    assert one != two


def test_distances_precomputed_path():
    dist = np.array([[0.5, 0.1]])
    mAP, cmc, _, n = evaluate_distances(dist, [1], [0], [1, 2], [1, 1])
    assert (mAP, cmc, n) == (0.5, [0.0, 1.0], 1)
