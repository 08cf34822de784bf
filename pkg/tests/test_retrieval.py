import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentcir.benchmark import make_family_benchmark
from latentcir.retrieval import (
    average_precision_at_k,
    build_index,
    evaluate,
    index_from_corpus,
    map_at_k,
    positives_for,
    recall_at_k,
    score_rankings,
    search,
    search_batch,
)
from latentcir.toyworld import ToyWorld, WorldConfig


def _unit(rng, n, d=8):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_singleton_index(rng):
    idx = build_index([42], _unit(rng, 1))
    assert list(search(idx, rng.standard_normal(8), 1)) == [42]


def test_index_rows_unit_norm(rng):
    idx = build_index(range(10), 3.0 * rng.standard_normal((10, 8)))
    assert np.allclose(np.linalg.norm(idx.matrix, axis=1), 1.0)


def test_index_errors(rng):
    with pytest.raises(ValueError):
        build_index([], np.zeros((0, 8)))
    with pytest.raises(ValueError):
        build_index([1, 1], _unit(rng, 2))
    idx = build_index(range(3), _unit(rng, 3))
    for k in (0, 4):
        with pytest.raises(ValueError):
            search(idx, rng.standard_normal(8), k)


def test_corpus_row_ranks_first(rng):
    vecs = _unit(rng, 50)
    idx = build_index(np.arange(100, 150), vecs)
    for i in range(50):
        assert search(idx, vecs[i], 1)[0] == 100 + i


def test_full_search_is_permutation(rng):
    idx = build_index(np.arange(30), _unit(rng, 30))
    out = search(idx, rng.standard_normal(8), 30)
    assert sorted(out) == list(range(30))


def test_search_matches_brute_force(rng):
    base = _unit(rng, 40)
    vecs = np.concatenate([base, base[:10]])  # duplicate rows force ties
    ids = rng.permutation(1000)[:50]
    idx = build_index(ids, vecs)
    queries = rng.standard_normal((100, 8))
    queries[:10] = vecs[:10]
    got = search_batch(idx, queries, 20)
    for q, row in zip(queries, got):
        scores = vecs @ q / np.linalg.norm(vecs, axis=1)
        # quantise so equal rows tie exactly, then order by (-score, id)
        keyed = sorted(zip(np.round(-scores, 12), ids))
        assert list(row) == [int(i) for _, i in keyed[:20]]


def test_recall_examples():
    ranked = [[3, 1, 2], [5, 6, 7]]
    assert recall_at_k(ranked, [[1], [9]], 1) == 0.0
    assert recall_at_k(ranked, [[1], [9]], 2) == 0.5
    assert recall_at_k(ranked, [[1], [7]], 3) == 1.0


def test_average_precision_examples():
    assert average_precision_at_k([1, 2, 3], [1], 3) == 1.0
    assert average_precision_at_k([2, 1, 3], [1], 3) == 0.5
    assert average_precision_at_k([1, 9, 2], [1, 2], 3) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision_at_k([9, 8, 7], [1], 3) == 0.0
    with pytest.raises(ValueError):
        average_precision_at_k([1], [], 1)


def _ap_oracle(order, positives, k):
    """Average precision written out from its definition: mean over the first
    min(|P|, k) positive slots of precision at each hit position."""
    precisions = []
    for cut in range(1, k + 1):
        if order[cut - 1] in positives:
            precisions.append(sum(1 for x in order[:cut] if x in positives) / cut)
    return sum(precisions) / min(len(positives), k)


@pytest.mark.parametrize("k", [1, 2, 3, 5])
def test_map_matches_oracle_over_all_orderings(k):
    positives = {0, 3}
    orders = list(itertools.permutations(range(5)))
    assert len(orders) == 120
    for order in orders:
        assert average_precision_at_k(list(order), positives, k) == pytest.approx(_ap_oracle(order, positives, k))
    got = map_at_k([list(o) for o in orders], [positives] * 120, k)
    assert got == pytest.approx(np.mean([_ap_oracle(o, positives, k) for o in orders]))


@given(st.lists(st.integers(0, 30), min_size=1, max_size=20, unique=True), st.integers(1, 31))
@settings(max_examples=100)
def test_metrics_bounded_and_monotone(positives, seed):
    rng = np.random.default_rng(seed)
    ranked = list(rng.permutation(31))
    recalls = [recall_at_k([ranked], [positives], k) for k in range(1, 32)]
    assert all(0 <= r <= 1 for r in recalls)
    assert recalls == sorted(recalls) and recalls[-1] == 1.0
    for k in (1, 5, 10, 31):
        assert 0.0 <= average_precision_at_k(ranked, positives, k) <= 1.0


def test_random_composer_recall(world):
    """Each corpus item is the positive of exactly one query, so a composer
    that ignores its input scores k / n in expectation."""
    bench = make_family_benchmark(world, 8, 16, seed=4)
    idx = index_from_corpus(world, bench.corpus)
    positives = positives_for(world, idx, [q.target_scene for q in bench.queries])
    rng = np.random.default_rng(0)
    passes = 16
    hits = [score_rankings(idx, rng.standard_normal((len(positives), 64)), positives).recall[10]
            for _ in range(passes)]
    n, trials = len(idx), passes * len(positives)
    p = 10 / n
    assert abs(np.mean(hits) - p) < 3 * np.sqrt(p * (1 - p) / trials)


@pytest.fixture(scope="module")
def clean_world():
    return ToyWorld(WorldConfig(instance_noise_sigma=0.0))


def test_oracle_composer_recall_one(clean_world):
    w = clean_world
    bench = make_family_benchmark(w, 6, 8, seed=1)
    idx = index_from_corpus(w, bench.corpus)
    oracle = lambda ts: np.stack([w.render_image(t.target_scene, 0) for t in ts])
    res = evaluate(None, w, bench.queries, idx, None, composer=oracle)
    assert res.recall[1] == 1.0 and res.map[5] == 1.0
    assert res.ranks == [1] * len(bench.queries)


def test_evaluate_with_reference_composer(world):
    bench = make_family_benchmark(world, 6, 8, seed=1)
    idx = index_from_corpus(world, bench.corpus)
    res = evaluate(None, world, bench.queries, idx, None, composer=lambda ts: np.stack([t.ref_embedding for t in ts]))
    assert 0.0 <= res.recall[1] <= res.recall[5] <= res.recall[10] <= res.recall[50] == 1.0
    assert res.top_ids.shape == (len(bench.queries), 10)
    with pytest.raises(ValueError):
        evaluate(None, world, [], idx, None, composer=lambda ts: None)


def test_positives_for_missing_target(world, rng):
    bench = make_family_benchmark(world, 2, 4, seed=2)
    idx = index_from_corpus(world, bench.corpus)
    pos = positives_for(world, idx, [bench.corpus[0][0], bench.bases[0]])
    assert pos == [[bench.corpus[0][0].scene_id(world.config)], []]
    with pytest.raises(ValueError):
        score_rankings(idx, rng.standard_normal((2, 64)), pos)
