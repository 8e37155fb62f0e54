import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regionckge.baseline import TransEModel
from regionckge.dataset import MULTI_HOP, SINGLE_HOP, HopLabel
from regionckge.eval import (
    FilterIndex,
    MetricsMatrix,
    brute_force_ranks,
    evaluate,
    hop_breakdown,
    measure_latency,
    metrics,
    rank_from_scores,
    rank_query,
    rank_triples,
    transfer_metrics,
)
from support import random_toy_model, region_score_fn, small_config


def test_metrics_example():
    m = metrics([1, 2, 4])
    assert abs(m["MRR"] - 1.75 / 3) < 1e-12
    assert abs(m["MRR"] - 0.5833) < 1e-4
    assert (m["Hits@1"], m["Hits@3"], m["Hits@10"]) == (1 / 3, 2 / 3, 1.0)
    assert m["queries"] == 3


def test_metrics_all_first():
    m = metrics([1, 1, 1])
    assert m["MRR"] == m["Hits@1"] == m["Hits@3"] == m["Hits@10"] == 1.0


def test_metrics_empty_is_error():
    with pytest.raises(ValueError):
        metrics([])


@given(st.lists(st.integers(1, 500), min_size=1, max_size=50))
def test_metric_bounds(ranks):
    m = metrics(ranks)
    assert 0 < m["MRR"] <= 1
    assert m["Hits@1"] <= m["Hits@3"] <= m["Hits@10"] <= 1


def test_transfer_metrics_example():
    grid = np.full((3, 3), np.nan)
    np.fill_diagonal(grid, 0.5)
    grid[2] = [0.4, 0.45, 0.5]
    grid[0, 1], grid[1, 2] = 0.2, 0.3
    fwt, bwt = transfer_metrics(grid)
    assert abs(fwt - 0.25) < 1e-12 and abs(bwt - (-0.075)) < 1e-12


def test_transfer_metrics_trivial_cases():
    grid = np.eye(3) * 0.6
    grid[2] = 0.6
    fwt, bwt = transfer_metrics(grid)
    assert fwt == 0.0 and bwt == 0.0
    assert transfer_metrics(np.array([[0.3]])) == (0.0, 0.0)


def test_transfer_metrics_incomplete():
    grid = np.full((2, 2), np.nan)
    grid[0, 0] = 0.5
    with pytest.raises(ValueError, match="missing"):
        transfer_metrics(grid)


def test_metrics_matrix_bounds_and_csv():
    mm = MetricsMatrix(2)
    mm.set(0, 0, {"MRR": 0.5, "Hits@1": 0.25, "Hits@3": 0.5, "Hits@10": 1.0})
    assert mm[0, 0] == 0.5
    with pytest.raises(ValueError):
        mm.set(1, 1, {"MRR": 1.5, "Hits@1": 0, "Hits@3": 0, "Hits@10": 0})
    assert mm.to_csv() == "model,test_0,test_1\n0,0.500000,\n1,,\n"


def test_rank_strictly_best_is_one():
    scores = np.array([0.1, 0.5, 0.7])
    assert rank_from_scores(scores, 0) == (1, 3)


@pytest.mark.parametrize("n", [1, 2, 5, 10, 11])
def test_all_tied_rank(n):
    assert rank_from_scores(np.zeros(n), 0)[0] == math.ceil((1 + n) / 2)


def test_filtered_excludes_other_true_answers():
    scores = np.array([0.0, 1.0, 2.0, 3.0])
    assert rank_from_scores(scores, 3, excluded=[0, 3])[0] == 3


def test_filter_index_lookups():
    fi = FilterIndex([np.array([[0, 0, 1], [0, 0, 2], [3, 0, 2]])])
    assert fi.true_answers((0, 0, 9), "tail") == {1, 2}
    assert fi.true_answers((9, 0, 2), "head") == {0, 3}
    assert (0, 0, 2) in fi and (2, 0, 0) not in fi


def test_five_entity_toy_oracle():
    rng = np.random.default_rng(5)
    model, snap = random_toy_model(rng, max_entities=5)
    fn = region_score_fn(model)
    fi = FilterIndex([snap.all_triples])
    for trip in snap.all_triples.tolist():
        for side in ("head", "tail"):
            for filt in (None, fi):
                got = rank_query(trip, side, model.scorer(), filt).rank
                assert got == brute_force_ranks(fn, trip, side, model.n_entities, filt)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("quantize", [False, True])
def test_oracle_random_region_kgs(seed, quantize):
    rng = np.random.default_rng(seed)
    model, snap = random_toy_model(rng, quantize=quantize)
    fn = region_score_fn(model)
    fi = FilterIndex([snap.all_triples])
    scorer = model.scorer()
    for side in ("head", "tail"):
        raw = rank_triples(scorer, snap.all_triples, side, model.n_entities)
        filt = rank_triples(scorer, snap.all_triples, side, model.n_entities, fi)
        for k, trip in enumerate(snap.all_triples.tolist()):
            assert raw[k] == brute_force_ranks(fn, trip, side, model.n_entities)
            assert filt[k] == brute_force_ranks(fn, trip, side, model.n_entities, fi)
            assert 1 <= filt[k] <= raw[k] <= model.n_entities


def test_quantized_models_produce_ties():
    model, snap = random_toy_model(np.random.default_rng(0), quantize=True)
    scores = model.scorer().candidate_scores(snap.all_triples, "tail", model.n_entities)
    assert any(len(np.unique(row)) < len(row) for row in scores)


@pytest.mark.parametrize("seed", range(3))
def test_oracle_transe(seed):
    rng = np.random.default_rng(seed)
    _, snap = random_toy_model(rng)
    model = TransEModel(small_config(dim=4, seed=seed))
    model.advance(snap)
    scorer = model.scorer()
    fn = lambda trip: scorer.score_triples(np.array([trip]))[0]
    fi = FilterIndex([snap.all_triples])
    for side in ("head", "tail"):
        got = rank_triples(scorer, snap.all_triples, side, snap.n_entities, fi)
        for k, trip in enumerate(snap.all_triples.tolist()):
            assert got[k] == brute_force_ranks(fn, trip, side, snap.n_entities, fi)


def test_single_scores_match_candidate_scan():
    model, snap = random_toy_model(np.random.default_rng(3))
    scorer = model.scorer()
    scan = scorer.candidate_scores(snap.all_triples, "tail", model.n_entities)
    for k, (h, r, t) in enumerate(snap.all_triples.tolist()):
        assert scan[k, t] == scorer.score_triples(np.array([[h, r, t]]))[0]


def test_rank_query_unembedded():
    model, _ = random_toy_model(np.random.default_rng(1))
    with pytest.raises(KeyError):
        rank_query((model.n_entities, 0, 0), "head", model.scorer())


def test_evaluate_pools_sides():
    model, snap = random_toy_model(np.random.default_rng(2))
    m, ranks = evaluate(model.scorer(), snap.test, model.n_entities)
    assert ranks.shape == (len(snap.test), 2)
    assert m["queries"] == 2 * len(snap.test)
    assert abs(m["MRR"] - np.mean(1 / ranks)) < 1e-12


def test_hop_breakdown_partition_and_empty_bucket():
    triples = np.array([[0, 0, 1], [1, 0, 2], [2, 0, 3]])
    ranks = np.array([[1, 2], [3, 4], [5, 6]])
    labels = HopLabel(snapshot=1, triple_labels={(0, 0, 1): SINGLE_HOP, (1, 0, 2): SINGLE_HOP,
                                                 (2, 0, 3): SINGLE_HOP})
    out = hop_breakdown(triples, ranks, labels)
    assert out[MULTI_HOP] is None and out[f"{MULTI_HOP}_triples"] == 0
    assert out[SINGLE_HOP]["queries"] == 6
    labels.triple_labels[(2, 0, 3)] = MULTI_HOP
    out = hop_breakdown(triples, ranks, labels)
    assert out[f"{MULTI_HOP}_triples"] + out[f"{SINGLE_HOP}_triples"] == 3
    assert out[MULTI_HOP]["MRR"] == metrics([5, 6])["MRR"]


def test_latency_empty():
    model, _ = random_toy_model(np.random.default_rng(0))
    rep = measure_latency(model.scorer, np.zeros((0, 3), dtype=np.int64), model.n_entities)
    assert (rep.queries, rep.total_seconds, rep.candidates) == (0, 0.0, model.n_entities)


def test_latency_scales_with_test_size():
    model, snap = random_toy_model(np.random.default_rng(4))
    base = np.concatenate([snap.all_triples] * 40)

    def best_of(trips):
        return min(measure_latency(model.scorer, trips, model.n_entities).total_seconds
                   for _ in range(5))

    one, two = best_of(base), best_of(np.concatenate([base, base]))
    assert 1.0 <= two / one <= 3.0
    rep = measure_latency(model.scorer, base, model.n_entities)
    assert rep.queries == 2 * len(base)
    assert rep.mean_seconds == pytest.approx(rep.total_seconds / rep.queries)
