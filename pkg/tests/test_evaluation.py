import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coldnas.data import DatasetSchema, Interaction, Task
from coldnas.evaluation import (MetricsReport, aggregate, dcg_at, evaluate, evaluate_predictor,
                                mean_rating_baseline, mse_mae, ndcg_at)
from coldnas.model import ColdStartModel, ModelConfig
from coldnas.modulation import ModulationAssignment

SCHEMA = DatasetSchema("toy", ("age",), (3,), ("genre",), (4,), (1.0, 5.0))


def task(user, ratings, n_support=2):
    rows = [Interaction(user, i, float(r), (1,), (1 + i % 4,)) for i, r in enumerate(ratings)]
    return Task(user, tuple(rows[:n_support]), tuple(rows[n_support:]))


def test_mse_mae_in_percent():
    mse, mae = mse_mae([0.1, 0.5], [0.0, 0.7])
    assert mse == pytest.approx(100 * (0.01 + 0.04) / 2)
    assert mae == pytest.approx(100 * 0.15)
    with pytest.raises(ValueError):
        mse_mae([0.1], [0.1, 0.2])
    with pytest.raises(ValueError):
        mse_mae([], [])


def test_dcg_hand_values():
    assert dcg_at(3, [3, 2, 1]) == pytest.approx(3 + 2 / math.log2(3) + 0.5)
    assert dcg_at(5, [1.0]) == 1.0


def test_perfect_and_reversed_ranking():
    truth = [5, 4, 3, 2, 1]
    assert ndcg_at(3, [0.9, 0.8, 0.7, 0.6, 0.5], truth) == pytest.approx(1.0)
    reversed_score = ndcg_at(3, [0.1, 0.2, 0.3, 0.4, 0.5], truth)
    ideal = 5 + 4 / math.log2(3) + 3 / 2
    assert reversed_score == pytest.approx((1 + 2 / math.log2(3) + 3 / 2) / ideal)


def test_ties_keep_original_order():
    # both items tie; the first listed one is ranked first
    assert ndcg_at(1, [0.5, 0.5], [1, 3]) == pytest.approx(1 / 3)
    assert ndcg_at(1, [0.5, 0.5], [3, 1]) == pytest.approx(1.0)


def test_all_zero_relevance_scores_one():
    assert ndcg_at(3, [0.2, 0.1], [0, 0]) == 1.0


def test_ndcg_argument_checks():
    with pytest.raises(ValueError):
        ndcg_at(0, [1], [1])
    with pytest.raises(ValueError):
        ndcg_at(3, [1, 2], [1])
    with pytest.raises(ValueError):
        ndcg_at(3, [1], [-1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 5)), min_size=1, max_size=15), st.integers(1, 8))
def test_ndcg_is_bounded(pairs, k):
    preds, truths = zip(*pairs)
    assert 0.0 <= ndcg_at(k, preds, truths) <= 1.0 + 1e-12


def test_k_beyond_list_length_uses_whole_list():
    assert ndcg_at(10, [0.3, 0.1], [1, 2]) == pytest.approx(ndcg_at(2, [0.3, 0.1], [1, 2]))


def test_report_validation_and_formatting():
    with pytest.raises(ValueError):
        MetricsReport(1.0, 1.0, 101.0, 50.0, 3)
    with pytest.raises(ValueError):
        MetricsReport(1.0, 1.0, 50.0, 50.0, 0)
    r = MetricsReport(1.234, 5.0, 80.0, 70.0, 4, sd={"MSE": 0.1, "MAE": 0.2, "nDCG3": 1.0, "nDCG5": 2.0})
    assert r.formatted()["MSE"] == "1.23_(0.10)"
    assert MetricsReport(1.0, 2.0, 3.0, 4.0, 1).formatted()["nDCG5"] == "4.00"


def test_aggregate_mean_and_sample_sd():
    a = MetricsReport(1.0, 2.0, 50.0, 60.0, 3)
    b = MetricsReport(3.0, 4.0, 70.0, 80.0, 3)
    agg = aggregate([a, b])
    assert agg.mse == 2.0 and agg.sd["MSE"] == pytest.approx(math.sqrt(2.0))
    assert aggregate([a]).sd["nDCG3"] == 0.0
    with pytest.raises(ValueError):
        aggregate([])


def test_evaluate_predictor_with_oracle_and_baseline():
    tasks = [task(1, [1, 2, 5, 3, 1]), task(2, [4, 4, 2, 5])]
    oracle = evaluate_predictor(lambda t: SCHEMA.normalize(t.query_arrays.rating), tasks, SCHEMA)
    assert oracle.mse == 0.0 and oracle.ndcg3 == pytest.approx(100.0)
    base = evaluate_predictor(mean_rating_baseline(tasks, SCHEMA), tasks, SCHEMA, ks=(1,))
    assert base.mse > 0 and base.ndcg(1) > 0


def test_evaluate_model_is_order_independent():
    tasks = [task(u, [1 + (u * i) % 5 for i in range(7)], n_support=3) for u in range(1, 6)]
    model = ColdStartModel(SCHEMA, ModelConfig(emb_dim=3, hidden=(4, 1), r_dim=4), ModulationAssignment.film(2))
    a = evaluate(model, tasks, ks=(3, 5, 10))
    b = evaluate(model, tasks[::-1], structure=ModulationAssignment.film(2), ks=(3, 5, 10))
    assert a == b and a.n_tasks == 5 and 10 in a.extra_ndcg
    with pytest.raises(ValueError):
        evaluate(model, tasks, structure=ModulationAssignment.full(2))
    with pytest.raises(ValueError):
        evaluate(model, [])


def test_mse_uses_normalized_scale():
    tasks = [task(1, [1, 5, 5, 1])]
    report = evaluate_predictor(lambda t: np.zeros(2), tasks, SCHEMA)
    assert report.mse == pytest.approx(50.0)
