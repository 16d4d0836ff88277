"""Error metrics against closed forms, ranking metrics against a brute-force
sort oracle, tie handling, and candidate exclusion."""

import math
import time

import numpy as np
import pytest

from cfsearch.data import InteractionDataset
from cfsearch.errors import ConfigError, InternalError
from cfsearch.metrics import (
    error_metrics,
    higher_is_better,
    is_improvement,
    mae,
    ndcg_at_k,
    ranking_metrics,
    recall_at_k,
    rmse,
    worst_value,
)
from helpers import ScoreStub, make_random_rank_instance, oracle_ranking_metrics


class TestErrorMetrics:
    def test_rmse_and_mae_closed_form(self):
        preds = np.array([1.0, 2.0, 3.0])
        targets = np.array([2.0, 2.0, 1.0])
        assert rmse(preds, targets) == pytest.approx(math.sqrt((1 + 0 + 4) / 3), abs=1e-15)
        assert mae(preds, targets) == pytest.approx(1.0, abs=1e-15)

    def test_perfect_predictions(self):
        x = np.array([0.5, -2.0])
        assert rmse(x, x) == 0.0
        assert mae(x, x) == 0.0

    def test_empty_or_mismatched_inputs_raise(self):
        with pytest.raises(InternalError):
            rmse(np.zeros(0), np.zeros(0))
        with pytest.raises(InternalError):
            mae(np.zeros(3), np.zeros(4))


class TestOrientation:
    def test_known_metrics(self):
        assert not higher_is_better("rmse")
        assert not higher_is_better("mae")
        assert higher_is_better("recall@20")
        assert higher_is_better("ndcg@10")

    def test_unknown_metric(self):
        with pytest.raises(ConfigError):
            higher_is_better("auc")

    def test_worst_value_orientation(self):
        assert worst_value("rmse") == math.inf
        assert worst_value("recall@20") == -math.inf

    def test_is_improvement(self):
        assert is_improvement(0.5, None, "rmse")
        assert is_improvement(0.4, 0.5, "rmse")
        assert not is_improvement(0.6, 0.5, "rmse")
        assert is_improvement(0.6, 0.5, "recall@20")
        assert not is_improvement(0.4, 0.5, "recall@20")
        assert not is_improvement(0.5, 0.5, "recall@20")


class TestRankingHandComputed:
    def test_single_user_known_ranks(self):
        # User 0 trained on item 0; candidates are {1, 2, 3}. Scores rank
        # them 3, 1, 2, so target 1 sits at rank 2.
        ds = InteractionDataset.from_pairs(1, 4, train=[(0, 0)], test=[(0, 1)])
        stub = ScoreStub([[9.0, 2.0, 1.0, 3.0]])
        got = ranking_metrics(stub, ds, k=2, split="test")
        assert got["recall@2"] == 1.0
        assert got["ndcg@2"] == pytest.approx(1.0 / math.log2(3.0), abs=1e-15)
        assert recall_at_k(stub, ds, k=1, split="test") == 0.0

    def test_ties_break_by_ascending_item_index(self):
        # All scores equal: rank of target j among candidates {0..3} is the
        # count of candidates with smaller index, plus one.
        ds = InteractionDataset.from_pairs(1, 4, train=[], test=[(0, 2)])
        stub = ScoreStub([[1.0, 1.0, 1.0, 1.0]])
        got = ranking_metrics(stub, ds, k=2, split="test")
        assert got["recall@2"] == 0.0  # rank 3
        assert ndcg_at_k(stub, ds, k=3, split="test") == pytest.approx(1.0 / 2.0, abs=1e-15)

    def test_train_items_are_not_candidates(self):
        # Item 3 scores highest but is a training item, so target 1 wins.
        ds = InteractionDataset.from_pairs(1, 4, train=[(0, 3)], test=[(0, 1)])
        stub = ScoreStub([[0.0, 5.0, 1.0, 9.0]])
        assert recall_at_k(stub, ds, k=1, split="test") == 1.0

    def test_validation_items_are_dropped_only_for_test(self):
        ds = InteractionDataset.from_pairs(
            1, 4, train=[(0, 0)], validation=[(0, 3)], test=[(0, 1)]
        )
        stub = ScoreStub([[0.0, 2.0, 1.0, 9.0]])
        # Test split: validation item 3 is excluded, target 1 is best.
        assert recall_at_k(stub, ds, k=1, split="test") == 1.0
        # Validation split: item 3 is its own target and must stay in.
        assert recall_at_k(stub, ds, k=1, split="validation") == 1.0

    def test_empty_split_raises(self):
        ds = InteractionDataset.from_pairs(1, 3, train=[(0, 0)])
        with pytest.raises(InternalError):
            ranking_metrics(ScoreStub([[1, 2, 3]]), ds, k=2, split="test")

    def test_bad_k(self):
        ds = InteractionDataset.from_pairs(1, 3, train=[(0, 0)], test=[(0, 1)])
        with pytest.raises(ConfigError):
            ranking_metrics(ScoreStub([[1, 2, 3]]), ds, k=0, split="test")


class TestRankingAgainstOracle:
    def test_fifty_random_instances_match_exactly(self):
        start = time.perf_counter()
        for seed in range(50):
            ds, matrix = make_random_rank_instance(seed)
            stub = ScoreStub(matrix)
            for split in ("validation", "test"):
                got = ranking_metrics(stub, ds, k=20, split=split)
                want = oracle_ranking_metrics(matrix, ds, k=20, split=split)
                assert got["recall@20"] == want["recall@20"], (seed, split)
                assert got["ndcg@20"] == want["ndcg@20"], (seed, split)
        assert time.perf_counter() - start < 30.0

    def test_small_k_against_oracle(self):
        for seed in (101, 202):
            ds, matrix = make_random_rank_instance(seed)
            stub = ScoreStub(matrix)
            got = ranking_metrics(stub, ds, k=3, split="test")
            want = oracle_ranking_metrics(matrix, ds, k=3, split="test")
            assert got == want


class TestErrorMetricsOnModel:
    def test_error_metrics_use_pair_scores(self, tiny_ds):
        class PairStub:
            def forward_pairs(self, users, items, dataset, exclude_target=True):
                return users.astype(float) + items.astype(float), None

        got = error_metrics(PairStub(), tiny_ds, split="validation")
        # validation pairs: (0,2) value 4 -> pred 2; (2,1) value 2 -> pred 3.
        assert got["rmse"] == pytest.approx(math.sqrt((4 + 1) / 2), abs=1e-12)
        assert got["mae"] == pytest.approx(1.5, abs=1e-12)
