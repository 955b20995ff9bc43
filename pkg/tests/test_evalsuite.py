"""
Tests for the evaluation protocol: splits, tuning, AUC, detection and rank differences
"""

import math
import sys
import os

import numpy as np
import pandas as pd
import pytest
from scipy import stats
from sklearn.metrics import roc_auc_score

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import DataValidationError
from evalsuite import (auc, descending_ranks, design_cv_scores, design_kfold_tune, detection_comparison,
                       detection_curve, fold_designs, grid_cv_scores, kfold_tune, mean_ci, paired_t_test,
                       percentile_report, positive_segment_test, rank_difference_accumulation, repeated_trials,
                       stratified_split)
from features import PRODUCT_AGGREGATE, product_edge_aggregate
from gbm import GbmModel, Hyperparams, fit
from graph_core import extract_local_chain
from utils import dumps_json


def _brute_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def _constant_fitter(X, y, hp, seed, feature_names=None):
    names = feature_names or [f"f{j}" for j in range(np.asarray(X).shape[1])]
    return GbmModel(base_score=0.0, learning_rate=hp.learning_rate, feature_names=tuple(names))


class TestAuc:
    """Test cases for the Mann-Whitney AUC"""

    def test_perfect_and_tied(self):
        labels = [0, 1, 0, 1, 1]
        assert auc(labels, labels) == 1.0
        assert auc([0.3] * 5, labels) == 0.5

    def test_matches_pair_count(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            n = int(rng.integers(2, 301))
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
            assert abs(auc(scores, labels) - _brute_auc(scores, labels)) <= 1e-12

    def test_agrees_with_sklearn(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 2, 200)
        scores = np.round(rng.normal(size=200), 1)
        assert auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)

    def test_single_class(self):
        with pytest.raises(DataValidationError, match="single class"):
            auc([0.1, 0.2], [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(DataValidationError):
            auc([0.1, 0.2, 0.3], [1, 0])


class TestStratifiedSplit:
    """Test cases for stratified_split"""

    def setup_method(self):
        self.ids = [f"E{i:03d}" for i in range(100)]
        self.strata = {eid: ("Retail" if i < 60 else "OilGas", int(i % 10 == 0)) for i, eid in enumerate(self.ids)}

    def test_proportions_per_stratum(self):
        plan = stratified_split(self.ids, self.strata, 0.7, seed=3)
        for key in set(self.strata.values()):
            members = [eid for eid in self.ids if self.strata[eid] == key]
            in_train = sum(1 for eid in members if eid in set(plan.train_ids))
            assert abs(in_train - 0.7 * len(members)) <= 1

    def test_partition(self):
        plan = stratified_split(self.ids, self.strata, 0.7, seed=3)
        assert set(plan.train_ids) | set(plan.test_ids) == set(self.ids)
        assert not set(plan.train_ids) & set(plan.test_ids)

    def test_seeded(self):
        a = stratified_split(self.ids, self.strata, 0.7, seed=3)
        b = stratified_split(self.ids, self.strata, 0.7, seed=3)
        c = stratified_split(self.ids, self.strata, 0.7, seed=4)
        assert a.train_ids == b.train_ids
        assert a.train_ids != c.train_ids

    def test_tiny_stratum_goes_to_train(self):
        plan = stratified_split(["a", "b"], {"a": "x", "b": "y"}, 0.3, seed=0)
        assert plan.train_ids == ("a", "b")
        assert plan.test_ids == ()

    def test_invalid_fraction(self):
        with pytest.raises(DataValidationError):
            stratified_split(self.ids, self.strata, 1.0)

    def test_missing_stratum(self):
        with pytest.raises(DataValidationError, match="no stratum"):
            stratified_split(self.ids + ["X"], self.strata)


class TestTuning:
    """Test cases for k-fold grid search"""

    def setup_method(self):
        rng = np.random.default_rng(21)
        self.X = rng.normal(size=(150, 3))
        self.y = (self.X[:, 0] + 0.5 * rng.normal(size=150) > 0.3).astype(int)

    def test_single_point_returned_without_search(self):
        grid = [Hyperparams(n_estimators=5)]

        def failing_fitter(*args, **kwargs):
            raise AssertionError("no fit expected")

        assert kfold_tune(self.X, self.y, grid, fitter=failing_fitter) is grid[0]

    def test_two_point_grid_matches_exhaustive_search(self):
        grid = [Hyperparams(learning_rate=0.1, n_estimators=10, max_depth=1, min_samples_leaf=5),
                Hyperparams(learning_rate=0.3, n_estimators=30, max_depth=3, min_samples_leaf=5)]
        chosen = kfold_tune(self.X, self.y, grid, k=5, seed=2)
        scores = [grid_cv_scores(self.X, self.y, [hp], k=5, seed=2)[0] for hp in grid]
        assert chosen == grid[int(np.argmax(scores))]

    def test_constant_scorer_loses(self):
        grid = [Hyperparams(n_estimators=0, min_samples_leaf=5),
                Hyperparams(learning_rate=0.3, n_estimators=20, max_depth=2, min_samples_leaf=5)]
        assert kfold_tune(self.X, self.y, grid, k=5, seed=0) == grid[1]

    def test_ties_keep_earliest(self):
        grid = [Hyperparams(learning_rate=lr) for lr in (0.05, 0.1, 0.3)]
        scores = grid_cv_scores(self.X, self.y, grid, k=3, fitter=_constant_fitter)
        assert scores == [0.5, 0.5, 0.5]
        assert kfold_tune(self.X, self.y, grid, k=3, fitter=_constant_fitter) == grid[0]

    def test_parallel_matches_serial(self):
        grid = [Hyperparams(n_estimators=5, min_samples_leaf=5), Hyperparams(n_estimators=5, max_depth=1,
                                                                             min_samples_leaf=5)]
        assert grid_cv_scores(self.X, self.y, grid, k=3, n_jobs=2) == grid_cv_scores(self.X, self.y, grid, k=3)

    def test_empty_grid(self):
        with pytest.raises(DataValidationError, match="empty"):
            kfold_tune(self.X, self.y, [])


class TestDetectionCurve:
    """Test cases for detection-rate curves"""

    def test_worked_example(self):
        curve = detection_curve([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0])
        assert curve == [(0.25, 0.5), (0.5, 0.5), (0.75, 1.0), (1.0, 1.0)]

    def test_ties_follow_id_order(self):
        curve = detection_curve([0.5, 0.5], [1, 0], ids=["b", "a"])
        assert curve[0] == (0.5, 0.0)

    def test_perfect_scorer(self):
        labels = np.zeros(100, dtype=int)
        labels[:10] = 1
        curve = detection_curve(labels.astype(float), labels)
        assert curve[9] == (0.1, 1.0)

    def test_monotone_and_complete(self):
        rng = np.random.default_rng(8)
        labels = rng.integers(0, 2, 300)
        curve = detection_curve(rng.normal(size=300), labels)
        recalls = [r for _, r in curve]
        assert all(a <= b for a, b in zip(recalls, recalls[1:]))
        assert recalls[-1] == 1.0

    def test_comparison_table(self):
        curves = {1: detection_curve([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]),
                  3: detection_curve([0.9, 0.8, 0.7, 0.1], [0, 1, 1, 0])}
        table = detection_comparison(curves, fractions=(0.25, 0.5))
        assert list(table.columns) == ["top_fraction", "random", "tier_1", "tier_3"]
        assert table["tier_1"].tolist() == [0.5, 0.5]
        assert table["tier_3"].tolist() == [0.0, 0.5]


class TestRankDifference:
    """Test cases for inter-model rank differences"""

    def test_worked_example(self):
        rd = rank_difference_accumulation([4, 3, 2, 1], [1, 2, 3, 4], [1, 0, 0, 1], ids=["a", "b", "c", "d"])
        assert rd.ordering == ("a", "b", "c", "d")
        assert rd.diffs == (3, 1, -1, -3)
        assert rd.observed == (1.0, 1.0, 1.0, 2.0)
        assert rd.expected == (0.5, 1.0, 1.5, 2.0)
        assert rd.positive_count == 2

    def test_identical_scores(self):
        rd = rank_difference_accumulation([3, 2, 1], [3, 2, 1], [0, 1, 0], ids=["z", "y", "x"])
        assert rd.diffs == (0, 0, 0)
        assert rd.ordering == ("x", "y", "z")

    def test_antisymmetric(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=50), rng.normal(size=50)
        ids = [f"E{i:02d}" for i in range(50)]
        labels = rng.integers(0, 2, 50)
        forward = rank_difference_accumulation(a, b, labels, ids)
        backward = rank_difference_accumulation(b, a, labels, ids)
        assert dict(zip(forward.ordering, forward.diffs)) == {k: -v for k, v in zip(backward.ordering, backward.diffs)}

    def test_terminal_value_is_total_breaches(self):
        rng = np.random.default_rng(9)
        labels = rng.integers(0, 2, 40)
        rd = rank_difference_accumulation(rng.normal(size=40), rng.normal(size=40), labels)
        assert rd.observed[-1] == labels.sum()
        assert rd.expected[-1] == pytest.approx(labels.sum())

    def test_labels_against_anti_labels(self):
        labels = np.array([1, 0, 1, 0, 0, 0])
        rd = rank_difference_accumulation(labels, -labels, labels)
        assert rd.labels[:2] == (1, 1)

    def test_descending_ranks(self):
        assert descending_ranks([0.2, 0.9, 0.2], ids=["b", "c", "a"]).tolist() == [3, 1, 2]

    def test_length_mismatch(self):
        with pytest.raises(DataValidationError):
            rank_difference_accumulation([1, 2], [1, 2, 3], [0, 1])

    def test_frame(self):
        frame = rank_difference_accumulation([4, 3, 2, 1], [1, 2, 3, 4], [1, 0, 0, 1]).to_frame()
        assert list(frame.columns) == ["position", "entity_id", "rank_diff", "label", "cumulative_breaches",
                                       "expected_breaches"]
        assert frame["position"].tolist() == [1, 2, 3, 4]


class TestPairedTTest:
    """Test cases for the paired t-test"""

    def test_matches_scipy(self):
        rng = np.random.default_rng(13)
        observed = rng.normal(1.0, 1.0, 10)
        expected = rng.normal(0.0, 1.0, 10)
        t_stat, p_value = paired_t_test(observed, expected)
        reference = stats.ttest_rel(observed, expected)
        assert t_stat == pytest.approx(reference.statistic, rel=1e-10)
        assert p_value == pytest.approx(reference.pvalue, rel=1e-8)

    def test_table_value(self):
        # two-sided 5% critical value with 9 degrees of freedom is 2.262
        diffs = np.array([-1, 1] * 5, dtype=float)
        sd = np.std(diffs, ddof=1)
        shift = 2.262 * sd / math.sqrt(10)
        _, p_value = paired_t_test(diffs + shift, np.zeros(10))
        assert round(p_value, 3) == 0.05

    def test_strong_shift(self):
        rng = np.random.default_rng(1)
        _, p_value = paired_t_test(1.0 + 1e-3 * rng.normal(size=20), np.zeros(20))
        assert p_value < 1e-12

    def test_zero_variance(self):
        with pytest.raises(DataValidationError, match="zero variance"):
            paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])

    def test_too_few_pairs(self):
        with pytest.raises(DataValidationError):
            paired_t_test([1.0], [0.0])

    def test_positive_segment(self):
        rd = rank_difference_accumulation([4, 3, 2, 1], [1, 2, 3, 4], [1, 0, 0, 1])
        # observed (1, 1) against expected (0.5, 1.0)
        t_stat, _ = positive_segment_test(rd)
        assert t_stat == pytest.approx(1.0)
        rd = rank_difference_accumulation([2, 1], [1, 2], [1, 0])
        assert positive_segment_test(rd) is None


class TestPercentileReport:
    """Test cases for the top-k percentile report"""

    def setup_method(self):
        self.rd = rank_difference_accumulation([4, 3, 2, 1], [1, 2, 3, 4], [1, 0, 0, 1], ids=["a", "b", "c", "d"])
        self.frame = pd.DataFrame({"employee_count": [10.0, 20.0, 30.0, 40.0], "flat": [5.0] * 4},
                                  index=["a", "b", "c", "d"])

    def test_positive_direction(self):
        table = percentile_report(self.rd, self.frame, ["employee_count"], top_k=1, diff_direction="positive")
        assert table["entity_id"].tolist() == ["a", "population_mean"]
        assert table.loc[0, "employee_count_percentile"] == 12.5
        assert table.loc[1, "employee_count"] == 25.0
        assert math.isnan(table.loc[1, "employee_count_percentile"])

    def test_negative_direction(self):
        table = percentile_report(self.rd, self.frame, ["employee_count"], top_k=2, diff_direction="negative")
        assert table["entity_id"].tolist() == ["d", "c", "population_mean"]
        assert table.loc[0, "employee_count_percentile"] == 87.5

    def test_constant_feature_uses_mean_rank(self):
        table = percentile_report(self.rd, self.frame, ["flat"], top_k=4)
        assert table["flat_percentile"].tolist()[:4] == [50.0] * 4

    def test_errors(self):
        with pytest.raises(DataValidationError, match="exceeds"):
            percentile_report(self.rd, self.frame, ["flat"], top_k=5)
        with pytest.raises(DataValidationError, match="diff_direction"):
            percentile_report(self.rd, self.frame, ["flat"], top_k=1, diff_direction="up")
        with pytest.raises(DataValidationError, match="unknown report features"):
            percentile_report(self.rd, self.frame, ["rating_spf"], top_k=1)


class TestMeanCi:
    """Test cases for the normal-approximation interval"""

    def test_values(self):
        summary = mean_ci([0.6, 0.7, 0.8])
        half = 1.96 * 0.1 / math.sqrt(3)
        assert summary["mean"] == pytest.approx(0.7)
        assert summary["sd"] == pytest.approx(0.1)
        assert summary["ci_low"] == pytest.approx(0.7 - half)
        assert summary["ci_high"] == pytest.approx(0.7 + half)

    def test_constant_values(self):
        summary = mean_ci([0.5, 0.5])
        assert summary["ci_low"] == summary["ci_high"] == 0.5


class TestRepeatedTrials:
    """Test cases for the repeated-trial protocol on a small synthetic dataset"""

    GRID = [Hyperparams(learning_rate=0.1, n_estimators=20, max_depth=2, min_samples_leaf=5)]

    def test_report_structure(self, small_dataset):
        report = repeated_trials(small_dataset, n_trials=2, base_seed=3, grid=self.GRID, k=3)
        assert report.tiers == (1, 2, 3)
        assert [t.seed for t in report.trials] == [3, 4]
        assert set(report.gaps) == {"3-2", "3-1", "2-1"}
        assert set(report.rank_differences) == {"3_vs_1", "3_vs_2"}
        for tier in report.tiers:
            assert 0.0 <= report.summary[tier]["mean"] <= 1.0
            assert report.detection[tier][-1][1] == 1.0
        for rd in report.rank_differences.values():
            assert rd.observed[-1] == sum(report.trials[0].test_labels)
        data = report.to_dict()
        assert data["auc"]["3"]["trials"] == report.trial_aucs(3)
        frame = report.detection_frame()
        assert len(frame) == len(report.trials[0].test_ids)

    def test_deterministic_serialization(self, small_dataset):
        first = repeated_trials(small_dataset, n_trials=2, base_seed=0, grid=self.GRID, k=3)
        second = repeated_trials(small_dataset, n_trials=2, base_seed=0, grid=self.GRID, k=3, n_jobs=2)
        assert dumps_json(first.to_dict()) == dumps_json(second.to_dict())

    def test_constant_model_gives_chance_auc(self, small_dataset):
        report = repeated_trials(small_dataset, tiers=(1,), n_trials=3, grid=self.GRID, k=3,
                                 fitter=_constant_fitter, rank_pairs=())
        assert report.trial_aucs(1) == [0.5, 0.5, 0.5]
        assert report.summary[1]["ci_low"] == report.summary[1]["ci_high"] == 0.5

    def test_reuse_first_trial_settings(self, small_dataset):
        grid = self.GRID + [Hyperparams(learning_rate=0.3, n_estimators=10, max_depth=1, min_samples_leaf=5)]
        report = repeated_trials(small_dataset, tiers=(2,), n_trials=2, grid=grid, k=3, retune=False,
                                 rank_pairs=())
        assert report.trials[0].hyperparams[2] == report.trials[1].hyperparams[2]

    def test_needs_two_trials(self, small_dataset):
        with pytest.raises(DataValidationError, match="at least two trials"):
            repeated_trials(small_dataset, n_trials=1, grid=self.GRID)


class TestFoldDesigns:
    """Tuning folds get product risk and imputation from their own training part"""

    def setup_method(self):
        self.k = 3

    def _split(self, dataset):
        return stratified_split(dataset.entity_ids, dataset.strata(), 0.7, 0)

    def test_folds_partition_the_training_split(self, small_dataset):
        train_ids = list(self._split(small_dataset).train_ids)
        designs = fold_designs(small_dataset, train_ids, k=self.k, seed=0)
        assert len(designs) == self.k
        valid = np.sort(np.concatenate([d.valid_idx for d in designs]))
        assert valid.tolist() == list(range(len(train_ids)))
        for d in designs:
            assert not set(d.train_idx.tolist()) & set(d.valid_idx.tolist())
            assert list(d.frame.index) == train_ids
            assert not d.frame.isna().any().any()

    def test_validation_rows_do_not_shape_their_features(self, small_dataset):
        train_ids = list(self._split(small_dataset).train_ids)
        catalog = small_dataset.catalog
        for d in fold_designs(small_dataset, train_ids, k=self.k, seed=0):
            fold_train = [train_ids[i] for i in d.train_idx]
            table = small_dataset.product_table(fold_train)
            for i in d.valid_idx[:20]:
                eid = train_ids[i]
                local = extract_local_chain(small_dataset.graph, eid)
                assert d.frame.loc[eid, PRODUCT_AGGREGATE] == product_edge_aggregate(local, table)
            for name in catalog.imputable_names():
                observed = small_dataset.raw.loc[fold_train, name].dropna()
                fill = observed.mean() if len(observed) else catalog.fallback_value(name)
                missing = [train_ids[i] for i in d.valid_idx if np.isnan(small_dataset.raw.loc[train_ids[i], name])]
                for eid in missing:
                    assert d.frame.loc[eid, name] == pytest.approx(fill, rel=1e-12)

    def test_constant_scorer_ties_keep_earliest(self, small_dataset):
        train_ids = list(self._split(small_dataset).train_ids)
        designs = fold_designs(small_dataset, train_ids, k=self.k, seed=0)
        y = small_dataset.labels.loc[train_ids].to_numpy(dtype=int)
        columns = small_dataset.tier_columns(2)
        grid = [Hyperparams(learning_rate=lr) for lr in (0.05, 0.1)]
        assert design_cv_scores(designs, y, columns, grid, fitter=_constant_fitter) == [0.5, 0.5]
        assert design_kfold_tune(designs, y, columns, grid, fitter=_constant_fitter) == grid[0]

    def test_single_point_needs_no_folds(self):
        grid = [Hyperparams(n_estimators=5)]
        assert design_kfold_tune([], np.zeros(0), [], grid) is grid[0]
        with pytest.raises(DataValidationError, match="empty"):
            design_kfold_tune([], np.zeros(0), [], [])

    def test_too_few_folds(self, small_dataset):
        with pytest.raises(DataValidationError, match="k >= 2"):
            fold_designs(small_dataset, small_dataset.entity_ids, k=1)

    def test_retuning_trials_pick_from_grid(self, small_dataset):
        grid = [Hyperparams(learning_rate=0.1, n_estimators=10, max_depth=1, min_samples_leaf=5),
                Hyperparams(learning_rate=0.3, n_estimators=10, max_depth=2, min_samples_leaf=5)]
        report = repeated_trials(small_dataset, tiers=(3,), n_trials=2, grid=grid, k=self.k, rank_pairs=())
        for trial in report.trials:
            assert Hyperparams(**trial.hyperparams[3]) in grid
