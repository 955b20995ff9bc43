"""
Experimental protocol for the three risk model tiers.

Stratified train/test splits, k-fold hyperparameter tuning, repeated-trial
AUC with confidence intervals, detection-rate curves and the inter-model
rank-difference analyses.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats
from sklearn.model_selection import StratifiedKFold
from tqdm import tqdm

from errors import DataValidationError
from features import ModelingDataset
from gbm import GbmModel, Hyperparams, fit
from utils import progress_enabled

logger = logging.getLogger(__name__)

MODULE = "evalsuite"

Z_95 = 1.96
DETECTION_FRACTIONS = (0.01, 0.05, 0.10, 0.20)

Fitter = Callable[..., GbmModel]


def default_grid(min_samples_leaf: int = 20) -> List[Hyperparams]:
    return [
        Hyperparams(learning_rate=lr, n_estimators=n, max_depth=d, l1_reg=l1, min_samples_leaf=min_samples_leaf)
        for lr, n, d, l1 in itertools.product((0.05, 0.1, 0.3), (100, 300), (3, 5), (0.0, 1.0, 10.0))
    ]


@dataclass(frozen=True)
class SplitPlan:
    train_ids: Tuple[str, ...]
    test_ids: Tuple[str, ...]
    strata: Mapping[str, Hashable]
    seed: int


def stratified_split(ids: Sequence[str], strata: Mapping[str, Hashable], frac: float = 0.7,
                     seed: int = 0) -> SplitPlan:
    """Sample round(frac * n) training ids without replacement inside every stratum.

    A stratum too small to give the training side a member goes to train
    entirely.
    """
    if not 0.0 < frac < 1.0:
        raise DataValidationError(f"train fraction must lie in (0, 1), got {frac}", MODULE)
    groups: Dict[Hashable, List[str]] = {}
    for entity_id in sorted(ids):
        if entity_id not in strata:
            raise DataValidationError(f"no stratum for {entity_id!r}", MODULE)
        groups.setdefault(strata[entity_id], []).append(entity_id)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for key in sorted(groups, key=repr):
        members = groups[key]
        n_train = int(math.floor(frac * len(members) + 0.5))
        if n_train == 0:
            train.extend(members)
            continue
        picked = rng.permutation(len(members))
        train.extend(members[i] for i in picked[:n_train])
        test.extend(members[i] for i in picked[n_train:])
    return SplitPlan(tuple(sorted(train)), tuple(sorted(test)), dict(strata), seed)


def _check_binary(labels: np.ndarray) -> Tuple[int, int]:
    if not np.all((labels == 0) | (labels == 1)):
        raise DataValidationError("labels must be 0 or 1", MODULE)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataValidationError("labels contain a single class", MODULE)
    return n_pos, n_neg


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half"""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DataValidationError("scores and labels differ in length", MODULE)
    n_pos, n_neg = _check_binary(labels)
    ranks = stats.rankdata(scores, method="average")
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _folds(y: np.ndarray, groups: np.ndarray, k: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    for attempt in range(2):
        splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed + attempt)
        try:
            folds = list(splitter.split(np.zeros(len(y)), groups))
        except ValueError as exc:
            raise DataValidationError(f"cannot build {k} stratified folds: {exc}", MODULE)
        if all(0 < y[tr].sum() < len(tr) and 0 < y[va].sum() < len(va) for tr, va in folds):
            return folds
        logger.warning(f"fold with a single class at seed {seed + attempt}, reshuffling")
    raise DataValidationError(f"every {k}-fold assignment left a fold with a single class", MODULE)


def _fold_auc(fitter: Fitter, X, y, train_idx, valid_idx, hp: Hyperparams, seed: int) -> float:
    model = fitter(X[train_idx], y[train_idx], hp, seed)
    return auc(model.margins(X[valid_idx]), y[valid_idx])


def grid_cv_scores(X, y, grid: Sequence[Hyperparams], k: int = 5, seed: int = 0,
                   groups: Optional[Sequence[Hashable]] = None, fitter: Fitter = fit,
                   n_jobs: int = 1) -> List[float]:
    """Mean validation AUC of every grid point over the same k stratified folds"""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if k < 2:
        raise DataValidationError(f"need k >= 2 folds, got {k}", MODULE)
    _check_binary(y)
    groups = y if groups is None else np.asarray([repr(g) for g in groups])
    folds = _folds(y, groups, k, seed)
    jobs = [(hp, fold) for hp in grid for fold in folds]
    fold_aucs = Parallel(n_jobs=n_jobs)(
        delayed(_fold_auc)(fitter, X, y, tr, va, hp, seed) for hp, (tr, va) in jobs)
    means = [float(np.mean(fold_aucs[i * k:(i + 1) * k])) for i in range(len(grid))]
    for hp, score in zip(grid, means):
        logger.debug(f"cv auc {score:.4f} for {hp}")
    return means


def kfold_tune(X, y, grid: Sequence[Hyperparams], k: int = 5, seed: int = 0,
               groups: Optional[Sequence[Hashable]] = None, fitter: Fitter = fit, n_jobs: int = 1) -> Hyperparams:
    """Grid point with the highest mean validation AUC; earlier grid points win ties"""
    if not grid:
        raise DataValidationError("empty hyperparameter grid", MODULE)
    if len(grid) == 1:
        return grid[0]
    scores = grid_cv_scores(X, y, grid, k, seed, groups, fitter, n_jobs)
    return _pick_best(grid, scores)


def _pick_best(grid: Sequence[Hyperparams], scores: Sequence[float]) -> Hyperparams:
    best = 0
    for i, score in enumerate(scores):
        if score > scores[best]:
            best = i
    logger.info(f"Tuned over {len(grid)} grid points: best cv auc {scores[best]:.4f} with {grid[best]}")
    return grid[best]


@dataclass(frozen=True)
class FoldDesign:
    """One validation fold of a training split with its own design matrix"""

    train_idx: np.ndarray
    valid_idx: np.ndarray
    frame: pd.DataFrame


def fold_designs(dataset: ModelingDataset, train_ids: Sequence[str], k: int = 5,
                 seed: int = 0) -> List[FoldDesign]:
    """Stratified folds over train_ids, each with product risk and imputation from its training part only"""
    if k < 2:
        raise DataValidationError(f"need k >= 2 folds, got {k}", MODULE)
    train_ids = list(train_ids)
    y = dataset.labels.loc[train_ids].to_numpy(dtype=int)
    _check_binary(y)
    strata = dataset.strata()
    groups = np.asarray([repr(strata[eid]) for eid in train_ids])
    designs = []
    for train_idx, valid_idx in _folds(y, groups, k, seed):
        frame, _ = dataset.design([train_ids[i] for i in train_idx])
        designs.append(FoldDesign(train_idx, valid_idx, frame.loc[train_ids]))
    return designs


def design_cv_scores(designs: Sequence[FoldDesign], y, columns: Sequence[str], grid: Sequence[Hyperparams],
                     seed: int = 0, fitter: Fitter = fit, n_jobs: int = 1) -> List[float]:
    """Mean validation AUC of every grid point, each fold scored on its own design"""
    y = np.asarray(y, dtype=int)
    matrices = [d.frame[list(columns)].to_numpy(dtype=float) for d in designs]
    k = len(designs)
    fold_aucs = Parallel(n_jobs=n_jobs)(
        delayed(_fold_auc)(fitter, X, y, d.train_idx, d.valid_idx, hp, seed)
        for hp in grid for d, X in zip(designs, matrices))
    return [float(np.mean(fold_aucs[i * k:(i + 1) * k])) for i in range(len(grid))]


def design_kfold_tune(designs: Sequence[FoldDesign], y, columns: Sequence[str], grid: Sequence[Hyperparams],
                      seed: int = 0, fitter: Fitter = fit, n_jobs: int = 1) -> Hyperparams:
    if not grid:
        raise DataValidationError("empty hyperparameter grid", MODULE)
    if len(grid) == 1:
        return grid[0]
    return _pick_best(grid, design_cv_scores(designs, y, columns, grid, seed, fitter, n_jobs))


def detection_curve(scores: Sequence[float], labels: Sequence[int],
                    ids: Optional[Sequence[str]] = None) -> List[Tuple[float, float]]:
    """Recall among the top-k entities for every k, ranked by descending score"""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos, _ = _check_binary(labels)
    order = _risk_order(scores, ids)
    n = scores.size
    hits = np.cumsum(labels[order])
    return [((k + 1) / n, float(hits[k]) / n_pos) for k in range(n)]


def _tie_keys(n: int, ids: Optional[Sequence[str]]) -> np.ndarray:
    if ids is None:
        return np.arange(n)
    if len(ids) != n:
        raise DataValidationError("ids and scores differ in length", MODULE)
    keys = np.empty(n, dtype=int)
    keys[np.argsort(np.asarray(ids, dtype=object), kind="stable")] = np.arange(n)
    return keys


def _risk_order(scores: np.ndarray, ids: Optional[Sequence[str]]) -> np.ndarray:
    """Indices from riskiest to safest; equal scores fall back to id order"""
    return np.lexsort((_tie_keys(scores.size, ids), -scores))


def detection_comparison(curves: Mapping[int, Sequence[Tuple[float, float]]],
                         fractions: Sequence[float] = DETECTION_FRACTIONS) -> pd.DataFrame:
    """Recall at fixed top fractions for every tier next to a random ranking"""
    rows = []
    for fraction in fractions:
        row = {"top_fraction": fraction, "random": fraction}
        for tier, curve in sorted(curves.items()):
            k = max(1, math.ceil(fraction * len(curve)))
            row[f"tier_{tier}"] = curve[k - 1][1]
        rows.append(row)
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class RankDifference:
    ordering: Tuple[str, ...]
    diffs: Tuple[int, ...]
    labels: Tuple[int, ...]
    observed: Tuple[float, ...]
    expected: Tuple[float, ...]

    @property
    def positive_count(self) -> int:
        return sum(1 for d in self.diffs if d > 0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "position": np.arange(1, len(self.ordering) + 1),
            "entity_id": list(self.ordering),
            "rank_diff": list(self.diffs),
            "label": list(self.labels),
            "cumulative_breaches": list(self.observed),
            "expected_breaches": list(self.expected),
        })


def descending_ranks(scores: Sequence[float], ids: Optional[Sequence[str]] = None) -> np.ndarray:
    """1 for the riskiest entity; equal scores fall back to id order"""
    scores = np.asarray(scores, dtype=float)
    ranks = np.empty(scores.size, dtype=int)
    ranks[_risk_order(scores, ids)] = np.arange(1, scores.size + 1)
    return ranks


def rank_difference_accumulation(scores_a: Sequence[float], scores_b: Sequence[float], labels: Sequence[int],
                                 ids: Optional[Sequence[str]] = None) -> RankDifference:
    """Order entities by how much riskier model a ranks them than model b.

    diff = rank_b - rank_a, so a positive value means model a places the
    entity closer to the top. Observed cumulative breaches along that
    ordering are paired with the random-ordering line i * n_pos / n.
    """
    scores_a = np.asarray(scores_a, dtype=float)
    scores_b = np.asarray(scores_b, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if not scores_a.shape == scores_b.shape == labels.shape:
        raise DataValidationError("score vectors and labels differ in length", MODULE)
    n = labels.size
    ids = [str(i) for i in range(n)] if ids is None else list(ids)
    diffs = descending_ranks(scores_b, ids) - descending_ranks(scores_a, ids)
    order = np.lexsort((_tie_keys(n, ids), -diffs))
    ordered_labels = labels[order]
    n_pos = int(labels.sum())
    expected = np.arange(1, n + 1) * (n_pos / n) if n else np.zeros(0)
    return RankDifference(
        ordering=tuple(ids[i] for i in order),
        diffs=tuple(int(d) for d in diffs[order]),
        labels=tuple(int(v) for v in ordered_labels),
        observed=tuple(float(v) for v in np.cumsum(ordered_labels)),
        expected=tuple(float(v) for v in expected),
    )


def paired_t_test(observed: Sequence[float], expected: Sequence[float]) -> Tuple[float, float]:
    """Paired t statistic and two-sided p-value"""
    observed = np.asarray(observed, dtype=float)
    expected = np.asarray(expected, dtype=float)
    if observed.shape != expected.shape:
        raise DataValidationError("paired samples differ in length", MODULE)
    n = observed.size
    if n < 2:
        raise DataValidationError("paired t-test needs at least two pairs", MODULE)
    diff = observed - expected
    sd = float(np.std(diff, ddof=1))
    if not sd > 0.0:
        raise DataValidationError("paired differences have zero variance", MODULE)
    t_stat = float(diff.mean() / (sd / math.sqrt(n)))
    p_value = float(2.0 * stats.t.sf(abs(t_stat), df=n - 1))
    return t_stat, p_value


def positive_segment_test(rank_diff: RankDifference) -> Optional[Tuple[float, float]]:
    """Paired t-test of observed vs expected breaches over the positive-difference segment"""
    m = rank_diff.positive_count
    if m < 2:
        return None
    try:
        return paired_t_test(rank_diff.observed[:m], rank_diff.expected[:m])
    except DataValidationError:
        return None


def percentile_report(rank_diff: RankDifference, feature_frame: pd.DataFrame, features: Sequence[str],
                      top_k: int = 10, diff_direction: str = "positive") -> pd.DataFrame:
    """Feature values and population percentiles of the top-k entities by signed rank difference"""
    n = len(rank_diff.ordering)
    if top_k > n:
        raise DataValidationError(f"top_k {top_k} exceeds {n} entities", MODULE)
    if diff_direction not in ("positive", "negative"):
        raise DataValidationError("diff_direction must be 'positive' or 'negative'", MODULE)
    missing = [f for f in features if f not in feature_frame.columns]
    if missing:
        raise DataValidationError(f"unknown report features: {', '.join(missing)}", MODULE)
    positions = range(top_k) if diff_direction == "positive" else range(n - 1, n - 1 - top_k, -1)
    population = {f: feature_frame.loc[list(rank_diff.ordering), f].to_numpy(dtype=float) for f in features}
    rows = []
    for pos in positions:
        entity_id = rank_diff.ordering[pos]
        row = {"entity_id": entity_id, "rank_diff": rank_diff.diffs[pos], "label": rank_diff.labels[pos]}
        for f in features:
            value = float(feature_frame.at[entity_id, f])
            row[f] = value
            row[f"{f}_percentile"] = float(stats.percentileofscore(population[f], value, kind="mean"))
        rows.append(row)
    means = {"entity_id": "population_mean", "rank_diff": math.nan, "label": float(np.mean(rank_diff.labels))}
    for f in features:
        means[f] = float(population[f].mean())
        means[f"{f}_percentile"] = math.nan
    rows.append(means)
    columns = ["entity_id", "rank_diff", "label"] + [c for f in features for c in (f, f"{f}_percentile")]
    return pd.DataFrame(rows, columns=columns)


def mean_ci(values: Sequence[float]) -> Dict[str, float]:
    """Normal-approximation 95% interval: mean +- 1.96 sd / sqrt(n)"""
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
    half = Z_95 * sd / math.sqrt(values.size)
    return {"mean": mean, "sd": sd, "ci_low": mean - half, "ci_high": mean + half}


@dataclass
class TrialResult:
    trial: int
    seed: int
    aucs: Dict[int, float]
    hyperparams: Dict[int, dict]
    test_ids: Tuple[str, ...] = ()
    test_labels: Tuple[int, ...] = ()
    test_scores: Dict[int, Tuple[float, ...]] = field(default_factory=dict)


@dataclass
class EvaluationReport:
    tiers: Tuple[int, ...]
    n_trials: int
    base_seed: int
    trials: List[TrialResult]
    summary: Dict[int, Dict[str, float]]
    gaps: Dict[str, Dict[str, float]]
    detection: Dict[int, List[Tuple[float, float]]]
    detection_table: pd.DataFrame
    rank_differences: Dict[str, RankDifference]
    rank_tests: Dict[str, Optional[Dict[str, float]]]

    def trial_aucs(self, tier: int) -> List[float]:
        return [t.aucs[tier] for t in self.trials]

    def to_dict(self) -> dict:
        return {
            "tiers": list(self.tiers),
            "n_trials": self.n_trials,
            "base_seed": self.base_seed,
            "auc": {str(tier): {"trials": self.trial_aucs(tier), **self.summary[tier]} for tier in self.tiers},
            "auc_gaps": self.gaps,
            "hyperparams": {str(tier): [t.hyperparams[tier] for t in self.trials] for tier in self.tiers},
            "detection_rate": self.detection_table.to_dict(orient="records"),
            "detection_curves": {str(tier): [list(point) for point in curve]
                                 for tier, curve in self.detection.items()},
            "rank_difference": {
                name: {
                    "positive_count": rd.positive_count,
                    "final_cumulative_breaches": rd.observed[-1] if rd.observed else 0.0,
                    "paired_t_test": self.rank_tests.get(name),
                }
                for name, rd in self.rank_differences.items()
            },
        }

    def detection_frame(self) -> pd.DataFrame:
        """One row per rank step with each tier's cumulative recall"""
        first = next(iter(self.detection.values()), [])
        frame = pd.DataFrame({"rank": np.arange(1, len(first) + 1),
                              "top_fraction": [point[0] for point in first]})
        for tier, curve in sorted(self.detection.items()):
            frame[f"recall_tier_{tier}"] = [point[1] for point in curve]
        return frame


def _run_trial(dataset: ModelingDataset, trial: int, seed: int, tiers: Sequence[int], grid: Sequence[Hyperparams],
               k: int, train_fraction: float, fixed: Optional[Dict[int, Hyperparams]], fitter: Fitter,
               keep_scores: bool) -> TrialResult:
    split = stratified_split(dataset.entity_ids, dataset.strata(), train_fraction, seed)
    design, _ = dataset.design(split.train_ids)
    y_train = dataset.labels.loc[list(split.train_ids)].to_numpy(dtype=int)
    y_test = dataset.labels.loc[list(split.test_ids)].to_numpy(dtype=int)
    # validation folds never see their own entities in product risk or imputation
    folds = fold_designs(dataset, split.train_ids, k, seed) if not fixed and len(grid) > 1 else []
    result = TrialResult(trial=trial, seed=seed, aucs={}, hyperparams={})
    for tier in tiers:
        columns = dataset.tier_columns(tier)
        X_train = design.loc[list(split.train_ids), columns].to_numpy(dtype=float)
        X_test = design.loc[list(split.test_ids), columns].to_numpy(dtype=float)
        hp = fixed[tier] if fixed else design_kfold_tune(folds, y_train, columns, grid, seed, fitter)
        model = fitter(X_train, y_train, hp, seed, columns)
        scores = model.margins(X_test)
        result.aucs[tier] = auc(scores, y_test)
        result.hyperparams[tier] = hp.as_dict()
        if keep_scores:
            result.test_scores[tier] = tuple(float(s) for s in scores)
    if keep_scores:
        result.test_ids = split.test_ids
        result.test_labels = tuple(int(v) for v in y_test)
    logger.info(f"Trial {trial} (seed {seed}): " + ", ".join(f"tier {t} auc {result.aucs[t]:.4f}" for t in tiers))
    return result


def _fit_model(X, y, hp, seed, feature_names=None):
    return fit(X, y, hp, seed, feature_names)


def repeated_trials(dataset: ModelingDataset, tiers: Sequence[int] = (1, 2, 3), n_trials: int = 20,
                    base_seed: int = 0, grid: Optional[Sequence[Hyperparams]] = None, k: int = 5,
                    train_fraction: float = 0.7, retune: bool = True, n_jobs: int = 1,
                    fitter: Fitter = _fit_model,
                    rank_pairs: Sequence[Tuple[int, int]] = ((3, 1), (3, 2))) -> EvaluationReport:
    """Fresh split, tuning and fit per trial; AUC summaries plus curves from trial 0.

    Trial t uses seed base_seed + t. With retune=False every trial reuses
    the hyperparameters tuned in trial 0.
    """
    if n_trials < 2:
        raise DataValidationError(f"need at least two trials, got {n_trials}", MODULE)
    tiers = tuple(sorted(tiers))
    grid = list(grid) if grid is not None else default_grid()
    first = _run_trial(dataset, 0, base_seed, tiers, grid, k, train_fraction, None, fitter, keep_scores=True)
    fixed = None if retune else {tier: Hyperparams(**first.hyperparams[tier]) for tier in tiers}
    rest = Parallel(n_jobs=n_jobs)(
        delayed(_run_trial)(dataset, t, base_seed + t, tiers, grid, k, train_fraction, fixed, fitter, False)
        for t in tqdm(range(1, n_trials), desc="trials", disable=not progress_enabled(), leave=False))
    trials = [first] + list(rest)

    summary = {tier: mean_ci([t.aucs[tier] for t in trials]) for tier in tiers}
    gaps = {}
    for a, b in itertools.combinations(sorted(tiers, reverse=True), 2):
        gaps[f"{a}-{b}"] = mean_ci([t.aucs[a] - t.aucs[b] for t in trials])

    ids = list(first.test_ids)
    labels = np.asarray(first.test_labels, dtype=int)
    detection = {tier: detection_curve(first.test_scores[tier], labels, ids) for tier in tiers}
    rank_differences, rank_tests = {}, {}
    for a, b in rank_pairs:
        if a not in tiers or b not in tiers:
            continue
        name = f"{a}_vs_{b}"
        rd = rank_difference_accumulation(first.test_scores[a], first.test_scores[b], labels, ids)
        rank_differences[name] = rd
        test = positive_segment_test(rd)
        rank_tests[name] = None if test is None else {"t_statistic": test[0], "p_value": test[1]}

    for tier in tiers:
        s = summary[tier]
        logger.info(f"Tier {tier}: mean auc {s['mean']:.4f} (95% CI {s['ci_low']:.4f}-{s['ci_high']:.4f})")
    return EvaluationReport(
        tiers=tiers, n_trials=n_trials, base_seed=base_seed, trials=trials, summary=summary, gaps=gaps,
        detection=detection, detection_table=detection_comparison(detection),
        rank_differences=rank_differences, rank_tests=rank_tests,
    )
