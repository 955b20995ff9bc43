"""
Command-line pipeline for the supply-chain risk toolkit.

    scrisk synth     generate a synthetic dataset into the data directory
    scrisk stats     degree cohorts and generator statistics
    scrisk features  feature tables per model tier and the product risk table
    scrisk train     tune and fit one tier, save the model
    scrisk eval      repeated-trial evaluation, report.json and detection curves
    scrisk explain   global Shapley importance (and one entity's attribution)
    scrisk rankdiff  rank-difference accumulation and percentile reports

Every subcommand reads the same YAML config and hands off through files.
"""

import argparse
import itertools
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import DataValidationError, InputMissingError, RiskToolkitError
from evalsuite import (SplitPlan, auc, default_grid, design_kfold_tune, fold_designs, percentile_report,
                       positive_segment_test, rank_difference_accumulation, repeated_trials, stratified_split)
from explain import global_importance, importance_frame, tree_shap
from features import FeatureCatalog, ModelingDataset, features_table, TIERS
from gbm import GbmModel, Hyperparams, fit, load_model, save_model
from graph_core import GlobalGraph, cohort_degrees, degree_cohort_table, load_graph
from synth import DATASET_FILES, SynthConfig, generate, statistics_report, write_dataset
from utils import PathLike, load_yaml_mapping, parse_month, save_csv, save_json, setup_logging

logger = logging.getLogger(__name__)

MODULE = "cli"
DEFAULT_CONFIG = Path("config") / "settings.yaml"
SYNTH_PREFIX = "synth_"
GRID_KEYS = ("learning_rate", "n_estimators", "max_depth", "l1_reg")


@dataclass
class RunConfig:
    """Settings shared by every subcommand"""

    data_dir: Path = Path("data")
    out_dir: Path = Path("out")
    log_level: str = "INFO"
    log_file: Optional[str] = None
    seed: int = 0
    n_trials: int = 20
    cv_folds: int = 5
    train_fraction: float = 0.7
    retune_each_trial: bool = True
    n_jobs: int = 1
    sectors: Tuple[str, ...] = ("Healthcare", "OilGas", "Retail")
    supplier_sectors: Tuple[str, ...] = ("Technology", "Manufacturing", "Legal", "HealthcareAndWellness",
                                         "BusinessServices")
    rating_names: Tuple[str, ...] = ("patching_cadence", "spf", "spam_propagation", "open_ports",
                                     "tls_ssl_certificates", "desktop_software")
    history_start: str = "2017-05"
    history_end: str = "2019-05"
    label_start: str = "2019-05"
    label_end: str = "2020-05"
    impute_strategy: str = "mean"
    grid: Optional[Mapping[str, Sequence[Any]]] = None
    min_samples_leaf: int = 20
    report_features: Tuple[str, ...] = ("employee_count", "fourth_breach_count", "product_edge_aggregate",
                                        "third_count_HealthcareAndWellness", "fourth_count_Manufacturing")
    report_top_k: int = 10
    importance_top_k: int = 20
    explain_sample: int = 0
    plots: bool = True
    synth: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def allowed_keys(cls) -> List[str]:
        own = [f.name for f in fields(cls) if f.name != "synth"]
        return own + [SYNTH_PREFIX + f.name for f in fields(SynthConfig)]

    @classmethod
    def from_file(cls, path: Optional[PathLike]) -> "RunConfig":
        if path is None:
            if not DEFAULT_CONFIG.exists():
                return cls()
            path = DEFAULT_CONFIG
        values = load_yaml_mapping(path, cls.allowed_keys(), MODULE)
        synth = {k[len(SYNTH_PREFIX):]: v for k, v in values.items() if k.startswith(SYNTH_PREFIX)}
        own = {k: v for k, v in values.items() if not k.startswith(SYNTH_PREFIX)}
        for name in ("sectors", "supplier_sectors", "rating_names", "report_features"):
            if name in own:
                own[name] = tuple(own[name])
        for name in ("data_dir", "out_dir"):
            if name in own:
                own[name] = Path(own[name])
        config = cls(**own, synth=synth)
        config.validate()
        return config

    def validate(self) -> None:
        if self.grid is not None:
            unknown = sorted(set(self.grid) - set(GRID_KEYS))
            if unknown:
                raise DataValidationError(f"unknown grid keys: {', '.join(unknown)}", MODULE)
        if self.n_trials < 2:
            raise DataValidationError(f"n_trials must be at least 2, got {self.n_trials}", MODULE)
        self.catalog()

    def input_paths(self) -> Dict[str, Path]:
        return {name: self.data_dir / filename for name, filename in DATASET_FILES.items()}

    @property
    def window(self) -> Tuple[int, int]:
        return parse_month(self.history_start, module=MODULE), parse_month(self.label_end, module=MODULE)

    def catalog(self) -> FeatureCatalog:
        return FeatureCatalog(
            sectors=self.sectors,
            rating_names=self.rating_names,
            history_window=(parse_month(self.history_start, module=MODULE),
                            parse_month(self.history_end, module=MODULE)),
            label_window=(parse_month(self.label_start, module=MODULE), parse_month(self.label_end, module=MODULE)),
            supplier_sectors=self.supplier_sectors,
            impute_strategy=self.impute_strategy,
        )

    def hyperparameter_grid(self) -> List[Hyperparams]:
        if self.grid is None:
            return default_grid(self.min_samples_leaf)
        defaults = Hyperparams()
        axes = [list(self.grid.get(k, [getattr(defaults, k)])) for k in GRID_KEYS]
        return [Hyperparams(learning_rate=float(lr), n_estimators=int(n), max_depth=int(d), l1_reg=float(l1),
                            min_samples_leaf=self.min_samples_leaf)
                for lr, n, d, l1 in itertools.product(*axes)]

    def synth_config(self) -> SynthConfig:
        values = dict(self.synth)
        values.setdefault("seed", self.seed)
        return SynthConfig.from_mapping(values)


class Pipeline:
    """Loads inputs once per subcommand and shares the seed-determined split"""

    def __init__(self, config: RunConfig):
        self.config = config
        self._graph: Optional[GlobalGraph] = None
        self._dataset: Optional[ModelingDataset] = None

    @property
    def out_dir(self) -> Path:
        return self.config.out_dir

    def graph(self) -> GlobalGraph:
        if self._graph is None:
            paths = self.config.input_paths()
            for path in paths.values():
                if not path.exists():
                    raise InputMissingError(f"missing input {path}; run 'synth' or point data_dir at a dataset",
                                            MODULE)
            self._graph = load_graph(paths["companies"], paths["edges"], paths["breaches"], paths["ratings"],
                                     window=self.config.window)
        return self._graph

    def dataset(self) -> ModelingDataset:
        if self._dataset is None:
            self._dataset = ModelingDataset.build(self.graph(), self.config.catalog())
        return self._dataset

    def split(self) -> SplitPlan:
        dataset = self.dataset()
        return stratified_split(dataset.entity_ids, dataset.strata(), self.config.train_fraction, self.config.seed)

    def model_path(self, tier: int) -> Path:
        return self.out_dir / f"model_tier{tier}.json"

    def load_tier_model(self, tier: int) -> GbmModel:
        path = self.model_path(tier)
        if not path.exists():
            raise InputMissingError(f"missing model {path}; run 'train --tier {tier}' first", MODULE)
        model = load_model(path)
        expected = self.config.catalog().feature_names(tier)
        if list(model.feature_names) != expected:
            raise DataValidationError(f"{path} was trained on a different feature catalog", MODULE)
        return model

    def matrices(self, tier: int, split: SplitPlan):
        dataset = self.dataset()
        design, table = dataset.design(split.train_ids)
        columns = dataset.tier_columns(tier)
        return design, table, columns


def cmd_synth(config: RunConfig, out: Optional[Path] = None) -> Dict[str, Path]:
    synth_config = config.synth_config()
    dataset = generate(synth_config)
    paths = write_dataset(dataset, out or config.data_dir)
    logger.info(f"Synthetic dataset written to {out or config.data_dir}")
    return paths


def cmd_stats(pipeline: Pipeline) -> Dict[str, Path]:
    graph = pipeline.graph()
    paths = {
        "degree_cohorts": save_csv(degree_cohort_table(graph), pipeline.out_dir / "degree_cohorts.csv"),
        "synth_stats": save_csv(statistics_report(graph, pipeline.config.sectors),
                                pipeline.out_dir / "synth_stats.csv"),
    }
    if pipeline.config.plots:
        from visualizer import RiskVisualizer
        paths["degree_plot"] = RiskVisualizer().plot_degree_cohorts(cohort_degrees(graph),
                                                                    pipeline.out_dir / "degree_cohorts.svg")
    return paths


def cmd_features(pipeline: Pipeline, tiers: Sequence[int] = TIERS) -> Dict[str, Path]:
    """features_tier<t>.csv with the product table and imputation taken from the seed's training split"""
    dataset = pipeline.dataset()
    split = pipeline.split()
    design, table = dataset.design(split.train_ids)
    paths = {"product_risk": save_csv(table.to_frame(), pipeline.out_dir / "product_risk.csv")}
    for tier in tiers:
        frame = features_table(design, dataset.labels, dataset.tier_columns(tier))
        paths[f"tier{tier}"] = save_csv(frame, pipeline.out_dir / f"features_tier{tier}.csv")
    return paths


def cmd_train(pipeline: Pipeline, tier: int) -> Path:
    config = pipeline.config
    dataset = pipeline.dataset()
    split = pipeline.split()
    design, _, columns = pipeline.matrices(tier, split)
    train_ids, test_ids = list(split.train_ids), list(split.test_ids)
    X_train = design.loc[train_ids, columns].to_numpy(dtype=float)
    y_train = dataset.labels.loc[train_ids].to_numpy(dtype=int)
    grid = config.hyperparameter_grid()
    folds = fold_designs(dataset, train_ids, config.cv_folds, config.seed) if len(grid) > 1 else []
    hp = design_kfold_tune(folds, y_train, columns, grid, config.seed, n_jobs=config.n_jobs)
    model = fit(X_train, y_train, hp, config.seed, columns)
    y_test = dataset.labels.loc[test_ids].to_numpy(dtype=int)
    if 0 < y_test.sum() < len(y_test):
        test_auc = auc(model.margins(design.loc[test_ids, columns].to_numpy(dtype=float)), y_test)
        logger.info(f"Tier {tier} held-out AUC {test_auc:.4f} with {hp}")
    return save_model(model, pipeline.model_path(tier))


def cmd_eval(pipeline: Pipeline) -> Dict[str, Path]:
    config = pipeline.config
    report = repeated_trials(
        pipeline.dataset(), tiers=TIERS, n_trials=config.n_trials, base_seed=config.seed,
        grid=config.hyperparameter_grid(), k=config.cv_folds, train_fraction=config.train_fraction,
        retune=config.retune_each_trial, n_jobs=config.n_jobs,
    )
    out = pipeline.out_dir
    paths = {
        "report": save_json(report.to_dict(), out / "report.json"),
        "curves": save_csv(report.detection_frame(), out / "detection_curves.csv"),
        "detection_rate": save_csv(report.detection_table, out / "detection_rate.csv"),
    }
    if config.plots:
        from visualizer import RiskVisualizer
        paths["detection_plot"] = RiskVisualizer().plot_detection_curves(report.detection, out / "detection_rate.svg")
    return paths


def cmd_explain(pipeline: Pipeline, tier: int, entity_id: Optional[str] = None) -> Dict[str, Path]:
    config = pipeline.config
    model = pipeline.load_tier_model(tier)
    split = pipeline.split()
    design, _, columns = pipeline.matrices(tier, split)
    paths = {}
    if entity_id is not None:
        if entity_id not in design.index:
            raise DataValidationError(f"unknown entity id {entity_id!r}", MODULE)
        attribution = tree_shap(model, design.loc[entity_id, columns].to_numpy(dtype=float), entity_id=entity_id)
        paths["attribution"] = save_csv(attribution.to_frame(),
                                        pipeline.out_dir / f"attribution_tier{tier}_{entity_id}.csv")
        return paths
    ids = list(split.test_ids)
    if config.explain_sample and len(ids) > config.explain_sample:
        ids = [ids[i] for i in np.linspace(0, len(ids) - 1, config.explain_sample).round().astype(int)]
    ranked = global_importance(model, design.loc[ids, columns].to_numpy(dtype=float), n_jobs=config.n_jobs)
    frame = importance_frame(ranked)
    paths["importance"] = save_csv(frame, pipeline.out_dir / f"importance_tier{tier}.csv")
    if config.plots:
        from visualizer import RiskVisualizer
        paths["importance_plot"] = RiskVisualizer().plot_importance(
            frame, pipeline.out_dir / f"importance_tier{tier}.svg", config.importance_top_k)
    return paths


def cmd_rankdiff(pipeline: Pipeline, tier_a: int, tier_b: int) -> Dict[str, Path]:
    config = pipeline.config
    if tier_a == tier_b:
        raise DataValidationError("rankdiff needs two different tiers", MODULE)
    model_a, model_b = pipeline.load_tier_model(tier_a), pipeline.load_tier_model(tier_b)
    dataset = pipeline.dataset()
    split = pipeline.split()
    design, _ = dataset.design(split.train_ids)
    ids = list(split.test_ids)
    labels = dataset.labels.loc[ids].to_numpy(dtype=int)
    scores_a = model_a.margins(design.loc[ids, list(model_a.feature_names)].to_numpy(dtype=float))
    scores_b = model_b.margins(design.loc[ids, list(model_b.feature_names)].to_numpy(dtype=float))
    rank_diff = rank_difference_accumulation(scores_a, scores_b, labels, ids)
    name = f"{tier_a}_vs_{tier_b}"
    out = pipeline.out_dir
    frame = rank_diff.to_frame()
    paths = {"accumulation": save_csv(frame, out / f"rankdiff_{name}.csv")}
    test = positive_segment_test(rank_diff)
    paths["t_test"] = save_json({
        "positive_count": rank_diff.positive_count,
        "total_breaches": int(labels.sum()),
        "paired_t_test": None if test is None else {"t_statistic": test[0], "p_value": test[1]},
    }, out / f"rankdiff_{name}.json")
    top_k = min(config.report_top_k, len(ids))
    for direction in ("positive", "negative"):
        table = percentile_report(rank_diff, design, config.report_features, top_k, direction)
        paths[f"percentile_{direction}"] = save_csv(table, out / f"percentile_{name}_{direction}.csv")
    if config.plots:
        from visualizer import RiskVisualizer
        paths["plot"] = RiskVisualizer().plot_rank_difference(
            frame, out / f"rankdiff_{name}.svg", f"Model {tier_a} vs Model {tier_b}")
    if test is not None:
        logger.info(f"Rank difference {name}: paired t = {test[0]:.3f}, p = {test[1]:.3g}")
    return paths


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML settings file")
    common.add_argument("--seed", type=int, default=None, help="base seed override")
    common.add_argument("--out", type=Path, default=None, help="output directory override")
    common.add_argument("--trials", type=int, default=None, help="number of repeated trials")

    parser = argparse.ArgumentParser(prog="scrisk", description="Supply-chain cyber risk toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("stats", parents=[common], help="degree cohorts and dataset statistics")
    features = sub.add_parser("features", parents=[common], help="write feature tables")
    features.add_argument("--tier", type=int, choices=TIERS, default=None)
    train = sub.add_parser("train", parents=[common], help="tune and fit one model tier")
    train.add_argument("--tier", type=int, choices=TIERS, default=3)
    sub.add_parser("eval", parents=[common], help="repeated-trial evaluation")
    explain = sub.add_parser("explain", parents=[common], help="Shapley importance of a trained tier")
    explain.add_argument("--tier", type=int, choices=TIERS, default=3)
    explain.add_argument("--entity", default=None, help="write one entity's attribution instead")
    rankdiff = sub.add_parser("rankdiff", parents=[common], help="rank-difference analysis of two tiers")
    rankdiff.add_argument("tier_a", type=int, choices=TIERS, nargs="?", default=3)
    rankdiff.add_argument("tier_b", type=int, choices=TIERS, nargs="?", default=1)
    return parser


def run(args: argparse.Namespace) -> Dict[str, Any]:
    config = RunConfig.from_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
        config.synth["seed"] = args.seed
    if args.trials is not None:
        config.n_trials = args.trials
        config.validate()
    setup_logging(config.log_level, config.log_file)

    if args.command == "synth":
        return cmd_synth(config, args.out)
    if args.out is not None:
        config.out_dir = args.out
    pipeline = Pipeline(config)
    if args.command == "stats":
        return cmd_stats(pipeline)
    if args.command == "features":
        return cmd_features(pipeline, TIERS if args.tier is None else (args.tier,))
    if args.command == "train":
        return {"model": cmd_train(pipeline, args.tier)}
    if args.command == "eval":
        return cmd_eval(pipeline)
    if args.command == "explain":
        return cmd_explain(pipeline, args.tier, args.entity)
    return cmd_rankdiff(pipeline, args.tier_a, args.tier_b)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except RiskToolkitError as exc:
        print(f"error [{exc.module}]: {exc.message}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
