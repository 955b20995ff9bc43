"""
Local supply chain feature engineering.

Builds the entity feature catalog for the three model tiers: baseline
attributes, the entity's own outside-in ratings, and the supply chain
network features (sector connectivity, exposure, party summaries, the
product-edge aggregate and historical party breaches).
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from errors import DataValidationError
from graph_core import RATING_MAX, RATING_MIN, GlobalGraph, LocalSupplyChain, extract_local_chain
from utils import format_month, progress_enabled

logger = logging.getLogger(__name__)

MODULE = "features"

EMPLOYEE_COUNT = "employee_count"
IMPUTE_STRATEGIES = ("mean", "constant")
RATING_FALLBACK = (RATING_MIN + RATING_MAX) / 2.0
TIERS = (1, 2, 3)
PRODUCT_AGGREGATE = "product_edge_aggregate"


class PartyLevel(str, Enum):
    THIRD = "third"
    FOURTH = "fourth"


@dataclass(frozen=True)
class FeatureCatalog:
    """Feature configuration: sector vocabularies, rating names and time windows.

    Windows are half-open month ranges. Features only read data dated
    before the history window ends, and that is never after the label
    window starts.
    """

    sectors: Tuple[str, ...]
    rating_names: Tuple[str, ...]
    history_window: Tuple[int, int]
    label_window: Tuple[int, int]
    supplier_sectors: Tuple[str, ...] = ()
    impute_strategy: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "sectors", tuple(self.sectors))
        object.__setattr__(self, "rating_names", tuple(self.rating_names))
        object.__setattr__(self, "supplier_sectors", tuple(self.supplier_sectors) or tuple(self.sectors))
        for name, window in (("history_window", self.history_window), ("label_window", self.label_window)):
            if window[0] > window[1]:
                raise DataValidationError(f"{name} is inverted: {window}", MODULE)
        if self.history_window[1] > self.label_window[0]:
            raise DataValidationError(
                f"history window ends {format_month(self.history_window[1])} after label window starts "
                f"{format_month(self.label_window[0])}", MODULE)
        if self.impute_strategy not in IMPUTE_STRATEGIES:
            raise DataValidationError(f"impute_strategy must be one of {IMPUTE_STRATEGIES}", MODULE)
        if len(set(self.sectors)) != len(self.sectors) or len(set(self.rating_names)) != len(self.rating_names):
            raise DataValidationError("sectors and rating names must be unique", MODULE)

    @property
    def snapshot_month(self) -> int:
        """Last month of the history window; rating features are read as of this month"""
        return self.history_window[1] - 1

    @property
    def summary_fields(self) -> Tuple[str, ...]:
        return self.rating_names + (EMPLOYEE_COUNT,)

    def feature_names(self, tier: int) -> List[str]:
        """Canonical feature order; each tier extends the previous one"""
        if tier not in TIERS:
            raise DataValidationError(f"tier must be one of {TIERS}, got {tier}", MODULE)
        names = [f"sector_{s}" for s in self.sectors] + [EMPLOYEE_COUNT]
        if tier >= 2:
            names += [f"rating_{r}" for r in self.rating_names]
        if tier >= 3:
            names += [f"third_count_{s}" for s in self.supplier_sectors]
            names += [f"fourth_count_{s}" for s in self.supplier_sectors]
            names += [f"fourth_median_{s}" for s in self.supplier_sectors]
            names += ["network_exposure"]
            names += [f"third_mean_{f}" for f in self.summary_fields]
            names += [f"fourth_mean_{f}" for f in self.summary_fields]
            names += [PRODUCT_AGGREGATE, "third_breach_count", "fourth_breach_count"]
        return names

    def imputable_names(self) -> List[str]:
        """Features that can be missing and are filled before modeling"""
        return ([f"rating_{r}" for r in self.rating_names]
                + [f"third_mean_{f}" for f in self.summary_fields]
                + [f"fourth_mean_{f}" for f in self.summary_fields])

    def fallback_value(self, feature_name: str) -> float:
        return 0.0 if feature_name.endswith(EMPLOYEE_COUNT) else RATING_FALLBACK


@dataclass(frozen=True)
class ProductRiskTable:
    group: Mapping[str, int]
    risk_level: Mapping[str, float]

    def group_of(self, product_type: str) -> int:
        # unseen product types carry no evidence of risk
        return self.group.get(product_type, 1)

    def to_frame(self) -> pd.DataFrame:
        rows = [{"product_type": p, "risk_level": self.risk_level[p], "group": self.group[p]}
                for p in sorted(self.group, key=lambda p: (-self.risk_level[p], p))]
        return pd.DataFrame(rows, columns=["product_type", "risk_level", "group"])


@dataclass(frozen=True)
class FeatureVector:
    entity_id: str
    names: Tuple[str, ...]
    values: Tuple[float, ...]
    tier: int

    def __post_init__(self):
        if len(self.names) != len(self.values):
            raise DataValidationError("feature names and values differ in length", MODULE)

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.names, self.values))


def _check_sector(graph: GlobalGraph, sector: str, known: Iterable[str] = ()) -> None:
    if sector not in graph.sectors and sector not in set(known):
        raise DataValidationError(f"unknown sector label {sector!r}", MODULE)


def _parties(local: LocalSupplyChain, level: PartyLevel) -> List[str]:
    level = PartyLevel(level)
    return sorted(local.third_parties if level is PartyLevel.THIRD else local.fourth_parties)


def third_connectivity(local: LocalSupplyChain, graph: GlobalGraph, sector: str,
                       known_sectors: Iterable[str] = ()) -> int:
    """Number of third parties in the given sector"""
    _check_sector(graph, sector, known_sectors)
    return sum(1 for cid in local.third_parties if graph.company(cid).sector == sector)


def fourth_connectivity_count(local: LocalSupplyChain, graph: GlobalGraph, sector: str,
                              known_sectors: Iterable[str] = ()) -> int:
    """Number of distinct fourth parties in the given sector"""
    _check_sector(graph, sector, known_sectors)
    return sum(1 for cid in local.fourth_parties if graph.company(cid).sector == sector)


def fourth_connectivity_median(local: LocalSupplyChain, graph: GlobalGraph, sector: str,
                               known_sectors: Iterable[str] = ()) -> float:
    """Median over third parties of their distinct sector fourth-party connections"""
    _check_sector(graph, sector, known_sectors)
    if not local.third_parties:
        return 0.0
    suppliers: Dict[str, set] = {t: set() for t in local.third_parties}
    for edge in local.fourth_edges:
        if graph.company(edge.supplier_id).sector == sector:
            suppliers[edge.customer_id].add(edge.supplier_id)
    return float(np.median([len(suppliers[t]) for t in sorted(suppliers)]))


def network_exposure(local: LocalSupplyChain) -> int:
    """Distinct third plus fourth parties"""
    return len(local.third_parties | local.fourth_parties)


def _field_value(graph: GlobalGraph, company_id: str, field_name: str, month: int) -> Optional[float]:
    company = graph.company(company_id)
    if field_name == EMPLOYEE_COUNT:
        return float(company.employee_count)
    return company.rating_at(field_name, month)


def party_summary(local: LocalSupplyChain, graph: GlobalGraph, party_level: PartyLevel, field_name: str,
                  month: int, known_fields: Iterable[str] = ()) -> Optional[float]:
    """Mean of a rating (as of the month) or employee count over one party level.

    Parties without the field are left out; None when nothing remains.
    """
    if field_name != EMPLOYEE_COUNT and field_name not in graph.rating_names and field_name not in set(known_fields):
        raise DataValidationError(f"unknown summary field {field_name!r}", MODULE)
    values = [v for v in (_field_value(graph, cid, field_name, month) for cid in _parties(local, party_level))
              if v is not None]
    if not values:
        return None
    return float(np.mean(values))


def party_breach_count(local: LocalSupplyChain, graph: GlobalGraph, party_level: PartyLevel,
                       window: Tuple[int, int]) -> int:
    """Breach incidents reported by one party level in [start, end)"""
    start, end = window
    if start > end:
        raise DataValidationError(f"inverted breach window {window}", MODULE)
    return sum(graph.company(cid).breach_count(start, end) for cid in _parties(local, party_level))


def entity_label(graph: GlobalGraph, entity_id: str, catalog: FeatureCatalog) -> int:
    """1 if the entity reported a breach inside the label window"""
    start, end = catalog.label_window
    return int(graph.company(entity_id).breach_count(start, end) > 0)


def build_product_risk_table(graph: GlobalGraph, catalog: FeatureCatalog,
                             train_ids: Optional[Iterable[str]] = None, alpha: float = 1.0) -> ProductRiskTable:
    """Rank product types by the smoothed breach rate of the training entities receiving them.

    Breaches are read from the history window only. Products are sorted by
    risk level (descending, ties by name) and cut into four near-equal
    groups, 4 for the riskiest quarter down to 1.
    """
    products = sorted(graph.product_types)
    if not products:
        raise DataValidationError("no product types in graph", MODULE)
    train_ids = sorted(graph.entity_ids if train_ids is None else train_ids)
    start, end = catalog.history_window
    receivers: Dict[str, int] = {p: 0 for p in products}
    breached: Dict[str, int] = {p: 0 for p in products}
    for entity_id in train_ids:
        received = {e.product_type for e in graph.in_edges(entity_id)}
        was_breached = graph.company(entity_id).breach_count(start, end) > 0
        for product in received:
            receivers[product] += 1
            breached[product] += int(was_breached)
    risk_level = {p: (breached[p] + alpha) / (receivers[p] + 2 * alpha) for p in products}
    ranked = sorted(products, key=lambda p: (-risk_level[p], p))
    group = {}
    for quartile, chunk in enumerate(np.array_split(np.arange(len(ranked)), 4)):
        for index in chunk:
            group[ranked[index]] = 4 - quartile
    logger.debug(f"Product risk table over {len(products)} products from {len(train_ids)} training entities")
    return ProductRiskTable(group=group, risk_level=risk_level)


def product_edge_aggregate(local: LocalSupplyChain, table: ProductRiskTable) -> int:
    """Risk-group weighted count of the entity's incoming product edges"""
    return sum(table.group_of(e.product_type) for e in local.third_edges)


class FeatureBuilder:
    """Computes tier-3 feature rows for many entities against one graph.

    Rows keep missing summaries as NaN and leave the product aggregate
    empty when no risk table is given; both are completed per train split.
    """

    def __init__(self, graph: GlobalGraph, catalog: FeatureCatalog):
        self.graph = graph
        self.catalog = catalog
        self._field_cache: Dict[Tuple[str, str], Optional[float]] = {}
        self._chains: Dict[str, LocalSupplyChain] = {}

    def chain(self, entity_id: str) -> LocalSupplyChain:
        if entity_id not in self._chains:
            self._chains[entity_id] = extract_local_chain(self.graph, entity_id)
        return self._chains[entity_id]

    def _value(self, company_id: str, field_name: str) -> Optional[float]:
        key = (company_id, field_name)
        if key not in self._field_cache:
            self._field_cache[key] = _field_value(self.graph, company_id, field_name, self.catalog.snapshot_month)
        return self._field_cache[key]

    def _mean(self, parties: Sequence[str], field_name: str) -> float:
        values = [v for v in (self._value(cid, field_name) for cid in parties) if v is not None]
        return float(np.mean(values)) if values else math.nan

    def raw_row(self, entity_id: str, table: Optional[ProductRiskTable] = None) -> Dict[str, float]:
        catalog = self.catalog
        company = self.graph.company(entity_id)
        if company.sector not in catalog.sectors:
            raise DataValidationError(f"entity {entity_id!r} has sector {company.sector!r} outside the catalog", MODULE)
        row: Dict[str, float] = {f"sector_{s}": float(company.sector == s) for s in catalog.sectors}
        row[EMPLOYEE_COUNT] = float(company.employee_count)
        for rating in catalog.rating_names:
            value = self._value(entity_id, rating)
            row[f"rating_{rating}"] = math.nan if value is None else value

        local = self.chain(entity_id)
        third, fourth = sorted(local.third_parties), sorted(local.fourth_parties)
        sector_of = {cid: self.graph.company(cid).sector for cid in third + fourth}
        fourth_into: Dict[str, set] = {t: set() for t in third}
        for edge in local.fourth_edges:
            fourth_into[edge.customer_id].add(edge.supplier_id)
        for s in catalog.supplier_sectors:
            row[f"third_count_{s}"] = float(sum(1 for cid in third if sector_of[cid] == s))
        for s in catalog.supplier_sectors:
            row[f"fourth_count_{s}"] = float(sum(1 for cid in fourth if sector_of[cid] == s))
        for s in catalog.supplier_sectors:
            counts = [sum(1 for f in fourth_into[t] if sector_of[f] == s) for t in third]
            row[f"fourth_median_{s}"] = float(np.median(counts)) if counts else 0.0
        row["network_exposure"] = float(network_exposure(local))
        for f in catalog.summary_fields:
            row[f"third_mean_{f}"] = self._mean(third, f)
        for f in catalog.summary_fields:
            row[f"fourth_mean_{f}"] = self._mean(fourth, f)
        row[PRODUCT_AGGREGATE] = math.nan if table is None else float(product_edge_aggregate(local, table))
        start, end = catalog.history_window
        row["third_breach_count"] = float(sum(self.graph.company(c).breach_count(start, end) for c in third))
        row["fourth_breach_count"] = float(sum(self.graph.company(c).breach_count(start, end) for c in fourth))
        return row

    def raw_frame(self, entity_ids: Optional[Iterable[str]] = None,
                  table: Optional[ProductRiskTable] = None) -> pd.DataFrame:
        entity_ids = sorted(self.graph.entity_ids if entity_ids is None else entity_ids)
        rows = [self.raw_row(eid, table)
                for eid in tqdm(entity_ids, desc="features", disable=not progress_enabled(), leave=False)]
        frame = pd.DataFrame(rows, index=pd.Index(entity_ids, name="entity_id"),
                             columns=self.catalog.feature_names(3), dtype=float)
        logger.info(f"Built {frame.shape[1]} tier-3 features for {frame.shape[0]} entities")
        return frame

    def labels(self, entity_ids: Optional[Iterable[str]] = None) -> pd.Series:
        entity_ids = sorted(self.graph.entity_ids if entity_ids is None else entity_ids)
        return pd.Series([entity_label(self.graph, eid, self.catalog) for eid in entity_ids],
                         index=pd.Index(entity_ids, name="entity_id"), name="label", dtype=int)


def impute_values(frame: pd.DataFrame, catalog: FeatureCatalog,
                  train_ids: Optional[Iterable[str]] = None) -> Dict[str, float]:
    """Fill values for the missing-able features, from the training rows"""
    rows = frame if train_ids is None else frame.loc[sorted(train_ids)]
    values = {}
    for name in catalog.imputable_names():
        if name not in frame.columns:
            continue
        column = rows[name].to_numpy(dtype=float)
        observed = column[~np.isnan(column)]
        if catalog.impute_strategy == "mean" and observed.size:
            values[name] = float(observed.mean())
        else:
            values[name] = catalog.fallback_value(name)
    return values


def assemble(entity_id: str, graph: GlobalGraph, catalog: FeatureCatalog, table: Optional[ProductRiskTable],
             tier: int, impute: Optional[Mapping[str, float]] = None) -> FeatureVector:
    """Feature vector of one entity for a model tier, with missing values filled"""
    if entity_id not in graph.entity_ids:
        raise DataValidationError(f"unknown entity id {entity_id!r}", MODULE)
    names = catalog.feature_names(tier)
    if tier == 3 and table is None:
        raise DataValidationError("tier 3 features need a product risk table", MODULE)
    row = FeatureBuilder(graph, catalog).raw_row(entity_id, table if tier == 3 else None)
    impute = dict(impute or {})
    values = []
    for name in names:
        value = row[name]
        if math.isnan(value):
            value = impute.get(name, catalog.fallback_value(name))
        values.append(float(value))
    return FeatureVector(entity_id=entity_id, names=tuple(names), values=tuple(values), tier=tier)


@dataclass
class ModelingDataset:
    """Split-independent feature rows plus labels and sampling strata for every entity"""

    graph: GlobalGraph
    catalog: FeatureCatalog
    raw: pd.DataFrame
    labels: pd.Series
    sectors: pd.Series
    _builder: Optional[FeatureBuilder] = field(repr=False, default=None)

    @classmethod
    def build(cls, graph: GlobalGraph, catalog: FeatureCatalog) -> "ModelingDataset":
        builder = FeatureBuilder(graph, catalog)
        raw = builder.raw_frame()
        labels = builder.labels()
        sectors = pd.Series([graph.company(eid).sector for eid in raw.index], index=raw.index, name="sector")
        n_pos = int(labels.sum())
        logger.info(f"Modeling dataset: {len(labels)} entities, {n_pos} breached in label window")
        return cls(graph, catalog, raw, labels, sectors, builder)

    @property
    def entity_ids(self) -> List[str]:
        return list(self.raw.index)

    def strata(self) -> Dict[str, Tuple[str, int]]:
        return {eid: (self.sectors[eid], int(self.labels[eid])) for eid in self.raw.index}

    def product_table(self, train_ids: Iterable[str]) -> ProductRiskTable:
        return build_product_risk_table(self.graph, self.catalog, train_ids)

    def design(self, train_ids: Iterable[str]) -> Tuple[pd.DataFrame, ProductRiskTable]:
        """Complete tier-3 matrix for all entities, with training-only product table and imputation"""
        train_ids = sorted(train_ids)
        table = self.product_table(train_ids)
        if self._builder is None:
            self._builder = FeatureBuilder(self.graph, self.catalog)
        frame = self.raw.copy()
        frame[PRODUCT_AGGREGATE] = [float(product_edge_aggregate(self._builder.chain(eid), table))
                                    for eid in frame.index]
        fill = impute_values(frame, self.catalog, train_ids)
        frame = frame.fillna(value=fill)
        return frame, table

    def tier_columns(self, tier: int) -> List[str]:
        return self.catalog.feature_names(tier)


def features_table(frame: pd.DataFrame, labels: pd.Series, columns: Sequence[str]) -> pd.DataFrame:
    """features.csv layout: entity_id, label, then the feature columns"""
    table = frame[list(columns)].copy()
    table.insert(0, "label", labels.loc[table.index].astype(int).to_numpy())
    return table.reset_index()
