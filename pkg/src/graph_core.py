"""
Global supply-chain graph: loading, validation and local supply chain extraction.

The graph holds every company (entities and their digital suppliers), the
product edges between them, monthly outside-in ratings and breach records.
It is frozen after load, so every query here is read-only.
"""

import bisect
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd
from scipy import stats

from errors import DataValidationError, InvariantViolation
from utils import format_month, parse_month

logger = logging.getLogger(__name__)

MODULE = "graph_core"

RATING_MIN = 300.0
RATING_MAX = 820.0

COMPANY_COLUMNS = ["id", "sector", "employee_count", "is_entity"]
RATING_COLUMNS = ["id", "month", "rating_name", "value"]
EDGE_COLUMNS = ["supplier_id", "customer_id", "product_type"]
BREACH_COLUMNS = ["id", "month"]

_TRUE = {"1", "true", "yes"}
_FALSE = {"0", "false", "no"}


@dataclass(frozen=True, order=True)
class BreachRecord:
    company_id: str
    month: int


@dataclass(frozen=True, order=True)
class ProductEdge:
    supplier_id: str
    customer_id: str
    product_type: str


@dataclass(frozen=True)
class Company:
    """A company node with its baseline attributes, rating histories and breaches"""

    id: str
    sector: str
    employee_count: int
    ratings: Mapping[str, Tuple[Tuple[int, float], ...]] = field(default_factory=dict)
    breaches: Tuple[BreachRecord, ...] = ()

    def rating_at(self, rating_name: str, month: int) -> Optional[float]:
        """Latest observation of a rating at or before the given month"""
        series = self.ratings.get(rating_name)
        if not series:
            return None
        months = [m for m, _ in series]
        pos = bisect.bisect_right(months, month)
        if pos == 0:
            return None
        return series[pos - 1][1]

    def breach_count(self, start: int, end: int) -> int:
        """Number of breach records with month in [start, end)"""
        return sum(1 for record in self.breaches if start <= record.month < end)


@dataclass(frozen=True)
class LocalSupplyChain:
    """An entity's third parties, fourth parties and the edges feeding them"""

    entity_id: str
    third_parties: FrozenSet[str]
    fourth_parties: FrozenSet[str]
    third_edges: Tuple[ProductEdge, ...]
    fourth_edges: Tuple[ProductEdge, ...]

    def fourth_suppliers_of(self, third_id: str) -> FrozenSet[str]:
        """Distinct fourth parties with an edge into the given third party"""
        return frozenset(e.supplier_id for e in self.fourth_edges if e.customer_id == third_id)

    def validate(self) -> None:
        """Raise InvariantViolation if the chain breaks any role rule"""
        if self.third_parties & self.fourth_parties:
            raise InvariantViolation(f"{self.entity_id}: third and fourth parties overlap", MODULE)
        if self.entity_id in self.third_parties | self.fourth_parties:
            raise InvariantViolation(f"{self.entity_id}: entity appears among its own suppliers", MODULE)
        if frozenset(e.supplier_id for e in self.third_edges) != self.third_parties:
            raise InvariantViolation(f"{self.entity_id}: third edges disagree with third parties", MODULE)
        if frozenset(e.supplier_id for e in self.fourth_edges) != self.fourth_parties:
            raise InvariantViolation(f"{self.entity_id}: fourth edges disagree with fourth parties", MODULE)
        for edge in self.third_edges:
            if edge.customer_id != self.entity_id:
                raise InvariantViolation(f"{self.entity_id}: third edge {edge} does not end at entity", MODULE)
        for edge in self.fourth_edges:
            if edge.customer_id not in self.third_parties:
                raise InvariantViolation(f"{self.entity_id}: fourth edge {edge} does not end at a third party", MODULE)
        chain = nx.DiGraph()
        chain.add_node(self.entity_id)
        chain.add_edges_from((e.supplier_id, e.customer_id) for e in self.third_edges + self.fourth_edges)
        if not nx.is_directed_acyclic_graph(chain):
            raise InvariantViolation(f"{self.entity_id}: local supply chain has a cycle", MODULE)


class GlobalGraph:
    """Immutable global supply-chain graph induced by the dataset"""

    def __init__(
        self,
        companies: Mapping[str, Company],
        edges: Iterable[ProductEdge],
        entity_ids: Iterable[str],
        window: Tuple[int, int],
    ):
        self._companies = dict(sorted(companies.items()))
        self._edges = tuple(sorted(edges))
        self._entity_ids = frozenset(entity_ids)
        self._window = (int(window[0]), int(window[1]))

        unknown = sorted(self._entity_ids - set(self._companies))
        if unknown:
            raise DataValidationError(f"entity ids not among companies: {', '.join(unknown[:5])}", MODULE)

        graph = nx.MultiDiGraph()
        graph.add_nodes_from(self._companies)
        in_edges: Dict[str, List[ProductEdge]] = {cid: [] for cid in self._companies}
        for edge in self._edges:
            for endpoint in (edge.supplier_id, edge.customer_id):
                if endpoint not in self._companies:
                    raise DataValidationError(f"dangling edge endpoint {endpoint!r} in {edge}", MODULE)
            graph.add_edge(edge.supplier_id, edge.customer_id, key=edge.product_type)
            in_edges[edge.customer_id].append(edge)
        self._graph = nx.freeze(graph)
        self._in_edges = {cid: tuple(edge_list) for cid, edge_list in in_edges.items()}
        self._sectors = frozenset(c.sector for c in self._companies.values())
        self._rating_names = frozenset(name for c in self._companies.values() for name in c.ratings)
        self._product_types = frozenset(e.product_type for e in self._edges)

    @property
    def companies(self) -> Mapping[str, Company]:
        return MappingProxyType(self._companies)

    @property
    def edges(self) -> Tuple[ProductEdge, ...]:
        return self._edges

    @property
    def entity_ids(self) -> FrozenSet[str]:
        return self._entity_ids

    @property
    def window(self) -> Tuple[int, int]:
        return self._window

    @property
    def sectors(self) -> FrozenSet[str]:
        return self._sectors

    @property
    def rating_names(self) -> FrozenSet[str]:
        return self._rating_names

    @property
    def product_types(self) -> FrozenSet[str]:
        return self._product_types

    @property
    def nx_graph(self) -> nx.MultiDiGraph:
        return self._graph

    def company(self, company_id: str) -> Company:
        try:
            return self._companies[company_id]
        except KeyError:
            raise DataValidationError(f"unknown company id {company_id!r}", MODULE)

    def in_edges(self, customer_id: str) -> Tuple[ProductEdge, ...]:
        """Product edges into a company, in canonical order"""
        self.company(customer_id)
        return self._in_edges[customer_id]

    def suppliers_of(self, customer_id: str) -> List[str]:
        self.company(customer_id)
        return sorted(self._graph.predecessors(customer_id))

    def customers_of(self, supplier_id: str) -> List[str]:
        self.company(supplier_id)
        return sorted(self._graph.successors(supplier_id))

    def sorted_entity_ids(self) -> List[str]:
        return sorted(self._entity_ids)

    def __repr__(self) -> str:
        return (f"GlobalGraph(companies={len(self._companies)}, edges={len(self._edges)}, "
                f"entities={len(self._entity_ids)}, window={format_month(self._window[0])}.."
                f"{format_month(self._window[1])})")


def _read_table(source, columns: Sequence[str], name: str) -> pd.DataFrame:
    frame = pd.read_csv(source, dtype=str, keep_default_na=False)
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataValidationError(f"{name}: missing columns {', '.join(missing)}", MODULE, line=1)
    return frame[list(columns)]


def _parse_int(text: str, what: str, line: int) -> int:
    try:
        value = int(str(text).strip())
    except ValueError:
        raise DataValidationError(f"{what} must be an integer, got {text!r}", MODULE, line)
    return value


def _parse_float(text: str, what: str, line: int) -> float:
    try:
        value = float(str(text).strip())
    except ValueError:
        raise DataValidationError(f"{what} must be a number, got {text!r}", MODULE, line)
    if not math.isfinite(value):
        raise DataValidationError(f"{what} must be finite, got {text!r}", MODULE, line)
    return value


def load_graph(nodes_source, edges_source, breaches_source, ratings_source=None,
               window: Optional[Tuple[int, int]] = None) -> GlobalGraph:
    """Load and validate the global graph from the tabular sources.

    Sources are paths or open text streams in the documented CSV formats.
    Row numbers in errors are file line numbers (the header is line 1).
    When no observation window is declared, it spans every rating and
    breach month in the data.
    """
    companies_frame = _read_table(nodes_source, COMPANY_COLUMNS, "companies")
    base: Dict[str, dict] = {}
    entity_ids = set()
    for line, row in enumerate(companies_frame.itertuples(index=False), start=2):
        company_id = row.id.strip()
        if not company_id:
            raise DataValidationError("empty company id", MODULE, line)
        if company_id in base:
            raise DataValidationError(f"duplicate company id {company_id!r}", MODULE, line)
        sector = row.sector.strip()
        if not sector:
            raise DataValidationError(f"company {company_id!r} has no sector", MODULE, line)
        employees = _parse_int(row.employee_count, "employee_count", line)
        if employees < 0:
            raise DataValidationError(f"employee_count must be >= 0, got {employees}", MODULE, line)
        flag = row.is_entity.strip().lower()
        if flag not in _TRUE | _FALSE:
            raise DataValidationError(f"is_entity must be 0/1, got {row.is_entity!r}", MODULE, line)
        if flag in _TRUE:
            entity_ids.add(company_id)
        base[company_id] = {"sector": sector, "employee_count": employees}

    series: Dict[str, Dict[str, Dict[int, float]]] = {cid: {} for cid in base}
    months_seen: List[int] = []
    if ratings_source is not None:
        ratings_frame = _read_table(ratings_source, RATING_COLUMNS, "ratings")
        for line, row in enumerate(ratings_frame.itertuples(index=False), start=2):
            company_id = row.id.strip()
            if company_id not in base:
                raise DataValidationError(f"rating for unknown company {company_id!r}", MODULE, line)
            month = parse_month(row.month, line, MODULE)
            name = row.rating_name.strip()
            if not name:
                raise DataValidationError("empty rating_name", MODULE, line)
            value = _parse_float(row.value, "rating value", line)
            if not RATING_MIN <= value <= RATING_MAX:
                raise DataValidationError(
                    f"rating value {value} outside [{RATING_MIN:.0f}, {RATING_MAX:.0f}]", MODULE, line)
            by_month = series[company_id].setdefault(name, {})
            if month in by_month:
                raise DataValidationError(
                    f"duplicate {name} rating for {company_id!r} in {format_month(month)}", MODULE, line)
            by_month[month] = value
            months_seen.append(month)

    edges = set()
    edges_frame = _read_table(edges_source, EDGE_COLUMNS, "edges")
    for line, row in enumerate(edges_frame.itertuples(index=False), start=2):
        edge = ProductEdge(row.supplier_id.strip(), row.customer_id.strip(), row.product_type.strip())
        for endpoint in (edge.supplier_id, edge.customer_id):
            if endpoint not in base:
                raise DataValidationError(f"dangling edge endpoint {endpoint!r}", MODULE, line)
        if edge.supplier_id == edge.customer_id:
            raise DataValidationError(f"self edge on {edge.supplier_id!r}", MODULE, line)
        if not edge.product_type:
            raise DataValidationError("empty product_type", MODULE, line)
        if edge in edges:
            raise DataValidationError(f"duplicate product edge {edge}", MODULE, line)
        edges.add(edge)

    breaches: Dict[str, List[BreachRecord]] = {cid: [] for cid in base}
    breaches_frame = _read_table(breaches_source, BREACH_COLUMNS, "breaches")
    parsed_breaches = []
    for line, row in enumerate(breaches_frame.itertuples(index=False), start=2):
        company_id = row.id.strip()
        if company_id not in base:
            raise DataValidationError(f"breach for unknown company {company_id!r}", MODULE, line)
        month = parse_month(row.month, line, MODULE)
        parsed_breaches.append((line, BreachRecord(company_id, month)))
        months_seen.append(month)

    if window is None:
        window = (min(months_seen), max(months_seen) + 1) if months_seen else (0, 0)
    start, end = window
    if start > end:
        raise DataValidationError(f"inverted observation window {window}", MODULE)
    for line, record in parsed_breaches:
        if not start <= record.month < end:
            raise DataValidationError(
                f"breach month {format_month(record.month)} outside observation window", MODULE, line)
        breaches[record.company_id].append(record)

    companies = {
        cid: Company(
            id=cid,
            sector=attrs["sector"],
            employee_count=attrs["employee_count"],
            ratings={
                name: tuple(sorted(by_month.items())) for name, by_month in sorted(series[cid].items())
            },
            breaches=tuple(sorted(breaches[cid])),
        )
        for cid, attrs in base.items()
    }
    graph = GlobalGraph(companies, edges, entity_ids, window)
    logger.info(f"Loaded {graph!r}")
    return graph


def extract_local_chain(graph: GlobalGraph, entity_id: str) -> LocalSupplyChain:
    """Third parties supply the entity directly; fourth parties supply a third party only.

    A supplier reachable both ways counts as a third party, and edges back
    into the entity are dropped, so the chain is acyclic.
    """
    if entity_id not in graph.entity_ids:
        raise DataValidationError(f"unknown entity id {entity_id!r}", MODULE)
    third_edges = graph.in_edges(entity_id)
    third_parties = frozenset(e.supplier_id for e in third_edges)
    fourth_edges = []
    for third_id in sorted(third_parties):
        for edge in graph.in_edges(third_id):
            if edge.supplier_id == entity_id or edge.supplier_id in third_parties:
                continue
            fourth_edges.append(edge)
    fourth_parties = frozenset(e.supplier_id for e in fourth_edges)
    return LocalSupplyChain(entity_id, third_parties, fourth_parties, tuple(third_edges), tuple(fourth_edges))


def supplier_degree(graph: GlobalGraph, supplier_id: str) -> int:
    """Number of distinct customers a supplier serves"""
    graph.company(supplier_id)
    return sum(1 for _ in graph.nx_graph.successors(supplier_id))


class Cohort(str, Enum):
    ALL = "All"
    SERVED_BY_TOP_DECILE = "ServedByTopDecileSuppliers"
    SERVED_BY_BOTTOM_DECILE = "ServedByBottomDecileSuppliers"


@dataclass(frozen=True)
class DegreeSummary:
    cohort: str
    count: int
    median: float
    q25: float
    q75: float
    mean: float
    minimum: float
    maximum: float
    p_value_vs_all: Optional[float] = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def nearest_rank(sorted_values: Sequence[float], q: float) -> float:
    """Nearest-rank quantile of an ascending sequence"""
    n = len(sorted_values)
    rank = max(1, math.ceil(q * n))
    return sorted_values[min(rank, n) - 1]


def entity_degree(graph: GlobalGraph, entity_id: str) -> int:
    """Number of distinct suppliers of an entity"""
    return len(graph.suppliers_of(entity_id))


def cohort_degrees(graph: GlobalGraph) -> Dict[str, List[int]]:
    """Entity degrees for every cohort.

    Suppliers are the companies with at least one edge into an entity. The
    decile boundaries are nearest-rank values of their degrees, and every
    supplier at the boundary value belongs to the cohort.
    """
    suppliers = sorted({e.supplier_id for e in graph.edges if e.customer_id in graph.entity_ids})
    if len(suppliers) < 10:
        raise DataValidationError(f"need at least 10 suppliers for decile cohorts, found {len(suppliers)}", MODULE)
    degrees = {sid: supplier_degree(graph, sid) for sid in suppliers}
    ordered = sorted(degrees.values())
    top = nearest_rank(ordered, 0.9)
    bottom = nearest_rank(ordered, 0.1)
    logger.debug(f"Supplier degree deciles: bottom <= {bottom}, top >= {top}")

    served = {Cohort.SERVED_BY_TOP_DECILE: set(), Cohort.SERVED_BY_BOTTOM_DECILE: set()}
    for sid, degree in degrees.items():
        customers = [c for c in graph.customers_of(sid) if c in graph.entity_ids]
        if degree >= top:
            served[Cohort.SERVED_BY_TOP_DECILE].update(customers)
        if degree <= bottom:
            served[Cohort.SERVED_BY_BOTTOM_DECILE].update(customers)

    entity_ids = graph.sorted_entity_ids()
    all_degrees = {eid: entity_degree(graph, eid) for eid in entity_ids}
    result = {Cohort.ALL.value: [all_degrees[eid] for eid in entity_ids]}
    for cohort, members in served.items():
        result[cohort.value] = [all_degrees[eid] for eid in entity_ids if eid in members]
    return result


def _summarize(cohort: Cohort, members: np.ndarray, all_degrees: np.ndarray) -> DegreeSummary:
    if members.size == 0:
        return DegreeSummary(cohort.value, 0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    p_value = None
    if cohort is not Cohort.ALL and members.size > 1 and all_degrees.size > 1:
        with np.errstate(all="ignore"):
            result = stats.ttest_ind(members, all_degrees, equal_var=False)
        if np.isfinite(result.pvalue):
            p_value = float(result.pvalue)
    q25, q75 = np.percentile(members, [25, 75])
    return DegreeSummary(
        cohort=cohort.value,
        count=int(members.size),
        median=float(np.median(members)),
        q25=float(q25),
        q75=float(q75),
        mean=float(members.mean()),
        minimum=float(members.min()),
        maximum=float(members.max()),
        p_value_vs_all=p_value,
    )


def degree_cohort_stats(graph: GlobalGraph, cohort: Cohort) -> DegreeSummary:
    """Entity degree distribution for all entities or those served by top/bottom decile suppliers"""
    cohort = Cohort(cohort)
    degrees = cohort_degrees(graph)
    return _summarize(cohort,
                      np.asarray(degrees[cohort.value], dtype=float),
                      np.asarray(degrees[Cohort.ALL.value], dtype=float))


def degree_cohort_table(graph: GlobalGraph) -> pd.DataFrame:
    """All three cohort summaries as one table"""
    degrees = cohort_degrees(graph)
    all_degrees = np.asarray(degrees[Cohort.ALL.value], dtype=float)
    rows = [_summarize(c, np.asarray(degrees[c.value], dtype=float), all_degrees).as_dict() for c in Cohort]
    return pd.DataFrame(rows)
