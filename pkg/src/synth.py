"""
Synthetic supply-chain datasets for exercising the full pipeline.

The generator draws entities, a three-role supplier population (near-universal
hubs, power-law mainstream suppliers and low-degree niche suppliers that only
serve the most connected entities), fourth parties, product edges, monthly
ratings driven by a latent vulnerability, and breach records from a logistic
model whose supply-chain terms are switched by the signal weights.
"""

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.special import expit

from errors import DataValidationError
from graph_core import (BREACH_COLUMNS, COMPANY_COLUMNS, EDGE_COLUMNS, RATING_COLUMNS, RATING_MAX, RATING_MIN,
                        Cohort, GlobalGraph, cohort_degrees, entity_degree)
from utils import PathLike, format_month, parse_month, save_csv

logger = logging.getLogger(__name__)

MODULE = "synth"

ENTITY_TERMS = ("employee", "sector", "rating")
SUPPLY_CHAIN_TERMS = ("exposure", "vulnerable_suppliers", "sector_suppliers", "risky_products", "supplier_breaches")

DEFAULT_PRODUCTS = (
    "server_technologies", "dns_services", "payment_processing", "cloud_hosting", "email_services",
    "content_delivery", "web_analytics", "crm", "erp", "hr_software", "ssl_certificates", "ad_networks",
    "collaboration", "video_conferencing", "backup_storage", "identity_management", "endpoint_security",
    "payroll", "ecommerce_platform", "ticketing", "marketing_automation", "data_warehousing", "vpn", "telephony",
)

DATASET_FILES = {"companies": "companies.csv", "ratings": "ratings.csv", "edges": "edges.csv",
                 "breaches": "breaches.csv"}

# Aggregates of the real dataset, reported next to generated values for reference only.
PUBLISHED_REFERENCE = {
    "sector_share_Healthcare": 21093 / 38345,
    "sector_share_OilGas": 9282 / 38345,
    "sector_share_Retail": 7970 / 38345,
    "breach_share_overall": 0.0329,
    "breach_share_year_1": 0.0100,
    "breach_share_year_2": 0.0155,
    "breach_share_year_3": 0.0137,
    "third_parties": 4875 / 10,
    "fourth_parties": 5365 / 10,
    "entity_degree_median": 13.0,
    "degree_median_ServedByTopDecileSuppliers": 14.0,
    "degree_median_ServedByBottomDecileSuppliers": 131.0,
    "edges_third_to_entity": 600000.0,
    "edges_fourth_to_third": 8000000.0,
}


def _default_signal_weights() -> Dict[str, float]:
    return {
        "employee": 0.7, "sector": 1.0, "rating": 0.5,
        "exposure": 0.6, "vulnerable_suppliers": 0.5, "sector_suppliers": 0.4,
        "risky_products": 0.4, "supplier_breaches": 0.4,
    }


@dataclass(frozen=True)
class SynthConfig:
    """Generator parameters; defaults are scaled 1:10 from the real dataset"""

    n_entities: int = 3834
    n_third: int = 488
    n_fourth: int = 536
    sector_mix: Mapping[str, float] = field(
        default_factory=lambda: {"Healthcare": 0.55, "OilGas": 0.24, "Retail": 0.21})
    sector_effects: Mapping[str, float] = field(
        default_factory=lambda: {"Healthcare": 0.6, "OilGas": -0.5, "Retail": 0.0})
    supplier_sector_mix: Mapping[str, float] = field(default_factory=lambda: {
        "Technology": 0.40, "Manufacturing": 0.20, "Legal": 0.10, "HealthcareAndWellness": 0.15,
        "BusinessServices": 0.15})
    signal_sector: str = "HealthcareAndWellness"
    rating_names: Tuple[str, ...] = ("patching_cadence", "spf", "spam_propagation", "open_ports",
                                     "tls_ssl_certificates", "desktop_software")
    product_types: Tuple[str, ...] = DEFAULT_PRODUCTS
    hub_fraction: float = 0.01
    hub_coverage: float = 0.9
    niche_fraction: float = 0.2
    niche_target_fraction: float = 0.02
    power_law_exponent: float = 2.1
    degree_cap: float = 40.0
    min_mainstream_degree: int = 3
    median_entity_degree: float = 10.0
    entity_degree_sigma: float = 1.0
    fourth_per_third: float = 3.0
    third_to_third_rate: float = 0.3
    second_product_rate: float = 0.15
    rating_missing_rate: float = 0.05
    vulnerable_threshold: float = 1.0
    base_breach_rate: float = 0.0137
    history_breach_rates: Tuple[float, ...] = (0.0100, 0.0155)
    supplier_breach_rate: float = 0.0137
    signal_weights: Mapping[str, float] = field(default_factory=_default_signal_weights)
    start_month: str = "2017-05"
    label_months: int = 12
    seed: int = 42

    def __post_init__(self):
        for name in ("n_entities", "n_third", "n_fourth", "min_mainstream_degree", "label_months"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise DataValidationError(f"{name} must be a non-negative integer, got {value}", MODULE)
        for name in ("sector_mix", "supplier_sector_mix"):
            mix = getattr(self, name)
            if not mix or any(p < 0 for p in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
                raise DataValidationError(f"{name} proportions must be non-negative and sum to 1", MODULE)
        rates = {"base_breach_rate": self.base_breach_rate, "supplier_breach_rate": self.supplier_breach_rate}
        rates.update({f"history_breach_rates[{i}]": r for i, r in enumerate(self.history_breach_rates)})
        for name, rate in rates.items():
            if not 0.0 < rate < 1.0:
                raise DataValidationError(f"{name} must lie in (0, 1), got {rate}", MODULE)
        for name in ("hub_fraction", "niche_fraction", "hub_coverage", "niche_target_fraction",
                     "third_to_third_rate", "second_product_rate", "rating_missing_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DataValidationError(f"{name} must lie in [0, 1], got {getattr(self, name)}", MODULE)
        if self.hub_fraction + self.niche_fraction >= 1.0:
            raise DataValidationError(
                f"infeasible config: hub_fraction {self.hub_fraction} and niche_fraction {self.niche_fraction} "
                "leave no mainstream suppliers under the degree cap", MODULE)
        if self.power_law_exponent <= 1.0 or self.degree_cap < 1.0:
            raise DataValidationError("power_law_exponent must exceed 1 and degree_cap must be at least 1", MODULE)
        if self.n_entities > 0 and self.n_third > 0 and self.n_mainstream < 1:
            raise DataValidationError("infeasible config: no mainstream third parties", MODULE)
        unknown = sorted(set(self.signal_weights) - set(ENTITY_TERMS + SUPPLY_CHAIN_TERMS))
        if unknown:
            raise DataValidationError(f"unknown signal weights: {', '.join(unknown)}", MODULE)
        if set(self.sector_effects) - set(self.sector_mix):
            raise DataValidationError("sector_effects names a sector outside sector_mix", MODULE)
        if not self.product_types or len(set(self.product_types)) != len(self.product_types):
            raise DataValidationError("product_types must be non-empty and unique", MODULE)
        parse_month(self.start_month, module=MODULE)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "SynthConfig":
        """Build from keys named like the fields; unknown keys are rejected"""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise DataValidationError(f"unknown synth settings: {', '.join(unknown)}", MODULE)
        values = dict(values)
        for name in ("rating_names", "product_types", "history_breach_rates"):
            if name in values:
                values[name] = tuple(values[name])
        if "signal_weights" in values:
            values["signal_weights"] = {**_default_signal_weights(), **values["signal_weights"]}
        return cls(**values)

    def with_supply_chain_signal(self, scale: float) -> "SynthConfig":
        """Same config with every supply-chain weight multiplied by scale"""
        weights = {k: (v * scale if k in SUPPLY_CHAIN_TERMS else v) for k, v in self.signal_weights.items()}
        return SynthConfig.from_mapping({**{f.name: getattr(self, f.name) for f in fields(self)},
                                         "signal_weights": weights})

    @property
    def n_hubs(self) -> int:
        return int(round(self.hub_fraction * self.n_third))

    @property
    def n_niche(self) -> int:
        return int(round(self.niche_fraction * self.n_third))

    @property
    def n_mainstream(self) -> int:
        return self.n_third - self.n_hubs - self.n_niche

    @property
    def window(self) -> Tuple[int, int]:
        start = parse_month(self.start_month, module=MODULE)
        return start, start + 12 * len(self.history_breach_rates) + self.label_months

    @property
    def history_window(self) -> Tuple[int, int]:
        start = self.window[0]
        return start, start + 12 * len(self.history_breach_rates)

    @property
    def label_window(self) -> Tuple[int, int]:
        return self.history_window[1], self.window[1]


@dataclass
class SynthDataset:
    """Generated tables plus the generator's own latent quantities"""

    config: SynthConfig
    companies: pd.DataFrame
    ratings: pd.DataFrame
    edges: pd.DataFrame
    breaches: pd.DataFrame
    signal_terms: pd.DataFrame
    intercepts: Dict[str, float]

    @property
    def label_probability(self) -> np.ndarray:
        return label_probabilities(self.signal_terms, self.config.signal_weights, self.intercepts["label"])


def signal_values(terms: pd.DataFrame, weights: Mapping[str, float]) -> np.ndarray:
    total = np.zeros(len(terms), dtype=float)
    for name in ENTITY_TERMS + SUPPLY_CHAIN_TERMS:
        total += float(weights.get(name, 0.0)) * terms[name].to_numpy(dtype=float)
    return total


def label_probabilities(terms: pd.DataFrame, weights: Mapping[str, float], intercept: float) -> np.ndarray:
    """Breach probability of every entity under the generator's logistic model.

    With the intercept held fixed, the mean probability rises strictly with
    any supply-chain weight whose term is positive for some entity. Generation
    recalibrates the intercept per weight setting, which pins the mean to the
    target rate instead.
    """
    return expit(intercept + signal_values(terms, weights))


def calibrate_intercept(signal: np.ndarray, rate: float) -> float:
    """Intercept that makes the mean logistic probability equal the target rate"""
    if signal.size == 0:
        return math.log(rate / (1.0 - rate))
    lo = -40.0 - float(signal.max())
    hi = 40.0 - float(signal.min())
    return float(optimize.brentq(lambda a: float(expit(a + signal).mean()) - rate, lo, hi, xtol=1e-12))


class SupplyChainGenerator:
    """Draws one synthetic dataset from a single seeded generator, in a fixed order"""

    def __init__(self, config: SynthConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)

    def generate(self) -> SynthDataset:
        cfg = self.config
        logger.info(f"Generating synthetic dataset: {cfg.n_entities} entities, {cfg.n_third} third parties, "
                    f"{cfg.n_fourth} fourth parties (seed {cfg.seed})")
        if cfg.n_entities == 0:
            return self._empty()
        companies = self._generate_companies()
        vulnerability = self.rng.standard_normal(len(companies))
        edges, entity_pairs = self._generate_edges(companies)
        ratings = self._generate_ratings(companies, vulnerability)
        supplier_breaches = self._generate_supplier_breaches(companies, vulnerability)
        terms = self._signal_terms(companies, vulnerability, edges, supplier_breaches)
        entity_breaches, intercepts = self._generate_entity_breaches(terms)
        breaches = pd.concat([supplier_breaches, entity_breaches], ignore_index=True)
        breaches = breaches.sort_values(["id", "month"], kind="mergesort").reset_index(drop=True)
        logger.info(f"Generated {len(edges)} product edges, {len(ratings)} rating rows, {len(breaches)} breaches")
        return SynthDataset(cfg, companies, ratings, edges, breaches, terms, intercepts)

    def _empty(self) -> SynthDataset:
        cfg = self.config
        terms = pd.DataFrame(columns=["entity_id", *ENTITY_TERMS, *SUPPLY_CHAIN_TERMS])
        intercepts = {"label": calibrate_intercept(np.zeros(0), cfg.base_breach_rate)}
        return SynthDataset(cfg, pd.DataFrame(columns=COMPANY_COLUMNS), pd.DataFrame(columns=RATING_COLUMNS),
                            pd.DataFrame(columns=EDGE_COLUMNS), pd.DataFrame(columns=BREACH_COLUMNS),
                            terms, intercepts)

    def _generate_companies(self) -> pd.DataFrame:
        cfg = self.config
        sectors = list(cfg.sector_mix)
        supplier_sectors = list(cfg.supplier_sector_mix)
        entity_sector = self.rng.choice(sectors, size=cfg.n_entities, p=[cfg.sector_mix[s] for s in sectors])
        n_suppliers = cfg.n_third + cfg.n_fourth
        supplier_sector = self.rng.choice(supplier_sectors, size=n_suppliers,
                                          p=[cfg.supplier_sector_mix[s] for s in supplier_sectors])
        entity_employees = np.rint(self.rng.lognormal(math.log(300.0), 1.6, cfg.n_entities))
        supplier_employees = np.rint(self.rng.lognormal(math.log(200.0), 1.8, n_suppliers))
        frame = pd.DataFrame({
            "id": ([f"E{i:05d}" for i in range(1, cfg.n_entities + 1)]
                   + [f"T{i:04d}" for i in range(1, cfg.n_third + 1)]
                   + [f"F{i:04d}" for i in range(1, cfg.n_fourth + 1)]),
            "sector": list(entity_sector) + list(supplier_sector),
            "employee_count": np.concatenate([entity_employees, supplier_employees]).astype(int),
            "is_entity": [1] * cfg.n_entities + [0] * n_suppliers,
            "role": ["entity"] * cfg.n_entities + ["third"] * cfg.n_third + ["fourth"] * cfg.n_fourth,
        })
        return frame

    def _pareto_weights(self, n: int) -> np.ndarray:
        cfg = self.config
        u = self.rng.random(n)
        weights = np.minimum((1.0 - u) ** (-1.0 / (cfg.power_law_exponent - 1.0)), cfg.degree_cap)
        return weights / weights.sum()

    def _generate_edges(self, companies: pd.DataFrame) -> Tuple[pd.DataFrame, List[Tuple[str, str]]]:
        cfg = self.config
        rng = self.rng
        entity_ids = list(companies.loc[companies.role == "entity", "id"])
        third_ids = list(companies.loc[companies.role == "third", "id"])
        fourth_ids = list(companies.loc[companies.role == "fourth", "id"])
        n_e = len(entity_ids)

        roles = rng.permutation(len(third_ids))
        hubs = [third_ids[i] for i in sorted(roles[:cfg.n_hubs])]
        niche = [third_ids[i] for i in sorted(roles[cfg.n_hubs:cfg.n_hubs + cfg.n_niche])]
        mainstream = [third_ids[i] for i in sorted(roles[cfg.n_hubs + cfg.n_niche:])]

        target = np.maximum(1, np.rint(rng.lognormal(math.log(cfg.median_entity_degree),
                                                     cfg.entity_degree_sigma, n_e))).astype(int)
        served: Dict[str, set] = {eid: set() for eid in entity_ids}
        for hub in hubs:
            covered = rng.random(n_e) < cfg.hub_coverage
            for i in np.flatnonzero(covered):
                served[entity_ids[i]].add(hub)

        if mainstream:
            p = self._pareto_weights(len(mainstream))
            for i, eid in enumerate(entity_ids):
                k = int(min(max(target[i] - len(served[eid]), 1), len(mainstream)))
                for j in rng.choice(len(mainstream), size=k, replace=False, p=p):
                    served[eid].add(mainstream[j])
            customers: Dict[str, set] = {sid: set() for sid in mainstream}
            for eid in entity_ids:
                for sid in served[eid]:
                    if sid in customers:
                        customers[sid].add(eid)
            for sid in mainstream:
                short = cfg.min_mainstream_degree - len(customers[sid])
                if short <= 0:
                    continue
                candidates = [eid for eid in entity_ids if eid not in customers[sid]]
                for j in rng.choice(len(candidates), size=min(short, len(candidates)), replace=False):
                    served[candidates[j]].add(sid)

        # niche suppliers serve only the entities with the largest target degree
        n_top = max(1, math.ceil(cfg.niche_target_fraction * n_e))
        top = [entity_ids[i] for i in np.lexsort((np.arange(n_e), -target))[:n_top]]
        for sid in niche:
            d = int(min(rng.integers(1, 3), len(top)))
            for j in rng.choice(len(top), size=d, replace=False):
                served[top[j]].add(sid)

        pairs = [(sid, eid) for eid in entity_ids for sid in sorted(served[eid])]
        entity_pairs = list(pairs)

        # third parties supplying other third parties follow a random order, so the graph stays acyclic
        suppliers_of_thirds = hubs + mainstream
        order = {sid: pos for pos, sid in enumerate(rng.permutation(third_ids))}
        for sid in suppliers_of_thirds:
            if rng.random() >= cfg.third_to_third_rate:
                continue
            lower = sorted((t for t in third_ids if order[t] < order[sid]), key=lambda t: order[t])
            if not lower:
                continue
            for j in rng.choice(len(lower), size=min(int(rng.integers(1, 3)), len(lower)), replace=False):
                pairs.append((sid, lower[j]))

        if fourth_ids:
            q = self._pareto_weights(len(fourth_ids))
            for tid in third_ids:
                k = int(min(1 + rng.poisson(cfg.fourth_per_third), len(fourth_ids)))
                for j in rng.choice(len(fourth_ids), size=k, replace=False, p=q):
                    pairs.append((fourth_ids[j], tid))

        products = list(cfg.product_types)
        popularity = 1.0 / np.arange(1, len(products) + 1)
        popularity /= popularity.sum()
        first = rng.choice(len(products), size=len(pairs), p=popularity)
        extra = rng.random(len(pairs)) < cfg.second_product_rate
        second = rng.choice(len(products), size=len(pairs), p=popularity)
        rows = []
        for (supplier, customer), a, has_extra, b in zip(pairs, first, extra, second):
            rows.append((supplier, customer, products[a]))
            if has_extra and b != a:
                rows.append((supplier, customer, products[b]))
        self.product_risk = dict(zip(products, rng.standard_normal(len(products))))
        edges = pd.DataFrame(rows, columns=EDGE_COLUMNS)
        edges = edges.sort_values(EDGE_COLUMNS, kind="mergesort").reset_index(drop=True)
        logger.debug(f"{len(hubs)} hubs, {len(mainstream)} mainstream, {len(niche)} niche third parties; "
                     f"niche suppliers serve the top {n_top} entities")
        return edges, entity_pairs

    def _generate_ratings(self, companies: pd.DataFrame, vulnerability: np.ndarray) -> pd.DataFrame:
        cfg = self.config
        rng = self.rng
        n_c, n_r = len(companies), len(cfg.rating_names)
        start, end = cfg.history_window
        months = np.arange(start, end)
        loading = rng.uniform(0.5, 1.0, n_r)
        offset = rng.normal(0.0, 30.0, (n_c, n_r))
        noise = rng.normal(0.0, 15.0, (n_c, n_r, len(months)))
        present = rng.random((n_c, n_r)) >= cfg.rating_missing_rate
        values = 640.0 - 70.0 * loading[None, :, None] * vulnerability[:, None, None] + offset[:, :, None] + noise
        values = np.clip(np.rint(values), RATING_MIN, RATING_MAX)
        ci, ri, mi = np.nonzero(np.broadcast_to(present[:, :, None], values.shape))
        ids = companies["id"].to_numpy()
        frame = pd.DataFrame({
            "id": ids[ci],
            "month": [format_month(m) for m in months[mi]],
            "rating_name": np.asarray(cfg.rating_names)[ri],
            "value": values[ci, ri, mi],
        })
        return frame.sort_values(["id", "month", "rating_name"], kind="mergesort").reset_index(drop=True)

    def _year_months(self, year: int, n: int) -> np.ndarray:
        start = self.config.window[0] + 12 * year
        length = 12 if year < len(self.config.history_breach_rates) else self.config.label_months
        return start + self.rng.integers(0, max(length, 1), n)

    def _generate_supplier_breaches(self, companies: pd.DataFrame, vulnerability: np.ndarray) -> pd.DataFrame:
        cfg = self.config
        is_supplier = (companies.role != "entity").to_numpy()
        if not is_supplier.any():
            return pd.DataFrame(columns=BREACH_COLUMNS)
        ids = companies.loc[is_supplier, "id"].to_numpy()
        employees = np.log1p(companies.loc[is_supplier, "employee_count"].to_numpy(dtype=float))
        signal = (cfg.signal_weights.get("employee", 0.0) * _zscore(employees)
                  + cfg.signal_weights.get("rating", 0.0) * vulnerability[is_supplier])
        intercept = calibrate_intercept(signal, cfg.supplier_breach_rate)
        probability = expit(intercept + signal)
        rows = []
        for year in range(len(cfg.history_breach_rates) + 1):
            hit = self.rng.random(len(ids)) < probability
            months = self._year_months(year, len(ids))
            rows.extend((ids[i], format_month(months[i])) for i in np.flatnonzero(hit))
        return pd.DataFrame(rows, columns=BREACH_COLUMNS)

    def _signal_terms(self, companies: pd.DataFrame, vulnerability: np.ndarray, edges: pd.DataFrame,
                      supplier_breaches: pd.DataFrame) -> pd.DataFrame:
        cfg = self.config
        index = {cid: i for i, cid in enumerate(companies["id"])}
        sector = dict(zip(companies["id"], companies["sector"]))
        history_end = format_month(cfg.history_window[1])
        history_breaches = supplier_breaches.loc[supplier_breaches.month < history_end, "id"].value_counts()
        products = sorted(self.product_risk, key=lambda p: (-self.product_risk[p], p))
        risky = set(products[:math.ceil(len(products) / 4)])

        into: Dict[str, List[Tuple[str, str]]] = {}
        for supplier, customer, product in edges.itertuples(index=False):
            into.setdefault(customer, []).append((supplier, product))

        entities = companies.loc[companies.role == "entity"]
        rows = []
        for eid in entities["id"]:
            incoming = into.get(eid, [])
            third = {s for s, _ in incoming}
            fourth = {s for t in third for s, _ in into.get(t, []) if s != eid and s not in third}
            rows.append({
                "entity_id": eid,
                "exposure": math.log1p(len(third | fourth)),
                "vulnerable_suppliers": math.log1p(
                    sum(1 for t in third if vulnerability[index[t]] > cfg.vulnerable_threshold)),
                "sector_suppliers": math.log1p(sum(1 for t in third if sector[t] == cfg.signal_sector)),
                "risky_products": math.log1p(sum(1 for _, p in incoming if p in risky)),
                "supplier_breaches": math.log1p(sum(int(history_breaches.get(t, 0)) for t in third)),
            })
        terms = pd.DataFrame(rows)
        terms["employee"] = _zscore(np.log1p(entities["employee_count"].to_numpy(dtype=float)))
        terms["sector"] = [cfg.sector_effects.get(s, 0.0) for s in entities["sector"]]
        terms["rating"] = vulnerability[(companies.role == "entity").to_numpy()]
        return terms[["entity_id", *ENTITY_TERMS, *SUPPLY_CHAIN_TERMS]]

    def _generate_entity_breaches(self, terms: pd.DataFrame) -> Tuple[pd.DataFrame, Dict[str, float]]:
        cfg = self.config
        signal = signal_values(terms, cfg.signal_weights)
        ids = terms["entity_id"].to_numpy()
        rates = list(cfg.history_breach_rates) + [cfg.base_breach_rate]
        intercepts: Dict[str, float] = {}
        rows = []
        for year, rate in enumerate(rates):
            name = "label" if year == len(rates) - 1 else f"history_year_{year + 1}"
            intercepts[name] = calibrate_intercept(signal, rate)
            hit = self.rng.random(len(ids)) < expit(intercepts[name] + signal)
            months = self._year_months(year, len(ids))
            rows.extend((ids[i], format_month(months[i])) for i in np.flatnonzero(hit))
        return pd.DataFrame(rows, columns=BREACH_COLUMNS), intercepts


def _zscore(values: np.ndarray) -> np.ndarray:
    sd = float(values.std()) if values.size else 0.0
    if sd == 0.0:
        return np.zeros_like(values, dtype=float)
    return (values - values.mean()) / sd


def generate(config: SynthConfig) -> SynthDataset:
    return SupplyChainGenerator(config).generate()


def write_dataset(dataset: SynthDataset, out_dir: PathLike) -> Dict[str, Path]:
    """Write the four input tables in the formats load_graph reads"""
    out_dir = Path(out_dir)
    tables = {
        "companies": dataset.companies.reindex(columns=COMPANY_COLUMNS),
        "ratings": dataset.ratings.reindex(columns=RATING_COLUMNS),
        "edges": dataset.edges.reindex(columns=EDGE_COLUMNS),
        "breaches": dataset.breaches.reindex(columns=BREACH_COLUMNS),
    }
    return {name: save_csv(frame, out_dir / DATASET_FILES[name]) for name, frame in tables.items()}


def _role_counts(graph: GlobalGraph) -> Tuple[int, int, int, int]:
    entities = graph.entity_ids
    third = {e.supplier_id for e in graph.edges if e.customer_id in entities}
    fourth = {e.supplier_id for e in graph.edges if e.customer_id in third} - third - entities
    n_third_edges = sum(1 for e in graph.edges if e.customer_id in entities)
    n_fourth_edges = sum(1 for e in graph.edges if e.customer_id in third and e.supplier_id not in entities)
    return len(third), len(fourth), n_third_edges, n_fourth_edges


def statistics_report(graph: GlobalGraph, sectors: Optional[Tuple[str, ...]] = None) -> pd.DataFrame:
    """Generated aggregates next to the real dataset's published values (reference only)"""
    entity_ids = graph.sorted_entity_ids()
    n = len(entity_ids)
    sectors = tuple(sectors) if sectors else ("Healthcare", "OilGas", "Retail")
    generated: Dict[str, float] = {"entities": float(n)}
    for s in sectors:
        generated[f"sector_share_{s}"] = (sum(1 for e in entity_ids if graph.company(e).sector == s) / n) if n else 0.0

    start, end = graph.window
    generated["breach_share_overall"] = (
        sum(1 for e in entity_ids if graph.company(e).breach_count(start, end) > 0) / n) if n else 0.0
    n_years = max(0, min(3, math.ceil((end - start) / 12)))
    for year in range(3):
        lo, hi = start + 12 * year, min(start + 12 * (year + 1), end)
        share = 0.0
        if n and year < n_years:
            share = sum(1 for e in entity_ids if graph.company(e).breach_count(lo, hi) > 0) / n
        generated[f"breach_share_year_{year + 1}"] = share

    n_third, n_fourth, third_edges, fourth_edges = _role_counts(graph)
    generated["third_parties"] = float(n_third)
    generated["fourth_parties"] = float(n_fourth)
    generated["entity_degree_median"] = float(np.median([entity_degree(graph, e) for e in entity_ids])) if n else 0.0
    try:
        degrees = cohort_degrees(graph)
    except DataValidationError:
        degrees = {}
    for cohort in (Cohort.SERVED_BY_TOP_DECILE, Cohort.SERVED_BY_BOTTOM_DECILE):
        members = degrees.get(cohort.value, [])
        generated[f"degree_median_{cohort.value}"] = float(np.median(members)) if members else 0.0
    generated["edges_third_to_entity"] = float(third_edges)
    generated["edges_fourth_to_third"] = float(fourth_edges)

    rows = [{"metric": name, "generated": value, "published_reference": PUBLISHED_REFERENCE.get(name, math.nan),
             "note": "reference-only" if name in PUBLISHED_REFERENCE else ""}
            for name, value in generated.items()]
    return pd.DataFrame(rows, columns=["metric", "generated", "published_reference", "note"])
