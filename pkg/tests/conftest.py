"""
Shared fixtures: a small synthetic supply chain loaded through the CSV path
"""

import sys
import os

import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from features import FeatureCatalog, ModelingDataset
from graph_core import load_graph
from synth import DATASET_FILES, SynthConfig, generate, write_dataset

SMALL_SYNTH = dict(
    n_entities=400,
    n_third=150,
    n_fourth=80,
    base_breach_rate=0.08,
    history_breach_rates=(0.08, 0.08),
    supplier_breach_rate=0.05,
    seed=7,
)


def small_config(**overrides) -> SynthConfig:
    return SynthConfig(**{**SMALL_SYNTH, **overrides})


def catalog_for(config: SynthConfig) -> FeatureCatalog:
    return FeatureCatalog(
        sectors=tuple(config.sector_mix),
        rating_names=config.rating_names,
        history_window=config.history_window,
        label_window=config.label_window,
        supplier_sectors=tuple(config.supplier_sector_mix),
    )


def load_written(directory, window):
    paths = {name: os.path.join(directory, filename) for name, filename in DATASET_FILES.items()}
    return load_graph(paths["companies"], paths["edges"], paths["breaches"], paths["ratings"], window=window)


@pytest.fixture(scope="session")
def small_synth():
    return generate(small_config())


@pytest.fixture(scope="session")
def small_graph(small_synth, tmp_path_factory):
    directory = tmp_path_factory.mktemp("small_synth")
    write_dataset(small_synth, directory)
    return load_written(directory, small_synth.config.window)


@pytest.fixture(scope="session")
def small_dataset(small_synth, small_graph):
    return ModelingDataset.build(small_graph, catalog_for(small_synth.config))
