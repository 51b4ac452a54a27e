import numpy as np
import pytest

from urbanprice.dataset import PoiDataset, build_graph
from urbanprice.geo import road_model_from_dict
from urbanprice.synth import SynthConfig, generate_city

SMALL_CITY = dict(
    n_blocks=300, n_facilities=150, bbox=(39.80, 116.20, 39.90, 116.33), n_clusters=2, cluster_radius_km=1.2
)


def make_city(**overrides):
    cfg = SynthConfig(**{**SMALL_CITY, **overrides})
    records, planted = generate_city(cfg)
    dataset = PoiDataset(records)
    graph = build_graph(dataset, cfg.radius_km, road_model_from_dict(cfg.road_model))
    return cfg, dataset, graph, planted


@pytest.fixture(scope="session")
def small_city():
    """Noise-free, fully priced 300-block city."""
    return make_city(seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def trained_small(small_city):
    """Default training on the small city; recovers the planted prices."""
    from urbanprice.trainer import TrainingConfig, train

    _, ds, graph, _ = small_city
    return train(ds, graph, TrainingConfig(max_epochs=60))


# pass/fail lines from tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
