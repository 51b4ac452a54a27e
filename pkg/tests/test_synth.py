import hashlib

import numpy as np
import pytest

from conftest import make_city
from urbanprice.dataset import PoiDataset, build_graph, dump_pois
from urbanprice.geo import road_model_from_dict
from urbanprice.model import batch_predict, compile_instances, save_params
from urbanprice.synth import SynthConfig, SynthError, generate_city, plant_report


def test_zero_noise_prices_equal_forward_values(small_city):
    cfg, ds, graph, planted = small_city
    priced = ds.priced_block_ids()
    assert len(priced) == cfg.n_blocks
    # every block is known, so its neighbour blocks are fixed at their stored price
    known = ds.prices(priced)
    batch = compile_instances(priced, ds.attributes, graph, planted, known)
    pred = batch_predict(batch, planted)
    truth = np.array([known[b] for b in priced])
    assert np.max(np.abs(pred - truth) / truth) < 1e-9


def test_partially_known_city_is_consistent():
    cfg, ds, graph, planted = make_city(seed=4, known_fraction=0.4)
    priced = ds.priced_block_ids()
    assert len(priced) == round(0.4 * cfg.n_blocks)
    unknown = [b.id for b in ds.blocks if b.price is None]
    assert set(unknown) <= set(planted.price_ids)
    known = ds.prices(priced)
    batch = compile_instances(priced + unknown, ds.attributes, graph, planted, known)
    pred = batch_predict(batch, planted)
    truth = np.array([known[b] for b in priced] + [planted.price_of(b) for b in unknown])
    assert np.max(np.abs(pred - truth) / truth) < 1e-9


def _digest(tmp_path, name, cfg):
    recs, planted = generate_city(cfg)
    dump_pois(recs, tmp_path / f"{name}.jsonl")
    save_params(planted, tmp_path / f"{name}.json")
    return [hashlib.sha256((tmp_path / f"{name}{ext}").read_bytes()).hexdigest() for ext in (".jsonl", ".json")]


def test_same_seed_is_byte_identical(tmp_path):
    cfg = SynthConfig(n_blocks=150, n_facilities=100, bbox=(39.80, 116.20, 39.90, 116.33), n_clusters=1,
                      cluster_radius_km=1.0, noise_fraction=0.05, known_fraction=0.5, seed=3)
    assert _digest(tmp_path, "a", cfg) == _digest(tmp_path, "b", cfg)
    other = SynthConfig.from_dict({**cfg.to_dict(), "seed": 4})
    assert _digest(tmp_path, "c", other) != _digest(tmp_path, "a", cfg)


def test_facility_density_matches_expectation():
    # 10^4 POIs spread uniformly; expected count = n_facilities * pi * l^2 / area
    cfg = SynthConfig(n_blocks=2000, n_facilities=8000, n_clusters=0, seed=1)
    recs, _ = generate_city(cfg)
    ds = PoiDataset(recs)
    graph = build_graph(recs, cfg.radius_km, road_model_from_dict(cfg.road_model))
    mean_fac = graph.mean_counts(ds)["facilities"]
    expected = cfg.expected_facilities_per_block()
    assert expected == pytest.approx(8000 * np.pi / cfg.area_km2())
    assert abs(mean_fac - expected) <= 0.2 * expected


def test_noise_is_applied_and_positive():
    _, ds, _, _ = make_city(seed=5, noise_fraction=0.05)
    _, clean, _, _ = make_city(seed=5)
    noisy = np.array([r.price for r in ds.blocks])
    exact = np.array([r.price for r in clean.blocks])
    rel = noisy / exact - 1
    assert np.all(noisy > 0)
    assert 0.02 < rel.std() < 0.08


@pytest.mark.parametrize(
    "override",
    [
        {"bbox": (40.0, 116.0, 40.0, 116.5)},
        {"bbox": (40.2, 116.0, 40.0, 116.5)},
        {"n_blocks": 0},
        {"known_fraction": 0.0},
        {"noise_std": -1.0},
        {"radius_km": 0.0},
        {"true_phi": (1.0,)},
    ],
)
def test_invalid_config(override):
    with pytest.raises(SynthError):
        SynthConfig(**override)


def test_unknown_config_field():
    with pytest.raises(SynthError, match="unknown"):
        SynthConfig.from_dict({"n_block": 10})


def test_districts_must_fit():
    with pytest.raises(SynthError, match="fit"):
        generate_city(SynthConfig(bbox=(39.80, 116.20, 39.81, 116.21), cluster_radius_km=2.0))


def test_config_dict_round_trip():
    cfg = SynthConfig(seed=9, noise_fraction=0.1)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


# plant_report


def test_report_identity(small_city):
    *_, planted = small_city
    rep = plant_report(planted, planted.copy())
    assert rep["max_relative_error"] == 0.0
    assert rep["price_correlation"] == pytest.approx(1.0, abs=1e-12)
    assert rep["theta_cosine"] == pytest.approx(1.0, abs=1e-12)
    assert rep["phi_cosine"] == pytest.approx(1.0, abs=1e-12)


def test_report_doubled_prices(small_city):
    *_, planted = small_city
    doubled = planted.with_vector(np.concatenate([planted.theta, planted.phi, 2 * planted.prices]))
    rep = plant_report(planted, doubled)
    np.testing.assert_allclose(list(rep["relative_error"].values()), 1.0, rtol=1e-15)


def test_report_random_prices_uncorrelated():
    # null distribution: Pearson r of 100 independent pairs has sd 1/sqrt(99) ~ 0.1
    _, _, _, planted = make_city(seed=2)
    ids = [p for p in planted.price_ids if p.startswith("f")][:100]
    rng = np.random.default_rng(0)
    corrs = []
    for _ in range(200):
        learned = planted.with_vector(
            np.concatenate([planted.theta, planted.phi, rng.uniform(1e4, 1e5, planted.prices.size)])
        )
        corrs.append(plant_report(planted, learned, ids)["price_correlation"])
    corrs = np.array(corrs)
    assert abs(corrs.mean()) < 0.05
    assert np.mean(np.abs(corrs) <= 0.25) > 0.95


def test_report_id_mismatch(small_city):
    *_, planted = small_city
    with pytest.raises(SynthError, match="not present"):
        plant_report(planted, planted, ids=["nope"])
