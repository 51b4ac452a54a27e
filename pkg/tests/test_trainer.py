import numpy as np
import pytest

from conftest import make_city

from urbanprice.dataset import FACILITY, RESIDENTIAL, UNSEEN, AttributeLayout, PoiDataset, PoiRecord, build_graph
from urbanprice.experiment import evaluate_model
from urbanprice.geo import GeoPoint
from urbanprice.model import GradientShard, ModelParams, compile_instances
from urbanprice.trainer import (
    DivergenceError,
    TrainingConfig,
    TrainingError,
    apply_update,
    assemble_jacobian,
    map_phase,
    partition,
    prepare,
    reduce_phase,
    restrict_graph,
    train,
)


@pytest.fixture(scope="module")
def compiled(small_city):
    _, ds, graph, planted = small_city
    split, known, params, batch, _, graph = prepare(ds, graph, TrainingConfig())
    rng = np.random.default_rng(5)
    # move away from the initial point so every gradient entry is nonzero
    v = params.vector()
    v[: params.price_offset] = rng.normal(0, 0.4, params.price_offset)
    v[params.price_offset :] *= rng.uniform(0.7, 1.3, params.prices.size)
    return params.with_vector(v), batch


def reduced_bytes(total: GradientShard):
    return (total.keys.tobytes(), total.values.tobytes(), total.curvature.tobytes(), np.float64(total.loss).tobytes())


def test_shard_counts_reduce_bit_identically(compiled):
    params, batch = compiled
    ref = None
    for count in (1, 2, 8):
        total = reduce_phase(map_phase(partition(batch, count), params))
        J, r, _ = assemble_jacobian(map_phase(partition(batch, count), params), params.n_variables)
        got = reduced_bytes(total) + (J.data.tobytes(), J.indices.tobytes(), r.tobytes())
        if ref is None:
            ref = got
        assert got == ref


def test_single_shard_equals_per_instance_sum(compiled):
    params, batch = compiled
    total = reduce_phase(map_phase([batch], params))
    per = [reduce_phase(map_phase([batch.take([i])], params)) for i in range(len(batch))]
    acc = np.zeros(params.n_variables)
    for p in per:
        acc[p.keys] += p.values
    np.testing.assert_allclose(total.values, acc[total.keys], rtol=1e-10, atol=1e-6)


def test_reduce_ignores_shard_order_and_assignment(compiled):
    params, batch = compiled
    ref = reduced_bytes(reduce_phase(map_phase([batch], params)))
    rng = np.random.default_rng(0)
    for _ in range(5):
        owner = rng.integers(0, 6, len(batch))
        shards = [batch.take(np.flatnonzero(owner == s)) for s in range(6)]
        mapped = map_phase(shards, params)
        rng.shuffle(mapped)
        assert reduced_bytes(reduce_phase(mapped)) == ref


def shard(keys, values, rank, index=0):
    keys = np.array(keys, dtype=np.int64)
    vals = np.array(values, dtype=float)
    return GradientShard(keys, vals, np.full(len(keys), rank), np.ones(len(keys)), np.array([1.0]), np.array([rank]), index)


def test_reduce_single_shard_is_itself():
    total = reduce_phase([shard([3, 1], [2.0, 5.0], 0)])
    assert total.as_dict() == {1: 5.0, 3: 2.0}


def test_reduce_disjoint_keys_is_union():
    total = reduce_phase([shard([0, 2], [1.0, 2.0], 0), shard([5], [7.0], 1, 1)])
    assert total.as_dict() == {0: 1.0, 2: 2.0, 5: 7.0}
    assert total.loss == 2.0


def test_reduce_nothing():
    total = reduce_phase([])
    assert total.loss == 0.0 and len(total.keys) == 0


LAYOUT = AttributeLayout((("type", ("flat", UNSEEN)),))


def one_price(value):
    return ModelParams(LAYOUT, np.zeros(2), np.zeros(2), ["f"], [value])


@pytest.mark.parametrize("price,grad,expected", [(10.0, 2.0, 8.0), (1.0, 5.0, 0.0), (7.5, 0.0, 7.5)])
def test_apply_update_examples(price, grad, expected):
    p = one_price(price)
    cfg = TrainingConfig(lr_price=1.0, preconditioner="none")
    out = apply_update(p, shard([p.price_offset], [grad], 0), cfg)
    assert out.prices.tolist() == [expected]


def test_zero_gradient_leaves_params_unchanged(compiled):
    params, _ = compiled
    keys = np.arange(params.n_variables)
    zero = GradientShard(keys, np.zeros(keys.size), np.zeros(keys.size, dtype=np.int64), np.zeros(keys.size),
                         np.zeros(1), np.zeros(1, dtype=np.int64))
    for pre in ("none", "diagonal"):
        assert apply_update(params, zero, TrainingConfig(preconditioner=pre)) == params


def test_apply_update_uses_group_rates():
    p = ModelParams(LAYOUT, [1.0, 1.0], [1.0, 1.0], ["f"], [100.0])
    cfg = TrainingConfig(lr_theta=0.1, lr_phi=0.2, lr_price=0.5, preconditioner="none")
    out = apply_update(p, shard(range(5), [1.0] * 5, 0), cfg)
    assert out.vector().tolist() == [0.9, 0.9, 0.8, 0.8, 99.5]


def test_conflicting_gradients_are_summed():
    # two priced blocks share one facility; the facility's update sees both errors
    recs = [
        PoiRecord("b1", RESIDENTIAL, GeoPoint(39.900, 116.400), price=300.0, attributes={"type": "flat"}),
        PoiRecord("b2", RESIDENTIAL, GeoPoint(39.920, 116.400), price=80.0, attributes={"type": "flat"}),
        PoiRecord("f", FACILITY, GeoPoint(39.910, 116.400), category="medical"),
    ]
    ds = PoiDataset(recs)
    graph = build_graph(recs, 1.5)
    assert graph.neighbors["b1"].neighbor_ids == ("f",)
    params = ModelParams(ds.layout, np.zeros(2), np.zeros(2), ["f"], [200.0])
    known = {"b1": 300.0, "b2": 80.0}
    batch = compile_instances(["b1", "b2"], ds.attributes, graph, params, known, known)
    for count in (1, 2):
        total = reduce_phase(map_phase(partition(batch, count), params))
        # S = 0.5, F = 1, prediction 100: 2 (100 - 300) 0.5 + 2 (100 - 80) 0.5 = -180
        assert total.as_dict(params)["price:f"] == -180.0
    cfg = TrainingConfig(lr_price=0.1, preconditioner="none")
    assert apply_update(params, reduce_phase(map_phase([batch], params)), cfg).prices.tolist() == [218.0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_names_block(compiled):
    params, batch = compiled
    v = params.vector()
    v[params.price_offset :] = np.inf
    with pytest.raises(TrainingError, match="non-finite gradient from block"):
        map_phase([batch], params.with_vector(v))


def test_empty_shards_zero_loss(compiled):
    params, batch = compiled
    mapped = map_phase([batch.take([])], params)
    assert len(mapped) == 1 and reduce_phase(mapped).loss == 0.0


def test_empty_training_set_rejected(small_city):
    _, ds, graph, _ = small_city
    everything = {r.id for r in ds.records}
    with pytest.raises(TrainingError, match="no training block"):
        train(ds, restrict_graph(graph, everything), TrainingConfig(max_epochs=1))


def test_planted_recovery_small_city(small_city):
    _, ds, graph, _ = small_city
    res = train(ds, graph, TrainingConfig(max_epochs=60))
    rep = evaluate_model(res.best, ds, graph, res.split)
    mean = np.mean([ds.by_id[b].price for b in res.split.test_ids])
    assert rep.rmse < 0.01 * mean
    losses = [r.loss for r in res.reports]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_gradient_method_descends_with_small_rates(small_city):
    _, ds, graph, _ = small_city
    cfg = TrainingConfig(method="gradient", lr_theta=1e-3, lr_phi=1e-3, lr_price=1e-2, max_epochs=25)
    res = train(ds, graph, cfg)
    losses = [r.loss for r in res.reports]
    assert len(losses) == 25
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_tolerance_above_initial_loss_stops_after_one_epoch(small_city):
    _, ds, graph, _ = small_city
    res = train(ds, graph, TrainingConfig(tolerance=1e300))
    assert len(res.reports) == 1
    assert res.params.vector().tolist() == res.best.vector().tolist()


def test_same_seed_is_bit_identical(small_city):
    _, ds, graph, _ = small_city
    cfg = TrainingConfig(max_epochs=5)
    a = train(ds, graph, cfg)
    b = train(ds, graph, TrainingConfig(max_epochs=5, shard_count=4, workers=2))
    assert a.params.vector().tobytes() == b.params.vector().tobytes()
    assert [r.loss for r in a.reports] == [r.loss for r in b.reports]


def test_divergence_guard(small_city):
    _, ds, graph, _ = small_city
    cfg = TrainingConfig(method="gradient", preconditioner="none", lr_theta=10.0, lr_phi=10.0, lr_price=10.0)
    with pytest.raises(DivergenceError, match="initial"):
        train(ds, graph, cfg)


@pytest.mark.parametrize(
    "bad",
    [
        {"lr_price": 0.0},
        {"max_epochs": 0},
        {"tolerance": -1.0},
        {"shard_count": 0},
        {"method": "adam"},
        {"preconditioner": "full"},
        {"radius_km": -1.0},
    ],
)
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainingConfig(**bad)


def test_config_round_trip_and_digest():
    cfg = TrainingConfig(seed=4, shard_count=3)
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == TrainingConfig(seed=4, shard_count=3, workers=8).digest()
    assert cfg.digest() != TrainingConfig(seed=5, shard_count=3).digest()
    with pytest.raises(ValueError, match="unknown"):
        TrainingConfig.from_dict({"learning_rate": 1})


def test_sparse_mode_drops_unpriced_neighbours():
    _, ds, graph, _ = make_city(seed=6, known_fraction=0.3)
    cfg = TrainingConfig(learn_unpriced_blocks=False, max_epochs=3)
    res = train(ds, graph, cfg)
    assert not any(ds.by_id[p].is_block for p in res.params.price_ids)
    for ns in res.graph.neighbors.values():
        assert all(p in res.known_prices or not ds.by_id[p].is_block for p in ns.neighbor_ids)
