"""Evaluation harness shared by the CLI and the demos.

Evaluation always uses the test split with only training prices known, so
no held-out price leaks into a prediction. Neighbours that are neither
known nor a price variable of the snapshot are dropped; a block left with
no neighbour is predicted at the citywide training mean and counted as a
fallback.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .baselines import VARIANTS, fit_baseline, predict_baseline
from .dataset import (
    DatasetSplit,
    Graph,
    NeighborSet,
    PoiDataset,
    build_graph,
    neighbor_set_for,
    split_dataset,
)
from .geo import GeoPoint, SpatialIndex, road_model_from_dict
from .metrics import (
    EvalReport,
    attribute_preferences,
    distance_preferences,
    facility_premiums,
)
from .model import ModelParams, attribute_scale, compile_instances, batch_predict, distance_weights
from .trainer import TrainingConfig, TrainingResult, restrict_graph, split_digest, train

MODEL_METHOD = "neighbour_value"


class ExperimentError(ValueError):
    pass


def resolvable_graph(graph: Graph, known: Mapping[str, float], params: ModelParams) -> Graph:
    """Drop neighbours that have neither a known price nor a price variable."""
    drop = set()
    for ns in graph.neighbors.values():
        for pid in ns.neighbor_ids:
            if pid not in known and params.price_index(pid) is None:
                drop.add(pid)
    return restrict_graph(graph, drop) if drop else graph


def check_split(params: ModelParams, split: DatasetSplit):
    expected = params.meta.get("train_digest")
    if expected is not None and expected != split_digest(split.train_ids):
        raise ExperimentError(
            f"split mismatch: snapshot was trained on split seed {params.meta.get('split_seed')} "
            f"but evaluation uses seed {split.seed}"
        )


def predict_with_fallback(
    params: ModelParams, block_ids: Sequence[str], dataset: PoiDataset, graph: Graph, known: Mapping[str, float]
) -> tuple[np.ndarray, np.ndarray]:
    """Model predictions plus a flag for blocks predicted at the citywide mean."""
    g = resolvable_graph(graph, known, params)
    covered = [b for b in block_ids if b in g.neighbors]
    pred = np.full(len(block_ids), float(np.mean(list(known.values()))) if known else 0.0)
    flags = np.ones(len(block_ids), dtype=bool)
    if covered:
        batch = compile_instances(covered, dataset.attributes, g, params, known)
        pos = {b: i for i, b in enumerate(block_ids)}
        idx = np.array([pos[b] for b in covered])
        pred[idx] = batch_predict(batch, params)
        flags[idx] = False
    return pred, flags


def evaluate_model(
    params: ModelParams,
    dataset: PoiDataset,
    graph: Graph,
    split: DatasetSplit,
    subset: str = "test",
    method: str = MODEL_METHOD,
) -> EvalReport:
    check_split(params, split)
    ids = _subset(split, subset)
    known = dataset.prices(split.train_ids)
    pred, flags = predict_with_fallback(params, ids, dataset, graph, known)
    truth = np.array([dataset.by_id[b].price for b in ids])
    return EvalReport.compute(method, truth, pred, fallback=int(flags.sum()), subset=subset)


def evaluate_baseline(
    variant: str,
    dataset: PoiDataset,
    graph: Graph,
    split: DatasetSplit,
    radius_km: float | None = None,
    subset: str = "test",
) -> EvalReport:
    if variant not in VARIANTS:
        raise ExperimentError(f"unknown baseline {variant!r}; expected one of {VARIANTS}")
    ids = _subset(split, subset)
    known = dataset.prices(split.train_ids)
    radius = graph.radius_km if radius_km is None else radius_km
    predictor = fit_baseline(variant, dataset, graph, known, radius)
    pred, flags = predict_baseline(predictor, ids, dataset, graph, known)
    truth = np.array([dataset.by_id[b].price for b in ids])
    return EvalReport.compute(variant, truth, pred, fallback=int(flags.sum()), subset=subset)


def _subset(split: DatasetSplit, subset: str) -> list[str]:
    try:
        return list({"train": split.train_ids, "validation": split.validation_ids, "test": split.test_ids}[subset])
    except KeyError:
        raise ExperimentError(f"unknown subset {subset!r}") from None


def compare(
    dataset: PoiDataset,
    graph: Graph,
    config: TrainingConfig,
    split: DatasetSplit | None = None,
    baselines: Sequence[str] = VARIANTS,
) -> tuple[TrainingResult, list[EvalReport]]:
    """Train once and evaluate the model next to the requested baselines."""
    result = train(dataset, graph, config, split)
    rows = [evaluate_model(result.best, dataset, graph, result.split)]
    rows += [evaluate_baseline(v, dataset, graph, result.split) for v in baselines]
    return result, rows


# ---------------------------------------------------------------------------
# Radius sweep


@dataclass
class SweepRow:
    radius_km: float
    validation: EvalReport
    test: EvalReport
    mean_blocks: float
    mean_facilities: float
    epochs: int

    def to_json(self) -> dict:
        return {
            "radius_km": self.radius_km,
            "validation": self.validation.to_json(),
            "test": self.test.to_json(),
            "mean_blocks": self.mean_blocks,
            "mean_facilities": self.mean_facilities,
            "epochs": self.epochs,
        }


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    @property
    def best_radius(self) -> float:
        return min(self.rows, key=lambda r: (r.validation.mae, r.radius_km)).radius_km

    def curve(self) -> list[dict]:
        return [
            {"radius_km": r.radius_km, "mae": r.test.mae, "rmse": r.test.rmse, "r2": r.test.r2}
            for r in self.rows
        ]


def sweep(
    dataset: PoiDataset,
    radii: Sequence[float],
    config: TrainingConfig,
    road_model: dict | None = None,
    split: DatasetSplit | None = None,
) -> SweepResult:
    """Retrain from scratch at every radius; the split is shared."""
    radii = sorted(float(r) for r in radii)
    if len(radii) < 2:
        raise ExperimentError("a sweep needs at least two radii")
    if split is None:
        split = split_dataset(dataset.priced_block_ids(), config.seed)
    out = SweepResult()
    rm = road_model_from_dict(road_model)
    for r in radii:
        graph = build_graph(dataset, r, rm)
        cfg = TrainingConfig.from_dict({**config.to_dict(), "radius_km": r})
        res = train(dataset, graph, cfg, split)
        counts = graph.mean_counts(dataset)
        out.rows.append(
            SweepRow(
                r,
                evaluate_model(res.best, dataset, graph, split, "validation"),
                evaluate_model(res.best, dataset, graph, split, "test"),
                counts["blocks"],
                counts["facilities"],
                len(res.reports),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Prediction with contribution breakdown


@dataclass
class Prediction:
    block_id: str
    status: str  # "ok" or "uncoverable"
    price: float | None = None
    scale: float | None = None
    contributions: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "block_id": self.block_id,
            "status": self.status,
            "price": self.price,
            "S": self.scale,
            "contributions": self.contributions,
        }


def explain(
    params: ModelParams,
    x,
    nbrs: NeighborSet | None,
    values: Mapping[str, float],
    block_id: str,
    top: int = 10,
) -> Prediction:
    """Forward pass with the per-neighbour terms S * F_j * w_j, largest first."""
    if nbrs is None:
        return Prediction(block_id, "uncoverable")
    keep = [j for j, pid in enumerate(nbrs.neighbor_ids) if pid in values]
    if not keep:
        return Prediction(block_id, "uncoverable")
    ids = [nbrs.neighbor_ids[j] for j in keep]
    D = nbrs.distances[:, keep]
    w = np.array([values[i] for i in ids])
    F = distance_weights(D, params.phi)
    S = attribute_scale(x, params.theta)
    terms = S * F * w
    order = sorted(range(len(ids)), key=lambda j: (-terms[j], ids[j]))[:top]
    contrib = [
        {
            "id": ids[j],
            "weight": float(F[j]),
            "value": float(w[j]),
            "term": float(terms[j]),
            "euclidean_km": float(D[0, j]),
            "trajectory_km": float(D[1, j]),
        }
        for j in order
    ]
    return Prediction(block_id, "ok", float(S * (w @ F)), float(S), contrib)


def neighbour_values(params: ModelParams, dataset: PoiDataset) -> dict[str, float]:
    """Known block prices from the POI file, then learned prices for the rest."""
    values = {pid: float(p) for pid, p in zip(params.price_ids, params.prices)}
    values.update(dataset.prices(dataset.priced_block_ids()))
    return values


def predict_blocks(
    params: ModelParams,
    dataset: PoiDataset,
    graph: Graph,
    block_ids: Sequence[str],
    top: int = 10,
) -> list[Prediction]:
    values = neighbour_values(params, dataset)
    out = []
    for bid in block_ids:
        rec = dataset.by_id.get(bid)
        if rec is None or not rec.is_block:
            raise ExperimentError(f"{bid!r} is not a residential block in the POI file")
        out.append(explain(params, dataset.attributes[bid], graph.neighbors.get(bid), values, bid, top))
    return out


def predict_adhoc(
    params: ModelParams,
    dataset: PoiDataset,
    blocks: Sequence[Mapping],
    radius_km: float | None = None,
    road_model: dict | None = None,
    top: int = 10,
) -> list[Prediction]:
    """Price new blocks given as {"id", "lat", "lon", "attributes"} objects."""
    radius = float(radius_km if radius_km is not None else params.meta.get("radius_km", 1.0))
    rm = road_model_from_dict(road_model if road_model is not None else params.meta.get("road_model"))
    recs = dataset.records
    index = SpatialIndex([r.id for r in recs], [r.location.lat for r in recs], [r.location.lon for r in recs], radius)
    is_block = np.array([r.is_block for r in recs], dtype=bool)
    values = neighbour_values(params, dataset)
    out = []
    for n, b in enumerate(blocks):
        try:
            bid = str(b.get("id", f"adhoc-{n}"))
            loc = GeoPoint(float(b["lat"]), float(b["lon"]))
            x = params.layout.encode(b["attributes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ExperimentError(f"ad-hoc block {n}: {exc}") from None
        ns = neighbor_set_for(bid, loc.lat, loc.lon, index, is_block, radius, rm)
        out.append(explain(params, x, ns, values, bid, top))
    return out


# ---------------------------------------------------------------------------
# Interpretability bundle


def observed_facilities(graph: Graph, dataset: PoiDataset, min_observers: int = 1) -> set:
    """Facilities inside the radius of at least ``min_observers`` priced blocks."""
    counts: dict[str, int] = {}
    for bid, ns in graph.neighbors.items():
        if dataset.by_id[bid].price is None:
            continue
        for pid in ns.neighbor_ids:
            if not dataset.by_id[pid].is_block:
                counts[pid] = counts.get(pid, 0) + 1
    return {pid for pid, c in counts.items() if c >= min_observers}


def report_bundle(
    params: ModelParams, dataset: PoiDataset, graph: Graph | None = None, min_observers: int = 1
) -> dict:
    """Preference tables plus facility premiums.

    With a graph, premiums and rankings cover only facilities that priced
    blocks observe; the others never received a gradient and sit at their
    initial value.
    """
    priced = dataset.prices(dataset.priced_block_ids())
    city_mean = math.fsum(priced.values()) / len(priced) if priced else 0.0
    include = observed_facilities(graph, dataset, min_observers) if graph is not None else None
    return {
        "attribute_preferences": attribute_preferences(params),
        "distance_preferences": distance_preferences(params),
        "facilities": facility_premiums(params, dataset.records, city_mean, include=include),
        "min_observers": min_observers if graph is not None else 0,
    }
