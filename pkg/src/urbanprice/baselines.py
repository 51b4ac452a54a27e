"""Comparison predictors: citywide mean, radius averages, linear regression.

Radius predictors read neighbour sets from a prebuilt graph and keep only
neighbours within the requested radius (straight-line distance), so one
graph built at the largest radius serves every smaller one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import FACILITY_CATEGORIES, Graph, PoiDataset

VARIANTS = ("citywide_avg", "macro_avg", "micro_avg", "linear_regression")
MICRO_DISTANCE_FLOOR_KM = 0.01
RIDGE = 1e-6


class BaselineError(ValueError):
    pass


@dataclass
class BaselinePredictor:
    variant: str
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise BaselineError(f"unknown baseline {self.variant!r}; expected one of {VARIANTS}")

    @property
    def citywide_mean(self) -> float:
        return self.state["citywide_mean"]


@dataclass(frozen=True)
class BaselinePrediction:
    price: float
    fallback: bool = False


def fit_citywide(prices) -> BaselinePredictor:
    prices = np.asarray(list(prices.values()) if isinstance(prices, Mapping) else list(prices), dtype=float)
    if prices.size == 0:
        raise BaselineError("cannot fit the citywide mean on an empty price set")
    return BaselinePredictor("citywide_avg", {"citywide_mean": float(prices.mean())})


def _priced_neighbours(block_id, graph: Graph, known_prices: Mapping[str, float], radius_km: float):
    ns = graph.neighbors.get(block_id)
    if ns is None:
        return np.empty(0), np.empty(0)
    prices, dists = [], []
    for pid, d in zip(ns.neighbor_ids, ns.distances[0]):
        if d <= radius_km and pid in known_prices:
            prices.append(known_prices[pid])
            dists.append(d)
    return np.asarray(prices, dtype=float), np.asarray(dists, dtype=float)


def _check_radius(graph: Graph, radius_km: float):
    if not radius_km > 0:
        raise BaselineError("radius must be positive")
    if radius_km > graph.radius_km * (1 + 1e-12):
        raise BaselineError(f"radius {radius_km} km exceeds the graph radius {graph.radius_km} km")


def predict_macro_avg(block_id, graph, known_prices, radius_km, citywide_mean: float) -> BaselinePrediction:
    """Unweighted mean of priced neighbours; citywide mean (flagged) if none."""
    _check_radius(graph, radius_km)
    prices, _ = _priced_neighbours(block_id, graph, known_prices, radius_km)
    if prices.size == 0:
        return BaselinePrediction(float(citywide_mean), True)
    return BaselinePrediction(float(prices.mean()))


def predict_micro_avg(block_id, graph, known_prices, radius_km, citywide_mean: float) -> BaselinePrediction:
    """Inverse-distance weighted mean, weight 1 / max(d, 0.01 km)."""
    _check_radius(graph, radius_km)
    prices, dists = _priced_neighbours(block_id, graph, known_prices, radius_km)
    if prices.size == 0:
        return BaselinePrediction(float(citywide_mean), True)
    w = 1.0 / np.maximum(dists, MICRO_DISTANCE_FLOOR_KM)
    return BaselinePrediction(float(w @ prices / w.sum()))


# ---------------------------------------------------------------------------
# Linear regression


def feature_names(dataset: PoiDataset) -> list[str]:
    return (
        list(dataset.layout.slot_names())
        + [f"count:{c}" for c in FACILITY_CATEGORIES]
        + [f"mean_km:{c}" for c in FACILITY_CATEGORIES]
        + ["priced_neighbour_mean"]
    )


def regression_features(
    block_ids: Sequence[str],
    dataset: PoiDataset,
    graph: Graph,
    known_prices: Mapping[str, float],
    radius_km: float,
    citywide_mean: float,
) -> np.ndarray:
    """One row per block: [one-hots; category counts; category mean km; priced-neighbour mean].

    A category with no facility in range gets mean distance ``radius_km``
    (nothing closer than the radius). The priced-neighbour mean falls back to
    the citywide mean like macro_avg.
    """
    _check_radius(graph, radius_km)
    n_slots = dataset.layout.n_slots
    n_cat = len(FACILITY_CATEGORIES)
    cat_index = {c: i for i, c in enumerate(FACILITY_CATEGORIES)}
    X = np.zeros((len(block_ids), n_slots + 2 * n_cat + 1))
    for row, bid in enumerate(block_ids):
        X[row, list(dataset.attributes[bid].slots)] = 1.0
        counts = np.zeros(n_cat)
        dsum = np.zeros(n_cat)
        ns = graph.neighbors.get(bid)
        if ns is not None:
            for pid, d in zip(ns.neighbor_ids, ns.distances[0]):
                rec = dataset.by_id[pid]
                if d <= radius_km and not rec.is_block:
                    c = cat_index[rec.category]
                    counts[c] += 1
                    dsum[c] += d
        X[row, n_slots : n_slots + n_cat] = counts
        X[row, n_slots + n_cat : n_slots + 2 * n_cat] = np.where(
            counts > 0, dsum / np.maximum(counts, 1), radius_km
        )
        X[row, -1] = predict_macro_avg(bid, graph, known_prices, radius_km, citywide_mean).price
    return X


def fit_linear(X: np.ndarray, y: np.ndarray, ridge: float = RIDGE) -> tuple[np.ndarray, float]:
    """Ridge least squares by normal equations on standardised columns.

    Returns weights and intercept in the original feature units, so an
    all-zero feature row predicts the intercept.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise BaselineError(f"need a non-empty design matrix matching y, got {X.shape} and {y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise BaselineError("non-finite value in regression inputs")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (X - mu) / sd
    y_mean = y.mean()
    A = Z.T @ Z + ridge * np.eye(Z.shape[1])
    try:
        beta = np.linalg.solve(A, Z.T @ (y - y_mean))
    except np.linalg.LinAlgError as exc:
        raise BaselineError(f"regression system is singular: {exc}") from None
    if not np.all(np.isfinite(beta)):
        raise BaselineError("regression system is singular")
    w = beta / sd
    return w, float(y_mean - mu @ w)


def fit_linear_regression(
    train_ids: Sequence[str],
    dataset: PoiDataset,
    graph: Graph,
    known_prices: Mapping[str, float],
    radius_km: float,
) -> BaselinePredictor:
    city = fit_citywide(known_prices).citywide_mean
    ids = [b for b in train_ids if b in known_prices]
    X = regression_features(ids, dataset, graph, known_prices, radius_km, city)
    y = np.array([known_prices[b] for b in ids])
    w, b = fit_linear(X, y)
    return BaselinePredictor(
        "linear_regression",
        {"citywide_mean": city, "weights": w, "intercept": b, "radius_km": radius_km},
    )


def fit_baseline(
    variant: str,
    dataset: PoiDataset,
    graph: Graph,
    known_prices: Mapping[str, float],
    radius_km: float,
) -> BaselinePredictor:
    if variant == "linear_regression":
        return fit_linear_regression(sorted(known_prices), dataset, graph, known_prices, radius_km)
    base = fit_citywide(known_prices)
    return BaselinePredictor(variant, {"citywide_mean": base.citywide_mean, "radius_km": radius_km})


def predict_baseline(
    predictor: BaselinePredictor,
    block_ids: Sequence[str],
    dataset: PoiDataset,
    graph: Graph,
    known_prices: Mapping[str, float],
) -> tuple[np.ndarray, np.ndarray]:
    """Predictions and fallback flags for ``block_ids``."""
    city = predictor.citywide_mean
    n = len(block_ids)
    if predictor.variant == "citywide_avg":
        return np.full(n, city), np.zeros(n, dtype=bool)
    radius = predictor.state["radius_km"]
    if predictor.variant == "linear_regression":
        X = regression_features(block_ids, dataset, graph, known_prices, radius, city)
        flags = np.array(
            [_priced_neighbours(b, graph, known_prices, radius)[0].size == 0 for b in block_ids], dtype=bool
        )
        return X @ predictor.state["weights"] + predictor.state["intercept"], flags
    fn = predict_macro_avg if predictor.variant == "macro_avg" else predict_micro_avg
    out = [fn(b, graph, known_prices, radius, city) for b in block_ids]
    return np.array([p.price for p in out]), np.array([p.fallback for p in out], dtype=bool)
