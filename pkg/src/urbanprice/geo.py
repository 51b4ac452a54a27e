"""
Great-circle distances, road-distance models and a uniform-grid radius index.

All distances are kilometres stored as float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0088


class GeoError(ValueError):
    """Invalid coordinates."""


class IndexConfigError(ValueError):
    """A query the index was not built to answer."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        validate_coordinates(self.lat, self.lon)


def validate_coordinates(lat, lon):
    lat_a = np.asarray(lat, dtype=float)
    lon_a = np.asarray(lon, dtype=float)
    if not (np.all(np.isfinite(lat_a)) and np.all(np.isfinite(lon_a))):
        raise GeoError(f"non-finite coordinate ({lat}, {lon})")
    if np.any(np.abs(lat_a) > 90.0):
        raise GeoError(f"latitude out of range [-90, 90]: {lat}")
    if np.any(np.abs(lon_a) > 180.0):
        raise GeoError(f"longitude out of range [-180, 180]: {lon}")


@dataclass(frozen=True)
class DistancePair:
    """The two edge weights between a block and one neighbour."""

    euclidean_km: float
    trajectory_km: float

    def __post_init__(self):
        if not (math.isfinite(self.euclidean_km) and math.isfinite(self.trajectory_km)):
            raise GeoError("distances must be finite")
        if self.euclidean_km < 0:
            raise GeoError("distances must be nonnegative")
        if self.trajectory_km < self.euclidean_km:
            raise GeoError(
                f"trajectory {self.trajectory_km} km shorter than straight line "
                f"{self.euclidean_km} km"
            )


def haversine_many(lat, lon, lats, lons) -> np.ndarray:
    """Vectorised haversine distance in km from (lat, lon) to every (lats, lons)."""
    phi1 = np.radians(lat)
    phi2 = np.radians(lats)
    dphi = phi2 - phi1
    dlam = np.radians(np.asarray(lons, dtype=float) - lon)
    h = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    return float(haversine_many(a.lat, a.lon, b.lat, b.lon))


class RoadModel(Protocol):
    def trajectory(self, lat, lon, lats, lons, euclidean_km) -> np.ndarray:
        ...

    def describe(self) -> dict:
        ...


@dataclass(frozen=True)
class DetourRoadModel:
    """Route length as a constant multiple of the great-circle distance."""

    factor: float = 1.3

    def __post_init__(self):
        if not (math.isfinite(self.factor) and self.factor >= 1.0):
            raise ValueError(f"detour factor must be >= 1, got {self.factor}")

    def trajectory(self, lat, lon, lats, lons, euclidean_km):
        return self.factor * np.asarray(euclidean_km, dtype=float)

    def describe(self) -> dict:
        return {"kind": "detour", "factor": self.factor}


@dataclass(frozen=True)
class ManhattanRoadModel:
    """Route length on a north/east street grid (L1 in a local tangent plane).

    Never shorter than the great-circle distance.
    """

    def trajectory(self, lat, lon, lats, lons, euclidean_km):
        north = EARTH_RADIUS_KM * np.abs(np.radians(np.asarray(lats, dtype=float) - lat))
        mid = np.radians((np.asarray(lats, dtype=float) + lat) / 2.0)
        east = EARTH_RADIUS_KM * np.abs(np.radians(np.asarray(lons, dtype=float) - lon)) * np.cos(mid)
        return np.maximum(north + east, euclidean_km)

    def describe(self) -> dict:
        return {"kind": "manhattan"}


def road_model_from_dict(spec: dict | None) -> RoadModel:
    if not spec:
        return DetourRoadModel()
    kind = spec.get("kind", "detour")
    if kind == "detour":
        return DetourRoadModel(float(spec.get("factor", 1.3)))
    if kind == "manhattan":
        return ManhattanRoadModel()
    raise ValueError(f"unknown road model {kind!r}")


def trajectory_km(a: GeoPoint, b: GeoPoint, road_model: RoadModel | None = None) -> float:
    road_model = road_model or DetourRoadModel()
    d = haversine_many(a.lat, a.lon, b.lat, b.lon)
    return float(road_model.trajectory(a.lat, a.lon, b.lat, b.lon, d))


def _lon_half_span_deg(radius_km: float, min_cos: float) -> float:
    # Any point within radius_km of the centre differs in longitude by at most
    # this much, given cos(lat) >= min_cos for both points.
    s = math.sin(radius_km / (2.0 * EARTH_RADIUS_KM)) / max(min_cos, 1e-12)
    if s >= 1.0:
        return 360.0
    return math.degrees(2.0 * math.asin(s))


class SpatialIndex:
    """Uniform lat/lon grid with cells at least as large as ``max_radius_km``.

    A query within the supported radius from a centre inside the indexed
    bounding box touches at most 3x3 cells. Results are exact: candidates
    from the touched cells are filtered by haversine distance.
    """

    _PAD = 1.0 + 1e-9

    def __init__(self, ids: Sequence[str], lats, lons, max_radius_km: float):
        if not (max_radius_km > 0 and math.isfinite(max_radius_km)):
            raise IndexConfigError("max_radius_km must be positive")
        self.ids = np.asarray(list(ids), dtype=object)
        self.lats = np.asarray(lats, dtype=float).reshape(-1)
        self.lons = np.asarray(lons, dtype=float).reshape(-1)
        if not (len(self.ids) == len(self.lats) == len(self.lons)):
            raise ValueError("ids, lats and lons must have equal length")
        validate_coordinates(self.lats, self.lons)
        self.max_radius_km = float(max_radius_km)
        self._id_keys = np.asarray([str(i) for i in self.ids])
        self._cells: dict[tuple[int, int], np.ndarray] = {}
        if len(self.ids) == 0:
            return

        self.lat0 = float(self.lats.min())
        self.lon0 = float(self.lons.min())
        lat_hi = float(self.lats.max())
        self.min_cos = math.cos(math.radians(max(abs(self.lat0), abs(lat_hi))))
        if self.min_cos <= 1e-6:
            raise IndexConfigError("grid index does not support polar points")
        self.cell_lat = math.degrees(self.max_radius_km / EARTH_RADIUS_KM) * self._PAD
        self.cell_lon = _lon_half_span_deg(self.max_radius_km, self.min_cos) * self._PAD
        self.n_lat = int((lat_hi - self.lat0) // self.cell_lat) + 1
        self.n_lon = int((float(self.lons.max()) - self.lon0) // self.cell_lon) + 1

        ci = ((self.lats - self.lat0) // self.cell_lat).astype(np.int64)
        cj = ((self.lons - self.lon0) // self.cell_lon).astype(np.int64)
        order = np.lexsort((cj, ci))
        keys = np.stack([ci[order], cj[order]], axis=1)
        if len(order):
            breaks = np.flatnonzero(np.any(np.diff(keys, axis=0) != 0, axis=1)) + 1
            for chunk in np.split(np.arange(len(order)), breaks):
                self._cells[(int(keys[chunk[0], 0]), int(keys[chunk[0], 1]))] = order[chunk]

    @classmethod
    def from_points(cls, items: Iterable[tuple[str, GeoPoint]], max_radius_km: float):
        items = list(items)
        return cls(
            [i for i, _ in items],
            [p.lat for _, p in items],
            [p.lon for _, p in items],
            max_radius_km,
        )

    def __len__(self):
        return len(self.ids)

    def candidate_cells(self, lat: float, lon: float, radius_km: float) -> list[tuple[int, int]]:
        dlat = math.degrees(radius_km / EARTH_RADIUS_KM) * self._PAD
        cos_c = math.cos(math.radians(lat))
        dlon = _lon_half_span_deg(radius_km, math.sqrt(max(cos_c, 0.0) * self.min_cos)) * self._PAD
        i_lo = max(int((lat - dlat - self.lat0) // self.cell_lat), 0)
        i_hi = min(int((lat + dlat - self.lat0) // self.cell_lat), self.n_lat - 1)
        j_lo = max(int((lon - dlon - self.lon0) // self.cell_lon), 0)
        j_hi = min(int((lon + dlon - self.lon0) // self.cell_lon), self.n_lon - 1)
        return [(i, j) for i in range(i_lo, i_hi + 1) for j in range(j_lo, j_hi + 1)]

    def query_indices(self, lat: float, lon: float, radius_km: float, exclude_id=None):
        """Positions and distances of indexed points within ``radius_km``.

        Sorted by ascending distance, ties broken by id.
        """
        if not radius_km > 0:
            raise IndexConfigError(f"radius must be positive, got {radius_km}")
        if radius_km > self.max_radius_km:
            raise IndexConfigError(
                f"radius {radius_km} km exceeds the index maximum {self.max_radius_km} km"
            )
        validate_coordinates(lat, lon)
        empty = np.empty(0, dtype=np.int64), np.empty(0, dtype=float)
        if len(self.ids) == 0:
            return empty
        parts = [self._cells[c] for c in self.candidate_cells(lat, lon, radius_km) if c in self._cells]
        if not parts:
            return empty
        cand = np.concatenate(parts)
        d = haversine_many(lat, lon, self.lats[cand], self.lons[cand])
        keep = d <= radius_km
        if exclude_id is not None:
            keep &= self._id_keys[cand] != str(exclude_id)
        cand, d = cand[keep], d[keep]
        order = np.lexsort((self._id_keys[cand], d))
        return cand[order], d[order]

    def query(self, center: GeoPoint, radius_km: float, exclude_id=None) -> list[tuple[str, float]]:
        idx, d = self.query_indices(center.lat, center.lon, radius_km, exclude_id)
        return [(self.ids[i], float(x)) for i, x in zip(idx, d)]


def radius_query(
    index: SpatialIndex, center: GeoPoint, radius_km: float, exclude_id=None
) -> list[tuple[str, float]]:
    """POIs within ``radius_km`` of ``center`` as (id, km) pairs, nearest first."""
    return index.query(center, radius_km, exclude_id=exclude_id)
