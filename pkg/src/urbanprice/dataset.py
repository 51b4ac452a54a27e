"""POI records, the block/facility neighbour graph, and train/validation/test splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geo import DetourRoadModel, GeoError, GeoPoint, RoadModel, SpatialIndex

RESIDENTIAL = "residential_block"
FACILITY = "facility"
KINDS = (RESIDENTIAL, FACILITY)

FACILITY_CATEGORIES = (
    "governmental",
    "educational",
    "financial",
    "recreational",
    "medical",
    "commercial",
    "transportation",
    "scenic",
    "wasteyard",
    "cemetery",
)

UNSEEN = "<unseen>"
POI_FIELDS = ("id", "kind", "category", "lat", "lon", "price", "attributes")
GRAPH_FORMAT = "neighbor-sets/1"


class DatasetError(ValueError):
    pass


class PoiFormatError(DatasetError):
    """Malformed POI file; carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class PoiRecord:
    id: str
    kind: str
    location: GeoPoint
    category: str | None = None
    price: float | None = None
    attributes: Mapping[str, str] | None = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise DatasetError("id must be a non-empty string")
        if self.kind not in KINDS:
            raise DatasetError(f"record {self.id}: kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == FACILITY:
            if self.category not in FACILITY_CATEGORIES:
                raise DatasetError(f"record {self.id}: unknown facility category {self.category!r}")
            if self.attributes:
                raise DatasetError(f"record {self.id}: facilities carry no attributes")
            if self.price is not None:
                raise DatasetError(f"record {self.id}: facility prices are learned, not given")
        else:
            if self.category is not None:
                raise DatasetError(f"record {self.id}: residential blocks have no category")
            if not self.attributes:
                raise DatasetError(f"record {self.id}: residential blocks need attributes")
        if self.price is not None:
            p = self.price
            if isinstance(p, bool) or not isinstance(p, (int, float)) or not math.isfinite(p) or p <= 0:
                raise DatasetError(f"record {self.id}: price must be finite and > 0, got {p!r}")

    @property
    def is_block(self) -> bool:
        return self.kind == RESIDENTIAL

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "category": self.category,
            "lat": self.location.lat,
            "lon": self.location.lon,
            "price": self.price,
            "attributes": dict(self.attributes) if self.attributes is not None else None,
        }


def _record_from_json(obj, line) -> PoiRecord:
    if not isinstance(obj, dict):
        raise PoiFormatError("expected a JSON object", line)
    unknown = set(obj) - set(POI_FIELDS)
    if unknown:
        raise PoiFormatError(f"unknown field(s) {sorted(unknown)}", line)
    for name in ("id", "kind", "lat", "lon"):
        if name not in obj:
            raise PoiFormatError(f"missing field {name!r}", line)
    rid = obj["id"]
    if not isinstance(rid, str):
        raise PoiFormatError("field 'id' must be a string", line)
    for name in ("lat", "lon"):
        v = obj[name]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise PoiFormatError(f"record {rid}: field {name!r} must be a number", line)
    attrs = obj.get("attributes")
    if attrs is not None:
        if not isinstance(attrs, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in attrs.items()
        ):
            raise PoiFormatError(f"record {rid}: field 'attributes' must map strings to strings", line)
    price = obj.get("price")
    if price is not None and (isinstance(price, bool) or not isinstance(price, (int, float))):
        raise PoiFormatError(f"record {rid}: field 'price' must be a number or null", line)
    try:
        return PoiRecord(
            id=rid,
            kind=obj["kind"],
            category=obj.get("category"),
            location=GeoPoint(float(obj["lat"]), float(obj["lon"])),
            price=float(price) if price is not None else None,
            attributes=attrs,
        )
    except (DatasetError, GeoError) as exc:
        raise PoiFormatError(f"record {rid}: {exc}", line) from exc


def load_pois(path) -> list[PoiRecord]:
    """Read a line-delimited JSON POI file. Blank lines are skipped."""
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise PoiFormatError(f"invalid JSON ({exc.msg})", lineno) from exc
            rec = _record_from_json(obj, lineno)
            if rec.id in seen:
                raise PoiFormatError(f"duplicate id {rec.id!r}", lineno)
            seen.add(rec.id)
            records.append(rec)
    return records


def dump_pois(records: Iterable[PoiRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


@dataclass(frozen=True)
class AttributeLayout:
    """Concatenated one-hot blocks; each block's last slot is reserved for unseen values."""

    blocks: tuple[tuple[str, tuple[str, ...]], ...]

    @classmethod
    def infer(cls, records: Iterable[PoiRecord]) -> "AttributeLayout":
        keys = None
        vocab: dict[str, set] = {}
        for rec in records:
            if not rec.is_block:
                continue
            rkeys = tuple(sorted(rec.attributes))
            if keys is None:
                keys = rkeys
                vocab = {k: set() for k in keys}
            elif rkeys != keys:
                raise DatasetError(
                    f"record {rec.id}: attribute names {list(rkeys)} differ from {list(keys)}"
                )
            for k, v in rec.attributes.items():
                vocab[k].add(v)
        if keys is None:
            return cls(())
        return cls(tuple((k, tuple(sorted(vocab[k])) + (UNSEEN,)) for k in keys))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.blocks)

    @property
    def offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for _, values in self.blocks:
            out.append(acc)
            acc += len(values)
        return tuple(out)

    @property
    def n_slots(self) -> int:
        return sum(len(v) for _, v in self.blocks)

    def slot_names(self) -> list[str]:
        return [f"{name}={value}" for name, values in self.blocks for value in values]

    def block_of_slot(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.blocks)), [len(v) for _, v in self.blocks])

    def encode(self, attributes: Mapping[str, str]) -> "AttributeVector":
        if set(attributes) != set(self.names):
            raise DatasetError(
                f"attribute names {sorted(attributes)} do not match layout {list(self.names)}"
            )
        slots = []
        for off, (name, values) in zip(self.offsets, self.blocks):
            v = attributes[name]
            pos = values.index(v) if v in values[:-1] else len(values) - 1
            slots.append(off + pos)
        return AttributeVector(self, tuple(slots))

    def to_json(self) -> list:
        return [{"name": name, "values": list(values)} for name, values in self.blocks]

    @classmethod
    def from_json(cls, obj) -> "AttributeLayout":
        blocks = []
        for b in obj:
            values = tuple(b["values"])
            if not values or values[-1] != UNSEEN:
                raise DatasetError(f"attribute block {b['name']!r} lacks the unseen slot")
            blocks.append((b["name"], values))
        return cls(tuple(blocks))


@dataclass(frozen=True)
class AttributeVector:
    layout: AttributeLayout
    slots: tuple[int, ...]

    def dense(self) -> np.ndarray:
        x = np.zeros(self.layout.n_slots)
        x[list(self.slots)] = 1.0
        return x


@dataclass(frozen=True, eq=False)
class NeighborSet:
    """Neighbours of one block; ``distances`` rows are (euclidean, trajectory) km."""

    center_id: str
    neighbor_ids: tuple[str, ...]
    distances: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.distances, dtype=float)
        object.__setattr__(self, "distances", d)
        k = len(self.neighbor_ids)
        if k < 1:
            raise DatasetError(f"block {self.center_id}: neighbour set is empty")
        if d.shape != (2, k):
            raise DatasetError(f"block {self.center_id}: distance matrix shape {d.shape} != (2, {k})")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise DatasetError(f"block {self.center_id}: distances must be finite and nonnegative")
        if np.any(d[1] < d[0]):
            raise DatasetError(f"block {self.center_id}: trajectory shorter than straight line")

    @property
    def k(self) -> int:
        return len(self.neighbor_ids)

    def __eq__(self, other):
        if not isinstance(other, NeighborSet):
            return NotImplemented
        return (
            self.center_id == other.center_id
            and self.neighbor_ids == other.neighbor_ids
            and np.array_equal(self.distances, other.distances)
        )


@dataclass
class PoiDataset:
    """Validated POIs plus the frozen attribute layout."""

    records: list[PoiRecord]
    layout: AttributeLayout = None

    def __post_init__(self):
        self.by_id = {}
        for rec in self.records:
            if rec.id in self.by_id:
                raise DatasetError(f"duplicate id {rec.id!r}")
            self.by_id[rec.id] = rec
        if self.layout is None:
            self.layout = AttributeLayout.infer(self.records)
        self.attributes = {r.id: self.layout.encode(r.attributes) for r in self.records if r.is_block}

    @classmethod
    def load(cls, path, layout=None) -> "PoiDataset":
        return cls(load_pois(path), layout)

    @property
    def blocks(self) -> list[PoiRecord]:
        return [r for r in self.records if r.is_block]

    @property
    def facilities(self) -> list[PoiRecord]:
        return [r for r in self.records if not r.is_block]

    def priced_block_ids(self) -> list[str]:
        return sorted(r.id for r in self.records if r.is_block and r.price is not None)

    def prices(self, ids: Iterable[str]) -> dict[str, float]:
        return {i: self.by_id[i].price for i in ids}

    def __len__(self):
        return len(self.records)


@dataclass
class Graph:
    radius_km: float
    neighbors: dict[str, NeighborSet]
    isolated: tuple[str, ...] = ()
    # road model description (see geo.road_model_from_dict); None means the default
    road_model: dict | None = None

    def mean_counts(self, dataset: PoiDataset) -> dict:
        """Average neighbouring blocks and facilities per covered block."""
        if not self.neighbors:
            return {"blocks": 0.0, "facilities": 0.0, "covered": 0, "isolated": len(self.isolated)}
        nb = [sum(dataset.by_id[j].is_block for j in ns.neighbor_ids) for ns in self.neighbors.values()]
        nf = [ns.k - b for ns, b in zip(self.neighbors.values(), nb)]
        return {
            "blocks": float(np.mean(nb)),
            "facilities": float(np.mean(nf)),
            "covered": len(self.neighbors),
            "isolated": len(self.isolated),
        }


def neighbor_set_for(
    center_id: str,
    lat: float,
    lon: float,
    index: SpatialIndex,
    is_block: np.ndarray,
    radius_km: float,
    road_model: RoadModel,
) -> NeighborSet | None:
    """Blocks first, then facilities; each part nearest first with id tiebreak."""
    idx, d = index.query_indices(lat, lon, radius_km, exclude_id=center_id)
    if len(idx) == 0:
        return None
    # query order is (distance, id); a stable partition keeps it within each part
    order = np.argsort(~is_block[idx], kind="stable")
    idx, d = idx[order], d[order]
    traj = road_model.trajectory(lat, lon, index.lats[idx], index.lons[idx], d)
    return NeighborSet(
        center_id,
        tuple(str(index.ids[i]) for i in idx),
        np.vstack([d, np.maximum(traj, d)]),
    )


def build_graph(
    records: Sequence[PoiRecord] | PoiDataset,
    radius_km: float,
    road_model: RoadModel | None = None,
) -> Graph:
    """Neighbour sets for every residential block.

    Blocks with nothing inside the radius are listed in ``Graph.isolated``.
    """
    if not radius_km > 0:
        raise DatasetError(f"radius must be positive, got {radius_km}")
    if isinstance(records, PoiDataset):
        records = records.records
    road_model = road_model or DetourRoadModel()
    index = SpatialIndex(
        [r.id for r in records],
        [r.location.lat for r in records],
        [r.location.lon for r in records],
        radius_km,
    )
    is_block = np.array([r.is_block for r in records], dtype=bool)
    neighbors, isolated = {}, []
    for rec in records:
        if not rec.is_block:
            continue
        ns = neighbor_set_for(
            rec.id, rec.location.lat, rec.location.lon, index, is_block, radius_km, road_model
        )
        if ns is None:
            isolated.append(rec.id)
        else:
            neighbors[rec.id] = ns
    return Graph(float(radius_km), neighbors, tuple(isolated), road_model.describe())


def save_graph(graph: Graph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format": GRAPH_FORMAT,
            "radius_km": graph.radius_km,
            "isolated": list(graph.isolated),
            "road_model": graph.road_model,
        }
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for cid, ns in graph.neighbors.items():
            row = {
                "center": cid,
                "neighbors": list(ns.neighbor_ids),
                "distances": [ns.distances[0].tolist(), ns.distances[1].tolist()],
            }
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def load_graph(path) -> Graph:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise PoiFormatError("graph file is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise PoiFormatError(f"invalid graph header ({exc.msg})", 1) from exc
    if header.get("format") != GRAPH_FORMAT:
        raise PoiFormatError(f"unsupported graph format {header.get('format')!r}", 1)
    neighbors = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        try:
            row = json.loads(raw)
            ns = NeighborSet(row["center"], tuple(row["neighbors"]), np.array(row["distances"], dtype=float))
        except (json.JSONDecodeError, KeyError, TypeError, DatasetError) as exc:
            raise PoiFormatError(f"bad neighbour set ({exc})", lineno) from exc
        neighbors[ns.center_id] = ns
    return Graph(
        float(header["radius_km"]), neighbors, tuple(header.get("isolated", ())), header.get("road_model")
    )


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[str, ...]
    validation_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int = 0

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train_ids), len(self.validation_ids), len(self.test_ids)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(priced_block_ids: Iterable[str], seed: int = 0, ratios=(0.7, 0.1, 0.2)) -> DatasetSplit:
    """Random 7:1:2 partition; deterministic in (id set, seed)."""
    ids = sorted(set(priced_block_ids))
    n = len(ids)
    if n < 10:
        raise DatasetError(f"need at least 10 priced blocks to split, got {n}")
    n_train = _round_half_up(ratios[0] * n)
    n_val = _round_half_up(ratios[1] * n)
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    return DatasetSplit(
        tuple(sorted(shuffled[:n_train])),
        tuple(sorted(shuffled[n_train : n_train + n_val])),
        tuple(sorted(shuffled[n_train + n_val :])),
        seed,
    )
