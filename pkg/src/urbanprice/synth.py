"""Synthetic cities whose block prices are generated by the pricing model itself."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.special import expit

from .dataset import (
    FACILITY,
    FACILITY_CATEGORIES,
    RESIDENTIAL,
    UNSEEN,
    AttributeLayout,
    PoiRecord,
    build_graph,
)
from .geo import EARTH_RADIUS_KM, GeoPoint, road_model_from_dict
from .model import ModelParams, distance_weights

DEFAULT_ATTRIBUTES = {
    "type": ("house", "apartment"),
    "administrative_district": tuple(f"district_{i}" for i in range(1, 9)),
    "developer": tuple(f"developer_{i}" for i in range(1, 13)),
    "age_bucket": ("0-5y", "5-10y", "10-20y", "20y+"),
    "other": ("plain", "gated", "riverside"),
}

# (mean, spread) of drawn slot weights per attribute block
DEFAULT_THETA_PRIOR = {
    "type": (0.6, 0.5),
    "administrative_district": (0.4, 0.4),
    "developer": (0.2, 0.2),
    "age_bucket": (0.2, 0.2),
    "other": (0.1, 0.1),
}

DEFAULT_CATEGORY_PRICES = {
    "governmental": (64000.0, 76000.0),
    "educational": (66000.0, 80000.0),
    "financial": (62000.0, 74000.0),
    "recreational": (58000.0, 70000.0),
    "medical": (60000.0, 72000.0),
    "commercial": (55000.0, 65000.0),
    "transportation": (64000.0, 78000.0),
    "scenic": (68000.0, 82000.0),
    "wasteyard": (40000.0, 50000.0),
    "cemetery": (42000.0, 52000.0),
}

PRICE_FLOOR = 1.0


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_blocks: int = 2000
    n_facilities: int = 5000
    bbox: tuple = (39.80, 116.20, 40.30, 116.85)  # lat_min, lon_min, lat_max, lon_max
    radius_km: float = 1.0
    attributes: dict = field(default_factory=lambda: {k: tuple(v) for k, v in DEFAULT_ATTRIBUTES.items()})
    true_theta: dict | None = None
    true_phi: tuple = (-1.5, -0.5)
    category_prices: dict = field(default_factory=lambda: dict(DEFAULT_CATEGORY_PRICES))
    noise_std: float = 0.0
    noise_fraction: float = 0.0
    known_fraction: float = 1.0
    n_clusters: int = 4
    cluster_radius_km: float = 2.0
    road_model: dict = field(default_factory=lambda: {"kind": "manhattan"})
    seed: int = 0

    def __post_init__(self):
        if self.n_blocks <= 0 or self.n_facilities <= 0:
            raise SynthError("n_blocks and n_facilities must be positive")
        lat0, lon0, lat1, lon1 = self.bbox
        if not (-90 <= lat0 < lat1 <= 90 and -180 <= lon0 < lon1 <= 180):
            raise SynthError(f"degenerate bounding box {self.bbox}")
        if not self.radius_km > 0:
            raise SynthError("radius_km must be positive")
        if self.noise_std < 0 or self.noise_fraction < 0:
            raise SynthError("noise must be nonnegative")
        if not 0 < self.known_fraction <= 1:
            raise SynthError("known_fraction must be in (0, 1]")
        if self.n_clusters < 0 or self.cluster_radius_km <= 0:
            raise SynthError("invalid cluster settings")
        if len(self.true_phi) != 2:
            raise SynthError("true_phi needs one weight per distance type")
        missing = set(FACILITY_CATEGORIES) - set(self.category_prices)
        if missing:
            raise SynthError(f"no price range for categories {sorted(missing)}")
        for cat, (lo, hi) in self.category_prices.items():
            if not 0 < lo <= hi:
                raise SynthError(f"bad price range for {cat}: {(lo, hi)}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("bbox", "true_phi"):
            if key in d:
                d[key] = tuple(d[key])
        if "attributes" in d:
            d["attributes"] = {k: tuple(v) for k, v in d["attributes"].items()}
        if "category_prices" in d:
            d["category_prices"] = {k: tuple(v) for k, v in d["category_prices"].items()}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SynthError(f"unknown config field(s) {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bbox"] = list(self.bbox)
        d["true_phi"] = list(self.true_phi)
        d["attributes"] = {k: list(v) for k, v in self.attributes.items()}
        d["category_prices"] = {k: list(v) for k, v in self.category_prices.items()}
        return d

    def area_km2(self) -> float:
        lat0, lon0, lat1, lon1 = self.bbox
        ns = math.radians(lat1 - lat0) * EARTH_RADIUS_KM
        ew = math.radians(lon1 - lon0) * EARTH_RADIUS_KM * math.cos(math.radians((lat0 + lat1) / 2))
        return ns * ew

    def expected_facilities_per_block(self) -> float:
        return self.n_facilities * math.pi * self.radius_km**2 / self.area_km2()


def _draw_theta(cfg: SynthConfig, rng) -> dict:
    out = {}
    for name, values in cfg.attributes.items():
        mean, spread = DEFAULT_THETA_PRIOR.get(name, (0.0, 0.2))
        for v in values:
            out[f"{name}={v}"] = float(rng.normal(mean, spread))
    return out


def _block_locations(cfg: SynthConfig, rng):
    """Uniform over the box, or uniform inside ``n_clusters`` disks ("districts")."""
    lat0, lon0, lat1, lon1 = cfg.bbox
    n = cfg.n_blocks
    if cfg.n_clusters == 0:
        return rng.uniform(lat0, lat1, n), rng.uniform(lon0, lon1, n)
    deg_lat = math.degrees(1.0 / EARTH_RADIUS_KM)
    deg_lon = deg_lat / math.cos(math.radians((lat0 + lat1) / 2))
    m_lat, m_lon = cfg.cluster_radius_km * deg_lat, cfg.cluster_radius_km * deg_lon
    if lat1 - lat0 <= 2 * m_lat or lon1 - lon0 <= 2 * m_lon:
        raise SynthError("districts do not fit inside the bounding box")
    c_lat = rng.uniform(lat0 + m_lat, lat1 - m_lat, cfg.n_clusters)
    c_lon = rng.uniform(lon0 + m_lon, lon1 - m_lon, cfg.n_clusters)
    which = rng.integers(0, cfg.n_clusters, n)
    r = cfg.cluster_radius_km * np.sqrt(rng.uniform(0, 1, n))
    a = rng.uniform(0, 2 * math.pi, n)
    return c_lat[which] + r * np.sin(a) * deg_lat, c_lon[which] + r * np.cos(a) * deg_lon


def _records(cfg, f_lat, f_lon, f_cat, b_lat, b_lon, b_attrs, b_price=None):
    recs = [
        PoiRecord(f"f{i:06d}", FACILITY, GeoPoint(float(f_lat[i]), float(f_lon[i])), category=f_cat[i])
        for i in range(cfg.n_facilities)
    ]
    for i in range(cfg.n_blocks):
        price = None if b_price is None or b_price[i] is None else float(b_price[i])
        recs.append(
            PoiRecord(
                f"b{i:06d}",
                RESIDENTIAL,
                GeoPoint(float(b_lat[i]), float(b_lon[i])),
                price=price,
                attributes=b_attrs[i],
            )
        )
    return recs


def equilibrium_prices(graph, block_ids, attributes, layout, theta, phi, facility_prices):
    """Solve h = S * (F_blocks . h + F_facilities . u) for every block at once."""
    pos = {b: i for i, b in enumerate(block_ids)}
    rows, cols, vals = [], [], []
    rhs = np.zeros(len(block_ids))
    S = np.empty(len(block_ids))
    for i, bid in enumerate(block_ids):
        ns = graph.neighbors[bid]
        F = distance_weights(ns.distances, phi)
        S[i] = expit(theta[list(attributes[bid].slots)].sum())
        for j, pid in enumerate(ns.neighbor_ids):
            if pid in pos:
                rows.append(i)
                cols.append(pos[pid])
                vals.append(F[j])
            else:
                rhs[i] += F[j] * facility_prices[pid]
    n = len(block_ids)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    M = sp.identity(n, format="csr") - sp.diags(S) @ A
    return np.asarray(spsolve(M.tocsc(), S * rhs))


def generate_city(config: SynthConfig):
    """Return (records, planted ModelParams).

    Block prices follow the pricing model exactly under the planted
    parameters, then receive Gaussian noise clamped at a positive floor.
    Blocks with no neighbour inside the radius are moved next to a facility.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    lat0, lon0, lat1, lon1 = cfg.bbox
    road = road_model_from_dict(cfg.road_model)

    f_lat = rng.uniform(lat0, lat1, cfg.n_facilities)
    f_lon = rng.uniform(lon0, lon1, cfg.n_facilities)
    cats = sorted(cfg.category_prices)
    f_cat = [cats[i] for i in rng.integers(0, len(cats), cfg.n_facilities)]
    f_price = np.array([rng.uniform(*cfg.category_prices[c]) for c in f_cat])

    b_lat, b_lon = _block_locations(cfg, rng)
    names = list(cfg.attributes)
    b_attrs = [
        {name: cfg.attributes[name][rng.integers(0, len(cfg.attributes[name]))] for name in names}
        for _ in range(cfg.n_blocks)
    ]
    true_theta = dict(cfg.true_theta) if cfg.true_theta is not None else _draw_theta(cfg, rng)

    km_lat = math.degrees(1.0 / EARTH_RADIUS_KM)
    for _ in range(50):
        recs = _records(cfg, f_lat, f_lon, f_cat, b_lat, b_lon, b_attrs)
        graph = build_graph(recs, cfg.radius_km, road)
        if not graph.isolated:
            break
        for bid in graph.isolated:
            i = int(bid[1:])
            anchor = rng.integers(0, cfg.n_facilities)
            r = 0.5 * cfg.radius_km * math.sqrt(rng.uniform())
            a = rng.uniform(0, 2 * math.pi)
            b_lat[i] = np.clip(f_lat[anchor] + r * math.sin(a) * km_lat, lat0, lat1)
            b_lon[i] = np.clip(
                f_lon[anchor] + r * math.cos(a) * km_lat / math.cos(math.radians(f_lat[anchor])),
                lon0,
                lon1,
            )
    else:
        raise SynthError("could not give every block a neighbour; enlarge radius or density")

    layout = AttributeLayout.infer(recs)
    theta = np.array(
        [0.0 if s.endswith("=" + UNSEEN) else true_theta[s] for s in layout.slot_names()]
    )
    phi = np.asarray(cfg.true_phi, dtype=float)
    block_ids = [f"b{i:06d}" for i in range(cfg.n_blocks)]
    fac_prices = {f"f{i:06d}": float(f_price[i]) for i in range(cfg.n_facilities)}
    attrs = {r.id: layout.encode(r.attributes) for r in recs if r.is_block}
    h_true = equilibrium_prices(graph, block_ids, attrs, layout, theta, phi, fac_prices)

    sd = np.hypot(cfg.noise_std, cfg.noise_fraction * h_true)
    h_obs = np.maximum(h_true + rng.normal(0.0, 1.0, cfg.n_blocks) * sd, PRICE_FLOOR)
    if cfg.noise_std == 0 and cfg.noise_fraction == 0:
        h_obs = np.maximum(h_true, PRICE_FLOOR)
    n_known = int(math.floor(cfg.known_fraction * cfg.n_blocks + 0.5))
    known = np.zeros(cfg.n_blocks, dtype=bool)
    known[rng.permutation(cfg.n_blocks)[:n_known]] = True
    b_price = [float(h_obs[i]) if known[i] else None for i in range(cfg.n_blocks)]

    recs = _records(cfg, f_lat, f_lon, f_cat, b_lat, b_lon, b_attrs, b_price)
    price_ids = list(fac_prices) + [b for b, k in zip(block_ids, known) if not k]
    prices = list(fac_prices.values()) + [float(h_true[i]) for i in range(cfg.n_blocks) if not known[i]]
    planted = ModelParams(
        layout,
        theta,
        phi,
        tuple(price_ids),
        np.array(prices),
        {
            "kind": "planted",
            "radius_km": cfg.radius_km,
            "seed": cfg.seed,
            "road_model": road.describe(),
        },
    )
    return recs, planted


def _centered_by_block(params: ModelParams) -> np.ndarray:
    # one-hot blocks are shift-invariant together; compare within-block contrasts
    out = params.theta.copy()
    for off, (_, values) in zip(params.layout.offsets, params.layout.blocks):
        seen = slice(off, off + len(values) - 1)
        out[seen] -= out[seen].mean() if len(values) > 1 else 0.0
        out[off + len(values) - 1] = 0.0
    return out


def _cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def plant_report(planted: ModelParams, learned: ModelParams, ids=None) -> dict:
    """Compare learned parameters against the planted truth.

    ``ids`` selects which price variables to compare (default: all planted).
    """
    ids = list(planted.price_ids if ids is None else ids)
    missing = [i for i in ids if learned.price_index(i) is None or planted.price_index(i) is None]
    if missing:
        raise SynthError(f"{len(missing)} price id(s) not present in both parameter sets, e.g. {missing[:3]}")
    if planted.layout != learned.layout:
        raise SynthError("attribute layouts differ")
    p = np.array([planted.price_of(i) for i in ids])
    q = np.array([learned.price_of(i) for i in ids])
    rel = np.abs(q - p) / np.abs(p)
    if len(ids) >= 2 and np.std(p) > 0 and np.std(q) > 0:
        corr = float(np.corrcoef(p, q)[0, 1])
    elif len(ids) >= 1 and np.array_equal(p, q):
        corr = 1.0
    else:
        corr = float("nan")
    return {
        "n": len(ids),
        "relative_error": dict(zip(ids, rel.tolist())),
        "mean_relative_error": float(rel.mean()) if len(ids) else 0.0,
        "max_relative_error": float(rel.max()) if len(ids) else 0.0,
        "price_correlation": corr,
        "theta_cosine": _cosine(_centered_by_block(planted), _centered_by_block(learned)),
        "phi_cosine": _cosine(planted.phi, learned.phi),
    }
