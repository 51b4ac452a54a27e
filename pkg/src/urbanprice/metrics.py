"""Error metrics, evaluation reports and interpretability tables."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from .dataset import FACILITY_CATEGORIES, PoiRecord
from .model import DISTANCE_TYPES, ModelParams

DEFAULT_UNIT = "CNY/m²"


class MetricError(ValueError):
    pass


def _pair(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(truth, dtype=float).reshape(-1)
    p = np.asarray(pred, dtype=float).reshape(-1)
    if t.shape != p.shape:
        raise MetricError(f"length mismatch: {t.size} truths vs {p.size} predictions")
    if t.size == 0:
        raise MetricError("metrics need at least one value")
    return t, p


def mae(truth, pred) -> float:
    t, p = _pair(truth, pred)
    return float(np.mean(np.abs(t - p)))


def rmse(truth, pred) -> float:
    # root of the mean squared error; same unit as MAE
    t, p = _pair(truth, pred)
    return float(np.sqrt(np.mean((t - p) ** 2)))


def r2(truth, pred) -> float:
    t, p = _pair(truth, pred)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricError("R² is undefined for a constant truth vector")
    return 1.0 - float(np.sum((t - p) ** 2)) / ss_tot


@dataclass
class EvalReport:
    method: str
    mae: float
    rmse: float
    r2: float
    m: int
    extra: dict = field(default_factory=dict)

    @classmethod
    def compute(cls, method: str, truth, pred, **extra) -> "EvalReport":
        t, p = _pair(truth, pred)
        return cls(method, mae(t, p), rmse(t, p), r2(t, p), int(t.size), dict(extra))

    def to_json(self) -> dict:
        return asdict(self)


def _num(x: float, digits: int = 0) -> str:
    if not math.isfinite(x):
        return str(x)
    return f"{x:,.{digits}f}"


def aggregate(reports: Sequence[EvalReport]) -> dict:
    """Mean and population std of each metric across runs of one method."""
    if not reports:
        raise MetricError("nothing to aggregate")
    out = {"method": reports[0].method, "runs": len(reports)}
    for key in ("mae", "rmse", "r2"):
        vals = np.array([getattr(r, key) for r in reports])
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def render_table(rows: Sequence[EvalReport] | Sequence[dict], title: str | None = None) -> str:
    """Aligned plain-text table: method, MAE, RMSE, R².

    Accepts single reports or :func:`aggregate` outputs (printed as mean ± std).
    """
    lines = [title] if title else []
    cells = [("Method", "MAE", "RMSE", "R²")]
    for r in rows:
        if isinstance(r, EvalReport):
            cells.append((r.method, _num(r.mae), _num(r.rmse), f"{r.r2:.4f}"))
        else:
            cells.append(
                (
                    r["method"],
                    f"{_num(r['mae']['mean'])} ± {_num(r['mae']['std'])}",
                    f"{_num(r['rmse']['mean'])} ± {_num(r['rmse']['std'])}",
                    f"{r['r2']['mean']:.4f} ± {r['r2']['std']:.4f}",
                )
            )
    widths = [max(len(c[i]) for c in cells) for i in range(4)]
    for n, c in enumerate(cells):
        lines.append("  ".join([c[0].ljust(widths[0])] + [c[i].rjust(widths[i]) for i in range(1, 4)]))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def reports_to_json(rows: Iterable[EvalReport | dict]) -> str:
    return json.dumps([r.to_json() if isinstance(r, EvalReport) else r for r in rows], indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Interpretability


def attribute_preferences(params: ModelParams) -> dict[str, float]:
    """L1 mass of |theta| per attribute block, normalised to sum to 1.

    All-zero theta gives the uniform distribution.
    """
    layout = params.layout
    mass = np.bincount(layout.block_of_slot(), weights=np.abs(params.theta), minlength=len(layout.blocks))
    names = list(layout.names)
    total = mass.sum()
    if total == 0 or not math.isfinite(total):
        return {n: 1.0 / len(names) for n in names}
    return {n: float(m / total) for n, m in zip(names, mass)}


def distance_preferences(params: ModelParams) -> dict[str, float]:
    """|phi| normalised by its L1 norm; phi = 0 gives (0.5, 0.5)."""
    a = np.abs(np.asarray(params.phi, dtype=float))
    total = a.sum()
    if total == 0:
        return {n: 1.0 / len(a) for n in DISTANCE_TYPES}
    return {n: float(x / total) for n, x in zip(DISTANCE_TYPES, a)}


def format_premium(base: float, premium: float, unit: str = DEFAULT_UNIT) -> str:
    """``(66,125)+6,082 CNY/m²`` style: base in parentheses, signed offset."""
    sign = "+" if premium >= 0 else "-"
    return f"({_num(base)}){sign}{_num(abs(premium))} {unit}"


def facility_premiums(
    params: ModelParams,
    pois: Iterable[PoiRecord],
    city_mean: float,
    unit: str = DEFAULT_UNIT,
    include: set | None = None,
) -> dict:
    """Per-category premium over the city mean and per-category rankings.

    Rankings are sorted by learned price descending, ties by id. Categories
    without any learned facility price are omitted. ``include`` restricts
    the facilities considered (e.g. to those some priced block observes).
    """
    by_cat: dict[str, list[tuple[str, float]]] = {}
    for rec in pois:
        if rec.is_block or (include is not None and rec.id not in include):
            continue
        idx = params.price_index(rec.id)
        if idx is None:
            continue
        by_cat.setdefault(rec.category, []).append((rec.id, float(params.prices[idx])))
    order = [c for c in FACILITY_CATEGORIES if c in by_cat] + sorted(set(by_cat) - set(FACILITY_CATEGORIES))
    premiums, rankings = {}, {}
    for cat in order:
        items = by_cat[cat]
        mean_price = math.fsum(p for _, p in items) / len(items)
        premium = mean_price - city_mean
        premiums[cat] = {
            "count": len(items),
            "mean_price": mean_price,
            "premium": premium,
            "label": format_premium(city_mean, premium, unit),
        }
        rankings[cat] = [
            {"id": i, "price": p} for i, p in sorted(items, key=lambda t: (-t[1], t[0]))
        ]
    return {"city_mean": float(city_mean), "unit": unit, "premiums": premiums, "rankings": rankings}


def render_preferences(prefs: Mapping[str, float], title: str) -> str:
    width = max([len(k) for k in prefs] + [len(title)])
    lines = [title, "-" * (width + 8)]
    lines += [f"{k.ljust(width)}  {v:.4f}" for k, v in prefs.items()]
    return "\n".join(lines)


def render_premiums(table: dict, top: int = 3) -> str:
    lines = ["Category premiums over the city mean"]
    width = max([len(c) for c in table["premiums"]] + [8])
    for cat, row in table["premiums"].items():
        best = ", ".join(r["id"] for r in table["rankings"][cat][:top])
        lines.append(f"{cat.ljust(width)}  {row['label']}  n={row['count']}  top: {best}")
    return "\n".join(lines)


def spearman(a, b) -> float:
    """Rank correlation (average ranks for ties)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size != b.size or a.size < 2:
        raise MetricError("spearman needs two equal-length vectors of size >= 2")
    return float(spearmanr(a, b).statistic)
