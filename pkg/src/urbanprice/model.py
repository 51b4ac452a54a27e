"""
Neighbour-value pricing model.

A block's price is predicted as

    h_hat = S(x; theta) * sum_j w_j F_j(D; phi)

where ``w`` holds the values of its k neighbours (priced blocks fixed at
their known price, facilities and unpriced blocks learnable), ``F`` is a
softmax over the distance scores ``phi @ D`` and ``S`` is a sigmoid of the
block's one-hot attribute encoding. Training minimises the summed squared
error over priced blocks.

Variables are addressed by integer keys laid out as
``[theta slots | phi (euclidean, trajectory) | price table]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .dataset import AttributeLayout, AttributeVector, Graph, NeighborSet

SNAPSHOT_VERSION = 1
DISTANCE_TYPES = ("euclidean", "trajectory")


class ModelError(ValueError):
    pass


class SnapshotError(ModelError):
    pass


@dataclass
class ModelParams:
    layout: AttributeLayout
    theta: np.ndarray
    phi: np.ndarray
    price_ids: tuple[str, ...]
    prices: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).copy()
        self.phi = np.asarray(self.phi, dtype=float).copy()
        self.prices = np.asarray(self.prices, dtype=float).copy()
        self.price_ids = tuple(self.price_ids)
        if self.theta.shape != (self.layout.n_slots,):
            raise ModelError(f"theta has {self.theta.size} entries, layout has {self.layout.n_slots} slots")
        if self.phi.shape != (len(DISTANCE_TYPES),):
            raise ModelError(f"phi must have {len(DISTANCE_TYPES)} entries")
        if self.prices.shape != (len(self.price_ids),):
            raise ModelError("price_ids and prices differ in length")
        self._price_index = {pid: i for i, pid in enumerate(self.price_ids)}
        if len(self._price_index) != len(self.price_ids):
            raise ModelError("duplicate price ids")

    @classmethod
    def initial(cls, layout: AttributeLayout, price_ids: Sequence[str], init_price: float, meta=None):
        """theta = 0, phi = 0 (so S = 0.5 and F uniform); every price at ``init_price``."""
        return cls(
            layout,
            np.zeros(layout.n_slots),
            np.zeros(len(DISTANCE_TYPES)),
            tuple(price_ids),
            np.full(len(price_ids), float(init_price)),
            dict(meta or {}),
        )

    @property
    def n_theta(self) -> int:
        return self.theta.size

    @property
    def phi_offset(self) -> int:
        return self.n_theta

    @property
    def price_offset(self) -> int:
        return self.n_theta + self.phi.size

    @property
    def n_variables(self) -> int:
        return self.price_offset + self.prices.size

    def price_index(self, pid: str) -> int | None:
        return self._price_index.get(pid)

    def price_of(self, pid: str) -> float:
        return float(self.prices[self._price_index[pid]])

    @property
    def price_table(self) -> dict[str, float]:
        return dict(zip(self.price_ids, self.prices.tolist()))

    def variable_name(self, key: int) -> str:
        if key < self.phi_offset:
            return "theta:" + self.layout.slot_names()[key]
        if key < self.price_offset:
            return "phi:" + DISTANCE_TYPES[key - self.phi_offset]
        return "price:" + self.price_ids[key - self.price_offset]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.phi, self.prices])

    def with_vector(self, v: np.ndarray) -> "ModelParams":
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_variables,):
            raise ModelError("variable vector has the wrong length")
        return ModelParams(
            self.layout,
            v[: self.phi_offset],
            v[self.phi_offset : self.price_offset],
            self.price_ids,
            v[self.price_offset :],
            dict(self.meta),
        )

    def copy(self) -> "ModelParams":
        return self.with_vector(self.vector())

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.price_ids == other.price_ids
            and np.array_equal(self.theta, other.theta)
            and np.array_equal(self.phi, other.phi)
            and np.array_equal(self.prices, other.prices)
            and self.meta == other.meta
        )


@dataclass
class ForwardTrace:
    w: np.ndarray
    learnable: np.ndarray
    F: np.ndarray
    S: float
    z: float
    prediction: float


@dataclass
class GradientShard:
    """Gradient terms keyed by variable, as emitted by the map phase.

    ``order`` gives the global rank of the training instance that produced
    each term; reductions sum every variable's terms in ascending rank so the
    result does not depend on how instances were grouped into shards.
    ``jacobian`` holds d(prediction)/d(variable) for each term, so the
    Gauss-Newton curvature of a term is ``2 * jacobian**2``; reduced shards
    carry summed ``curvature`` instead and an empty ``jacobian``.
    ``residuals`` are the signed per-instance errors aligned with ``loss_order``.
    """

    keys: np.ndarray
    values: np.ndarray
    order: np.ndarray
    jacobian: np.ndarray
    loss_terms: np.ndarray
    loss_order: np.ndarray
    index: int = 0
    curvature: np.ndarray | None = None
    residuals: np.ndarray | None = None

    def __post_init__(self):
        if self.curvature is None:
            self.curvature = 2.0 * self.jacobian * self.jacobian
        if self.residuals is None:
            # unsigned; only hand-built shards take this path
            self.residuals = np.sqrt(self.loss_terms)

    @classmethod
    def empty(cls, index: int = 0) -> "GradientShard":
        i, f = np.empty(0, dtype=np.int64), np.empty(0, dtype=float)
        return cls(i, f, i, f, f, i, index)

    def directional(self, direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-instance change of the prediction along ``direction``: (ranks, J @ d)."""
        ranks = self.loss_order
        pos = np.searchsorted(ranks, self.order)
        jd = np.bincount(pos, weights=self.jacobian * direction[self.keys], minlength=len(ranks))
        return ranks, jd

    @property
    def loss(self) -> float:
        return math.fsum(self.loss_terms[np.argsort(self.loss_order, kind="stable")])

    def as_dict(self, params: ModelParams | None = None) -> dict:
        """Per-variable sums; keyed by variable name when ``params`` is given."""
        out: dict = {}
        for k, v in zip(self.keys.tolist(), self.values.tolist()):
            name = params.variable_name(k) if params is not None else k
            out[name] = out.get(name, 0.0) + v
        return out


def resolve_value(pid: str, params: ModelParams, known_prices: Mapping[str, float]):
    if pid in known_prices:
        return float(known_prices[pid]), False
    idx = params.price_index(pid)
    if idx is None:
        raise ModelError(f"neighbour {pid!r} has neither a known price nor a price variable")
    return float(params.prices[idx]), True


def assemble_w(nbrs: NeighborSet, params: ModelParams, known_prices: Mapping[str, float]):
    """Neighbour values in column order plus the learnable mask."""
    vals = [resolve_value(pid, params, known_prices) for pid in nbrs.neighbor_ids]
    w = np.array([v for v, _ in vals], dtype=float)
    mask = np.array([m for _, m in vals], dtype=bool)
    return w, mask


def distance_weights(D, phi) -> np.ndarray:
    """Softmax over the k column scores ``phi @ D``."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    scores = np.asarray(phi, dtype=float) @ D
    scores = scores - scores.max()
    e = np.exp(scores)
    return e / e.sum()


def attribute_scale(x: AttributeVector | np.ndarray, theta) -> float:
    theta = np.asarray(theta, dtype=float)
    if isinstance(x, AttributeVector):
        if x.layout.n_slots != theta.size:
            raise ModelError("attribute vector does not match the theta layout")
        z = float(theta[list(x.slots)].sum())
    else:
        x = np.asarray(x, dtype=float)
        if x.shape != theta.shape:
            raise ModelError("attribute vector does not match the theta layout")
        z = float(theta @ x)
    return float(expit(z))


def forward(
    x: AttributeVector, nbrs: NeighborSet, params: ModelParams, known_prices: Mapping[str, float]
) -> ForwardTrace:
    w, mask = assemble_w(nbrs, params, known_prices)
    F = distance_weights(nbrs.distances, params.phi)
    z = float(params.theta[list(x.slots)].sum())
    S = float(expit(z))
    return ForwardTrace(w, mask, F, S, z, S * float(w @ F))


def instance_loss_and_grad(
    x: AttributeVector,
    nbrs: NeighborSet,
    params: ModelParams,
    known_prices: Mapping[str, float],
    target: float | None = None,
    rank: int = 0,
):
    """Squared error of one block and its analytic gradient.

    ``target`` defaults to ``known_prices[nbrs.center_id]``.
    """
    if target is None:
        if nbrs.center_id not in known_prices:
            raise ModelError(f"block {nbrs.center_id!r} has no known price")
        target = known_prices[nbrs.center_id]
    tr = forward(x, nbrs, params, known_prices)
    resid = tr.prediction - float(target)
    wF = float(tr.w @ tr.F)

    keys, jac = [], []
    # prices: d h_hat / d u_j = S F_j
    for j in np.flatnonzero(tr.learnable):
        keys.append(params.price_offset + params.price_index(nbrs.neighbor_ids[j]))
        jac.append(tr.S * tr.F[j])
    # theta: d h_hat / d theta_slot = S (1 - S) x_slot (w . F)
    for s in x.slots:
        keys.append(s)
        jac.append(tr.S * (1.0 - tr.S) * wF)
    # phi: d h_hat / d phi_r = S sum_j w_j F_j (D_rj - sum_i F_i D_ri)
    Dbar = nbrs.distances @ tr.F
    for r in range(params.phi.size):
        keys.append(params.phi_offset + r)
        jac.append(tr.S * float(np.sum(tr.w * tr.F * (nbrs.distances[r] - Dbar[r]))))

    jac = np.array(jac, dtype=float)
    shard = GradientShard(
        np.array(keys, dtype=np.int64),
        2.0 * resid * jac,
        np.full(len(keys), rank, dtype=np.int64),
        jac,
        np.array([resid * resid]),
        np.array([rank], dtype=np.int64),
        residuals=np.array([resid]),
    )
    return resid * resid, shard


# ---------------------------------------------------------------------------
# Vectorised evaluation over many blocks


@dataclass
class InstanceBatch:
    """Blocks flattened into CSR-style column arrays for vectorised passes.

    ``col_var`` indexes the price table (-1 for fixed neighbours whose value
    sits in ``col_fixed``). ``ranks`` are global instance ranks used to order
    reductions.
    """

    ids: tuple[str, ...]
    targets: np.ndarray
    slots: np.ndarray
    col_ptr: np.ndarray
    col_var: np.ndarray
    col_fixed: np.ndarray
    dist: np.ndarray
    ranks: np.ndarray

    def __len__(self):
        return len(self.ids)

    @property
    def n_cols(self) -> int:
        return int(self.col_ptr[-1])

    def take(self, positions) -> "InstanceBatch":
        """Sub-batch of the given instance positions (order preserved)."""
        positions = np.asarray(positions, dtype=np.int64)
        starts, ends = self.col_ptr[positions], self.col_ptr[positions + 1]
        lengths = ends - starts
        if len(positions):
            cols = np.concatenate([np.arange(a, b) for a, b in zip(starts, ends)])
        else:
            cols = np.empty(0, dtype=np.int64)
        return InstanceBatch(
            tuple(self.ids[i] for i in positions),
            self.targets[positions],
            self.slots[positions],
            np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64),
            self.col_var[cols],
            self.col_fixed[cols],
            self.dist[:, cols],
            self.ranks[positions],
        )


def compile_instances(
    block_ids: Sequence[str],
    attributes: Mapping[str, AttributeVector],
    graph: Graph,
    params: ModelParams,
    known_prices: Mapping[str, float],
    targets: Mapping[str, float] | None = None,
    rank_offset: int = 0,
) -> InstanceBatch:
    n_attr = len(params.layout.blocks)
    slots = np.zeros((len(block_ids), n_attr), dtype=np.int64)
    tgt = np.full(len(block_ids), np.nan)
    ptr = [0]
    var_parts, fixed_parts, dist_parts = [], [], []
    for i, bid in enumerate(block_ids):
        ns = graph.neighbors.get(bid)
        if ns is None:
            raise ModelError(f"block {bid!r} has no neighbour set")
        slots[i] = attributes[bid].slots
        if targets is not None and bid in targets:
            tgt[i] = targets[bid]
        var = np.empty(ns.k, dtype=np.int64)
        fixed = np.zeros(ns.k)
        for j, pid in enumerate(ns.neighbor_ids):
            if pid in known_prices:
                var[j] = -1
                fixed[j] = known_prices[pid]
            else:
                idx = params.price_index(pid)
                if idx is None:
                    raise ModelError(f"neighbour {pid!r} has neither a known price nor a price variable")
                var[j] = idx
        var_parts.append(var)
        fixed_parts.append(fixed)
        dist_parts.append(ns.distances)
        ptr.append(ptr[-1] + ns.k)
    if block_ids:
        col_var = np.concatenate(var_parts)
        col_fixed = np.concatenate(fixed_parts)
        dist = np.concatenate(dist_parts, axis=1)
    else:
        col_var, col_fixed, dist = np.empty(0, np.int64), np.empty(0), np.empty((2, 0))
    return InstanceBatch(
        tuple(block_ids),
        tgt,
        slots,
        np.asarray(ptr, dtype=np.int64),
        col_var,
        col_fixed,
        dist,
        np.arange(rank_offset, rank_offset + len(block_ids), dtype=np.int64),
    )


@dataclass
class BatchForward:
    S: np.ndarray
    z: np.ndarray
    F: np.ndarray
    w: np.ndarray
    wF: np.ndarray
    prediction: np.ndarray


def _segment_sum(values: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    # each segment is non-empty (k >= 1)
    return np.add.reduceat(values, ptr[:-1], axis=-1)


def batch_forward(batch: InstanceBatch, params: ModelParams) -> BatchForward:
    n = len(batch)
    if n == 0:
        e = np.empty(0)
        return BatchForward(e, e, e, e, e, e)
    lengths = np.diff(batch.col_ptr)
    scores = params.phi @ batch.dist
    seg_max = np.maximum.reduceat(scores, batch.col_ptr[:-1])
    e = np.exp(scores - np.repeat(seg_max, lengths))
    F = e / np.repeat(_segment_sum(e, batch.col_ptr), lengths)
    learn = batch.col_var >= 0
    w = batch.col_fixed.copy()
    w[learn] = params.prices[batch.col_var[learn]]
    wF = _segment_sum(w * F, batch.col_ptr)
    z = params.theta[batch.slots].sum(axis=1)
    S = expit(z)
    return BatchForward(S, z, F, w, wF, S * wF)


def batch_predict(batch: InstanceBatch, params: ModelParams) -> np.ndarray:
    return batch_forward(batch, params).prediction


def batch_loss_and_grad(batch: InstanceBatch, params: ModelParams, shard_index: int = 0) -> GradientShard:
    """Per-instance gradient terms for every instance of ``batch``.

    Same quantities as :func:`instance_loss_and_grad`, vectorised.
    """
    n = len(batch)
    if n == 0:
        return GradientShard.empty(shard_index)
    if np.any(np.isnan(batch.targets)):
        bad = batch.ids[int(np.flatnonzero(np.isnan(batch.targets))[0])]
        raise ModelError(f"block {bad!r} has no known price")
    fw = batch_forward(batch, params)
    lengths = np.diff(batch.col_ptr)
    resid = fw.prediction - batch.targets
    g = 2.0 * resid

    learn = batch.col_var >= 0
    dprice = np.repeat(fw.S, lengths) * fw.F
    p_keys = params.price_offset + batch.col_var[learn]
    p_vals = (np.repeat(g, lengths) * dprice)[learn]
    p_jac = dprice[learn]
    p_rank = np.repeat(batch.ranks, lengths)[learn]

    n_attr = batch.slots.shape[1]
    dz = fw.S * (1.0 - fw.S) * fw.wF
    t_keys = batch.slots.reshape(-1)
    t_vals = np.repeat(g * dz, n_attr)
    t_jac = np.repeat(dz, n_attr)
    t_rank = np.repeat(batch.ranks, n_attr)

    wF_cols = fw.w * fw.F
    Dbar = _segment_sum(batch.dist * fw.F, batch.col_ptr)  # (t, n)
    wFD = _segment_sum(batch.dist * wF_cols, batch.col_ptr)  # (t, n)
    dphi = fw.S * (wFD - fw.wF * Dbar)  # (t, n)
    t = dphi.shape[0]
    f_keys = np.tile(params.phi_offset + np.arange(t), n)
    f_vals = (g * dphi).T.reshape(-1)
    f_jac = dphi.T.reshape(-1)
    f_rank = np.repeat(batch.ranks, t)

    return GradientShard(
        np.concatenate([p_keys, t_keys, f_keys]).astype(np.int64),
        np.concatenate([p_vals, t_vals, f_vals]),
        np.concatenate([p_rank, t_rank, f_rank]).astype(np.int64),
        np.concatenate([p_jac, t_jac, f_jac]),
        resid * resid,
        batch.ranks.copy(),
        shard_index,
        residuals=resid,
    )


# ---------------------------------------------------------------------------
# Snapshots


def params_to_json(params: ModelParams) -> dict:
    return {
        "version": SNAPSHOT_VERSION,
        "theta": {"values": params.theta.tolist(), "layout": params.layout.to_json()},
        "phi": params.phi.tolist(),
        "prices": dict(zip(params.price_ids, params.prices.tolist())),
        "meta": params.meta,
    }


def params_from_json(doc) -> ModelParams:
    if not isinstance(doc, dict) or "version" not in doc:
        raise SnapshotError("not a model snapshot")
    if doc["version"] != SNAPSHOT_VERSION:
        raise SnapshotError(f"snapshot version {doc['version']} is not supported (expected {SNAPSHOT_VERSION})")
    try:
        layout = AttributeLayout.from_json(doc["theta"]["layout"])
        prices = doc["prices"]
        return ModelParams(
            layout,
            np.array(doc["theta"]["values"], dtype=float),
            np.array(doc["phi"], dtype=float),
            tuple(prices),
            np.array(list(prices.values()), dtype=float),
            doc.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SnapshotError(f"malformed snapshot: {exc}") from exc


def save_params(params: ModelParams, path) -> None:
    text = json.dumps(params_to_json(params), separators=(",", ":"), sort_keys=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_params(path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"corrupt snapshot {path}: {exc.msg} at char {exc.pos}") from exc
    return params_from_json(doc)
