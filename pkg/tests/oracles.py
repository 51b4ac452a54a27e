"""Independent reference computations shared by the unit and acceptance tests."""

import math
from decimal import Decimal, localcontext

import numpy as np

from urbanprice.dataset import UNSEEN, AttributeLayout, AttributeVector, NeighborSet
from urbanprice.model import ModelParams


def random_layout(rng, n_attrs=3):
    blocks = []
    for a in range(n_attrs):
        n_vals = int(rng.integers(2, 5))
        blocks.append((f"attr{a}", tuple(f"v{i}" for i in range(n_vals)) + (UNSEEN,)))
    return AttributeLayout(tuple(blocks))


def random_instance(rng, k_max=50, n_known=None):
    """One block with k random neighbours, a mix of fixed and learnable values."""
    layout = random_layout(rng)
    k = int(rng.integers(1, k_max + 1))
    n_known = int(rng.integers(0, k + 1)) if n_known is None else n_known
    ids = tuple(f"n{j}" for j in range(k))
    euc = rng.uniform(0.0, 1.0, k)
    dist = np.vstack([euc, euc * rng.uniform(1.0, 1.6, k)])
    nbrs = NeighborSet("c", ids, dist)
    known = {pid: float(rng.uniform(1e4, 9e4)) for pid in ids[:n_known]}
    learn = ids[n_known:]
    params = ModelParams(
        layout,
        rng.normal(0.0, 0.5, layout.n_slots),
        rng.normal(0.0, 1.5, 2),
        learn,
        rng.uniform(1e4, 9e4, len(learn)),
    )
    offsets = layout.offsets
    x = AttributeVector(layout, tuple(int(off + rng.integers(0, len(v))) for off, (_, v) in zip(offsets, layout.blocks)))
    known["c"] = float(rng.uniform(1e4, 9e4))
    return x, nbrs, params, known


def reference_prediction(x, nbrs, params, known):
    """Plain-Python evaluation of S * (w . softmax(phi . D))."""
    w = [known[p] if p in known else params.price_of(p) for p in nbrs.neighbor_ids]
    scores = [sum(params.phi[r] * nbrs.distances[r, j] for r in range(2)) for j in range(nbrs.k)]
    top = max(scores)
    e = [math.exp(s - top) for s in scores]
    z = sum(params.theta[s] for s in x.slots)
    S = 1.0 / (1.0 + math.exp(-z))
    return S * sum(wj * ej for wj, ej in zip(w, e)) / sum(e)


def exact_prediction(x, nbrs, params, known, digits=40):
    """Same formula as :func:`reference_prediction`, evaluated with ``digits`` decimal digits."""
    with localcontext() as ctx:
        ctx.prec = digits
        w = [Decimal(known[p]) if p in known else Decimal(params.price_of(p)) for p in nbrs.neighbor_ids]
        phi = [Decimal(float(f)) for f in params.phi]
        scores = [sum(phi[r] * Decimal(float(nbrs.distances[r, j])) for r in range(2)) for j in range(nbrs.k)]
        top = max(scores)
        e = [(s - top).exp() for s in scores]
        z = sum(Decimal(float(params.theta[s])) for s in x.slots)
        S = 1 / (1 + (-z).exp())
        return S * sum(wj * ej for wj, ej in zip(w, e)) / sum(e)


def reference_loss(x, nbrs, params, known):
    r = reference_prediction(x, nbrs, params, known) - known[nbrs.center_id]
    return r * r


def finite_difference_errors(x, nbrs, params, known, analytic: dict, step=1e-5):
    """Relative errors of an analytic gradient against central differences.

    Steps are ``step`` on unit-scaled variables (h = step * max(1, |v|)).
    Losses are evaluated in 40-digit decimal arithmetic, so what remains is
    the truncation error of the central difference.
    Entries whose magnitude is below 1e-9 of the largest entry are compared
    against that floor instead of themselves.
    """
    v = params.vector()
    target = Decimal(known[nbrs.center_id])
    keys = sorted(analytic)
    fd = {}
    for key in keys:
        h = step * max(1.0, abs(v[key]))
        vp, vm = v.copy(), v.copy()
        vp[key] += h
        vm[key] -= h
        with localcontext() as ctx:
            ctx.prec = 40
            lp = (exact_prediction(x, nbrs, params.with_vector(vp), known) - target) ** 2
            lm = (exact_prediction(x, nbrs, params.with_vector(vm), known) - target) ** 2
            fd[key] = float((lp - lm) / (2 * Decimal(h)))
    scale = max(max(abs(a) for a in analytic.values()), 1e-300)
    return {
        key: abs(analytic[key] - fd[key]) / max(abs(analytic[key]), abs(fd[key]), 1e-9 * scale) for key in keys
    }
