"""Center Shift Module: learned displacement of region centers.

Five variants, all producing a 3-vector shift per center from interactions
between the center's feature, its neighborhood (drawn from twice the layer
radius), and optionally the other centers.  Variants I-IV update the
center's feature by attention before weighting relative positions; variant V
works on pairwise neighbor interactions directly.

All neighbor-axis reductions run through the order-independent primitives in
`tensor`, so every shift is exactly invariant to neighbor permutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ContractError, ShapeError
from .geometry import k_nearest_centers
from .tensor import (
    Mlp,
    ParamBlock,
    Tensor,
    add,
    concat,
    gather_rows,
    group_mean_rows,
    group_softmax,
    group_sum_rows,
    hadamard,
    init_weight,
    matmul,
    max_rows,
    mean_rows,
    mul_rows,
    pairwise_matvec3,
    repeat_rows,
    reshape,
    scale,
    softmax,
    stack_rows,
    sub,
    sum_axis,
    weighted_sum_rows,
)

SIMILARITIES = ("sub", "sum", "cat", "dot", "hadamard")


def attention_dim(feature_dim: int) -> int:
    """Query/key/value width: half the feature width, floored, at least 1."""
    return max(1, feature_dim // 2)


def _similarity_dim(feature_dim: int, sim: str) -> int:
    d2 = attention_dim(feature_dim)
    if sim in ("sub", "sum", "hadamard"):
        return d2
    if sim == "cat":
        return 2 * d2
    if sim == "dot":
        return 1
    raise ArgumentError(f"unknown similarity {sim!r}; expected one of {SIMILARITIES}")


@dataclass
class CsmParams:
    """Learned blocks for one CSM instance; unused fields stay None."""

    feature_dim: int
    variant: int
    gamma: Mlp | None = None          # shift-weight net, tanh-bounded output
    query_w: ParamBlock | None = None
    key_w: ParamBlock | None = None
    value_w: ParamBlock | None = None
    phi: Mlp | None = None            # post-aggregation lift back to D
    theta_pos_w: ParamBlock | None = None  # 3x3 positional map (variant II)
    vartheta: Mlp | None = None       # weight net over [position, similarity]
    t_query_w: ParamBlock | None = None    # center-to-center attention (III/IV)
    t_key_w: ParamBlock | None = None
    t_value_w: ParamBlock | None = None
    t_phi: Mlp | None = None
    theta: Mlp | None = None          # pairwise 3x3 generator (IV/V)
    sim: str | None = None

    def blocks(self) -> list[ParamBlock]:
        out: list[ParamBlock] = []
        for mlp in (self.gamma, self.phi, self.vartheta, self.t_phi, self.theta):
            if mlp is not None:
                out.extend(mlp.blocks())
        for w in (self.query_w, self.key_w, self.value_w, self.theta_pos_w,
                  self.t_query_w, self.t_key_w, self.t_value_w):
            if w is not None:
                out.append(w)
        return out


def build_csm_params(name: str, variant: int, feature_dim: int,
                     rng: np.random.Generator, sim: str = "sub") -> CsmParams:
    """Create exactly the parameter blocks the chosen variant uses.

    gamma runs D -> D/2 -> D/4 -> 3 with relu, then tanh twice so the final
    output (and hence every shift weight) is inside (-1, 1).
    """
    if variant not in (1, 2, 3, 4, 5):
        raise ArgumentError(f"CSM variant must be 1..5, got {variant}")
    d = feature_dim
    d2 = attention_dim(d)
    p = CsmParams(feature_dim=d, variant=variant)
    if variant in (1, 2, 3, 4):
        p.gamma = Mlp(f"{name}.gamma", (d, d2, max(1, d // 4), 3), ("relu", "tanh", "tanh"), rng)
        p.query_w = init_weight(f"{name}.query", d, d2, rng)
        p.key_w = init_weight(f"{name}.key", d, d2, rng)
        p.value_w = init_weight(f"{name}.value", d, d2, rng)
        p.phi = Mlp(f"{name}.phi", (d2, d), ("relu",), rng)
    if variant == 2:
        if sim not in SIMILARITIES:
            raise ArgumentError(f"unknown similarity {sim!r}; expected one of {SIMILARITIES}")
        p.sim = sim
        p.theta_pos_w = init_weight(f"{name}.theta_pos", 3, 3, rng)
        p.vartheta = Mlp(f"{name}.vartheta", (3 + _similarity_dim(d, sim), 16, 1),
                         ("relu", "identity"), rng)
    if variant in (3, 4):
        p.t_query_w = init_weight(f"{name}.t_query", d, d2, rng)
        p.t_key_w = init_weight(f"{name}.t_key", d, d2, rng)
        p.t_value_w = init_weight(f"{name}.t_value", d, d2, rng)
        p.t_phi = Mlp(f"{name}.t_phi", (d2, d), ("relu",), rng)
    if variant in (4, 5):
        p.theta = Mlp(f"{name}.theta", (d, 64, 9), ("relu", "identity"), rng)
    return p


@dataclass
class CsmContext:
    """Inputs for one center's shift.

    Neighbors come from the ball of radius twice the layer radius around the
    (unshifted) center.  The `all_*` fields are populated only for variants
    III/IV, after the synchronized per-center aggregation passes.
    """

    center: Tensor                 # (3,)
    center_feature: Tensor         # (D,)
    neighbor_positions: Tensor     # (K, 3)
    neighbor_features: Tensor      # (K, D)
    layer_radius: float
    center_index: int | None = None
    all_centers: np.ndarray | None = None          # (m, 3) raw, for neighbor lookup
    all_centers_t: Tensor | None = None            # (m, 3) differentiable
    all_center_features: list[Tensor] | None = None  # each (D,)
    all_center_agg: list[Tensor] | None = None       # each (D,): local attention output
    all_center_updated: list[Tensor] | None = None   # each (D,): fully updated feature

    def __post_init__(self):
        k = self.neighbor_positions.data.shape[0]
        if k < 1:
            raise ContractError("CSM context needs at least one neighbor")
        if self.neighbor_features.data.shape[0] != k:
            raise ShapeError("neighbor positions/features row counts differ")
        if self.center_feature.data.shape[0] != self.neighbor_features.data.shape[1]:
            raise ShapeError("center/neighbor feature widths differ")
        d = np.sqrt(((self.neighbor_positions.data - self.center.data) ** 2).sum(axis=1))
        limit = 2.0 * self.layer_radius
        if d.size and d.max() > limit * (1.0 + 1e-12):
            raise ContractError(f"neighbor at distance {d.max()} exceeds 2r = {limit}")

    @property
    def k(self) -> int:
        return self.neighbor_positions.data.shape[0]


def attention_weights(g: Tensor, neighbors_f: Tensor, params: CsmParams) -> Tensor:
    """Scaled dot-product weights of the K neighbors for query feature g."""
    if neighbors_f.data.ndim != 2 or neighbors_f.data.shape[0] < 1:
        raise ShapeError(f"need a (K>=1, D) neighbor matrix, got {neighbors_f.data.shape}")
    if g.data.shape[0] != neighbors_f.data.shape[1]:
        raise ShapeError("query feature width differs from neighbor feature width")
    d2 = params.query_w.tensor.data.shape[1]
    q = matmul(g, params.query_w.tensor)                    # (d2,)
    keys = matmul(neighbors_f, params.key_w.tensor)         # (K, d2)
    return softmax(scale(matmul(keys, q), 1.0 / math.sqrt(d2)))


def attention_aggregate(g: Tensor, neighbors_f: Tensor, params: CsmParams) -> Tensor:
    """Scaled dot-product aggregation of neighbor features, queried by g."""
    weights = attention_weights(g, neighbors_f, params)
    values = matmul(neighbors_f, params.value_w.tensor)     # (K, d2)
    return params.phi.apply(weighted_sum_rows(weights, values))


def positional_attention_weights(ctx: CsmContext, params: CsmParams, sim: str) -> Tensor:
    """Neighbor weights from transformed relative positions plus query-key similarity."""
    if sim not in SIMILARITIES:
        raise ArgumentError(f"unknown similarity {sim!r}; expected one of {SIMILARITIES}")
    rel = sub(ctx.center, ctx.neighbor_positions)            # (K, 3) rows c - p_k
    delta = matmul(rel, params.theta_pos_w.tensor)           # (K, 3)
    q = matmul(ctx.center_feature, params.query_w.tensor)    # (d2,)
    keys = matmul(ctx.neighbor_features, params.key_w.tensor)  # (K, d2)
    if sim == "sub":
        dval = sub(q, keys)
    elif sim == "sum":
        dval = add(q, keys)
    elif sim == "hadamard":
        dval = hadamard(q, keys)
    elif sim == "dot":
        dval = reshape(matmul(keys, q), (ctx.k, 1))
    else:  # cat
        tiled = repeat_rows(reshape(q, (1, q.data.shape[0])), ctx.k)
        dval = concat([tiled, keys], axis=1)
    scores = params.vartheta.apply(concat([delta, dval], axis=1))  # (K, 1)
    return softmax(reshape(scores, (ctx.k,)))


def attention_aggregate_positional(ctx: CsmContext, params: CsmParams, sim: str) -> Tensor:
    weights = positional_attention_weights(ctx, params, sim)
    values = matmul(ctx.neighbor_features, params.value_w.tensor)
    return params.phi.apply(weighted_sum_rows(weights, values))


def _shift_from_updated(ctx: CsmContext, params: CsmParams, ghat: Tensor) -> Tensor:
    # Shift weights from feature differences, applied to relative positions.
    diffs = sub(ghat, ctx.neighbor_features)                 # (K, D) rows ghat - f_k
    w = params.gamma.apply(diffs)                            # (K, 3), each entry in (-1, 1)
    rel = sub(ctx.center, ctx.neighbor_positions)            # (K, 3) rows c - p_k
    return mean_rows(hadamard(w, rel))


def csm1_shift(ctx: CsmContext, params: CsmParams) -> Tensor:
    g_sa = attention_aggregate(ctx.center_feature, ctx.neighbor_features, params)
    ghat = add(ctx.center_feature, g_sa)
    return _shift_from_updated(ctx, params, ghat)


def csm1_shifts(centers: Tensor, center_features: Tensor, neighbor_positions: Tensor,
                neighbor_features: Tensor, k: int, params: CsmParams) -> Tensor:
    """All centers' CSM-I shifts in one batched pass.

    Neighbor rows come k per center, flattened: (m*k, .).  Matches the
    per-center csm1_shift up to summation rounding, and keeps the exact
    within-group permutation invariance (grouped reductions sort first).
    """
    m = centers.data.shape[0]
    if neighbor_positions.data.shape[0] != m * k:
        raise ShapeError(
            f"expected {m * k} neighbor rows, got {neighbor_positions.data.shape[0]}"
        )
    d2 = params.query_w.tensor.data.shape[1]
    q = matmul(center_features, params.query_w.tensor)            # (m, d2)
    keys = matmul(neighbor_features, params.key_w.tensor)         # (m*k, d2)
    scores = sum_axis(hadamard(keys, repeat_rows(q, k)), 1)       # (m*k,)
    weights = group_softmax(scale(scores, 1.0 / math.sqrt(d2)), k)
    values = matmul(neighbor_features, params.value_w.tensor)     # (m*k, d2)
    g_sa = params.phi.apply(group_sum_rows(mul_rows(values, weights), k))
    ghat = add(center_features, g_sa)                             # (m, D)
    diffs = sub(repeat_rows(ghat, k), neighbor_features)          # (m*k, D)
    w = params.gamma.apply(diffs)                                 # (m*k, 3)
    rel = sub(repeat_rows(centers, k), neighbor_positions)        # (m*k, 3)
    return group_mean_rows(hadamard(w, rel), k)                   # (m, 3)


def csm2_shift(ctx: CsmContext, params: CsmParams, sim: str | None = None) -> Tensor:
    sim = params.sim if sim is None else sim
    g_sa = attention_aggregate_positional(ctx, params, sim)
    ghat = add(ctx.center_feature, g_sa)
    return _shift_from_updated(ctx, params, ghat)


def precompute_center_aggregates(contexts: list[CsmContext], params: CsmParams) -> list[Tensor]:
    """Local attention output for every center (synchronized pass for III/IV)."""
    return [attention_aggregate(c.center_feature, c.neighbor_features, params) for c in contexts]


def _center_attention(query_feature: Tensor, gbar_matrix: Tensor, params: CsmParams) -> Tensor:
    """Aggregate updated center features; query is one center's updated feature."""
    d2 = params.t_query_w.tensor.data.shape[1]
    qt = matmul(query_feature, params.t_query_w.tensor)
    keys = matmul(gbar_matrix, params.t_key_w.tensor)
    b = softmax(scale(matmul(keys, qt), 1.0 / math.sqrt(d2)))
    values = matmul(gbar_matrix, params.t_value_w.tensor)
    return params.t_phi.apply(weighted_sum_rows(b, values))


def csm3_shift(ctx: CsmContext, params: CsmParams, u: int) -> Tensor:
    """Shift using the u nearest centers' updated features alongside the local ones."""
    if ctx.all_centers is None or ctx.all_center_features is None or ctx.all_center_agg is None:
        raise ContractError("csm3_shift needs the synchronized center aggregates")
    j = ctx.center_index
    m = ctx.all_centers.shape[0]
    if not 1 <= u <= m - 1:
        raise ArgumentError(f"u must be in [1, {m - 1}], got {u}")
    nn = k_nearest_centers(ctx.all_centers, j, u)
    gbar_rows = [add(ctx.all_center_features[l], ctx.all_center_agg[l]) for l in nn]
    gbar_j = add(ctx.center_feature, ctx.all_center_agg[j])
    g_sac = _center_attention(gbar_j, stack_rows(gbar_rows), params)
    ghat = add(ctx.all_center_agg[j], g_sac)  # updated feature replaces the raw one here
    return _shift_from_updated(ctx, params, ghat)


def precompute_updated_features(contexts: list[CsmContext], params: CsmParams) -> list[Tensor]:
    """Fully updated feature for every center, attending over all centers (variant IV)."""
    agg = precompute_center_aggregates(contexts, params)
    gbar = [add(c.center_feature, a) for c, a in zip(contexts, agg)]
    gbar_matrix = stack_rows(gbar)
    updated = []
    for j in range(len(contexts)):
        g_sac = _center_attention(gbar[j], gbar_matrix, params)
        updated.append(add(agg[j], g_sac))
    return updated


def csm4_shift(ctx: CsmContext, params: CsmParams) -> Tensor:
    """Shift from all centers: 3x3 maps of feature differences applied to offsets."""
    if ctx.all_center_updated is None or ctx.all_centers_t is None:
        raise ContractError("csm4_shift needs the synchronized updated features")
    m = len(ctx.all_center_updated)
    if m < 2:
        raise ArgumentError(f"csm4_shift needs at least 2 centers, got {m}")
    j = ctx.center_index
    ghat_matrix = stack_rows(ctx.all_center_updated)         # (m, D)
    diffs = sub(ctx.all_center_updated[j], ghat_matrix)      # (m, D)
    mats = params.theta.apply(diffs)                         # (m, 9)
    rel = sub(ctx.center, ctx.all_centers_t)                 # (m, 3) rows c_j - c_l
    return mean_rows(pairwise_matvec3(mats, rel))            # the l = j row is exactly zero


def csm5_shift(ctx: CsmContext, params: CsmParams) -> Tensor:
    """Pairwise variant: componentwise max over per-neighbor mean displacements."""
    k = ctx.k
    d = ctx.neighbor_features.data.shape[1]
    per_neighbor = []
    for i in range(k):
        f_i = reshape(gather_rows(ctx.neighbor_features, [i]), (d,))
        p_i = reshape(gather_rows(ctx.neighbor_positions, [i]), (3,))
        diffs = sub(f_i, ctx.neighbor_features)              # (K, D) rows f_i - f_l
        mats = params.theta.apply(diffs)                     # (K, 9)
        rel = sub(p_i, ctx.neighbor_positions)               # (K, 3) rows p_i - p_l
        per_neighbor.append(mean_rows(pairwise_matvec3(mats, rel)))
    return max_rows(stack_rows(per_neighbor))
