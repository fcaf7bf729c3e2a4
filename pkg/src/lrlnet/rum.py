"""Radius Update Module: a learned signed change of each region's radius.

Neighbors within twice the layer radius are split into concentric shells;
per-shell aggregates of transformed feature differences feed a tanh-headed
MLP.  The tanh output is scaled by the layer radius, so the update always
stays inside (-r, r) and the resized region keeps a positive radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ContractError, ShapeError
from .geometry import ShellPartition
from .tensor import (
    Mlp,
    ParamBlock,
    Tensor,
    add,
    constant,
    gather_rows,
    group_max,
    init_weight,
    matmul,
    max_rows,
    mean_rows,
    mul_rows,
    reshape,
    scale,
    softmax_rows,
    stack_rows,
    sub,
    transpose,
)

AGGREGATIONS = ("cum", "max")


def shell_feature_dim(feature_dim: int) -> int:
    """Width of the per-shell aggregate: half the feature width, at least 1."""
    return max(1, feature_dim // 2)


@dataclass
class RumParams:
    """Learned blocks for one RUM instance."""

    feature_dim: int
    t_shells: int
    variant: int
    zeta: Mlp                      # feature-difference transform, D -> E
    head: Mlp                      # (T*E) -> ... -> 1, tanh output
    query_w: ParamBlock | None = None  # shell-row attention (variant II), E -> E
    key_w: ParamBlock | None = None
    value_w: ParamBlock | None = None

    def blocks(self) -> list[ParamBlock]:
        out = self.zeta.blocks() + self.head.blocks()
        for w in (self.query_w, self.key_w, self.value_w):
            if w is not None:
                out.append(w)
        return out


def build_rum_params(name: str, variant: int, feature_dim: int, t_shells: int,
                     rng: np.random.Generator) -> RumParams:
    if variant not in (1, 2):
        raise ArgumentError(f"RUM variant must be 1 or 2, got {variant}")
    if t_shells < 1:
        raise ArgumentError(f"t_shells must be >= 1, got {t_shells}")
    e = shell_feature_dim(feature_dim)
    zeta = Mlp(f"{name}.zeta", (feature_dim, e), ("relu",), rng)
    head_in = t_shells * e
    head = Mlp(f"{name}.head", (head_in, max(1, head_in // 2), 1), ("relu", "tanh"), rng)
    p = RumParams(feature_dim=feature_dim, t_shells=t_shells, variant=variant,
                  zeta=zeta, head=head)
    if variant == 2:
        # No dimension reduction for the shell attention maps.
        p.query_w = init_weight(f"{name}.query", e, e, rng)
        p.key_w = init_weight(f"{name}.key", e, e, rng)
        p.value_w = init_weight(f"{name}.value", e, e, rng)
    return p


@dataclass
class RumContext:
    """One center's neighborhood, already partitioned into shells."""

    center: np.ndarray             # (3,)
    center_feature: Tensor         # (D,)
    neighbor_positions: np.ndarray  # (S, 3), within 2r of center
    neighbor_features: Tensor      # (S, D)
    shells: ShellPartition
    layer_radius: float

    def __post_init__(self):
        s = self.neighbor_features.data.shape[0]
        if self.shells.shell_of.shape[0] != s:
            raise ShapeError("shell assignment length differs from neighbor count")
        if self.neighbor_positions.shape[0] != s:
            raise ShapeError("neighbor positions/features row counts differ")
        if self.shells.num_shells < 1:
            raise ContractError("need at least one shell")
        if s:
            d = np.sqrt(((self.neighbor_positions - self.center) ** 2).sum(axis=1))
            limit = 2.0 * self.layer_radius
            if d.max() > limit * (1.0 + 1e-12):
                raise ContractError(f"neighbor at distance {d.max()} exceeds 2r = {limit}")


def shell_features(ctx: RumContext, params: RumParams, agg: str) -> Tensor:
    """(T, E) matrix of per-shell aggregates, inner shell first.

    Empty shells contribute zero rows so the head input width never varies.
    """
    if agg not in AGGREGATIONS:
        raise ArgumentError(f"unknown aggregation {agg!r}; expected one of {AGGREGATIONS}")
    e_dim = params.zeta.params[-2].tensor.data.shape[1]
    diffs = sub(ctx.center_feature, ctx.neighbor_features)   # (S, D) rows g - f_s
    e = params.zeta.apply(diffs)                             # (S, E)
    rows = []
    for t in range(1, ctx.shells.num_shells + 1):
        members = np.flatnonzero(ctx.shells.shell_of == t)
        if members.size == 0:
            rows.append(constant(np.zeros(e_dim)))
            continue
        sel = gather_rows(e, members)
        rows.append(mean_rows(sel) if agg == "cum" else max_rows(sel))
    return stack_rows(rows)


def _head_delta(params: RumParams, matrix: Tensor, layer_radius: float,
                scale_by_radius: bool) -> Tensor:
    t, e = matrix.data.shape
    flat = reshape(matrix, (t * e,))
    out = reshape(params.head.apply(flat), ())
    return scale(out, layer_radius) if scale_by_radius else out


def rum1_delta(ctx: RumContext, params: RumParams, agg: str,
               scale_by_radius: bool = True) -> Tensor:
    """Radius change from the shell matrix alone; bounded by the layer radius."""
    rbar = shell_features(ctx, params, agg)
    return _head_delta(params, rbar, ctx.layer_radius, scale_by_radius)


def rum1_deltas_max(all_features: Tensor, center_features: Tensor,
                    member_lists: list[np.ndarray], shell_list: list[ShellPartition],
                    layer_radius: float, params: RumParams,
                    scale_by_radius: bool = True) -> Tensor:
    """All centers' RUM-I(max) updates in one batched pass -> (m,) tensor.

    `member_lists[j]` holds center j's neighbor indices into `all_features`;
    `shell_list[j]` their shell assignment.  Matches rum1_delta(agg="max")
    per center up to summation rounding.  Shell buckets are padded with
    their own first member, which leaves a max untouched, so the pooled
    rows keep exact within-shell permutation invariance; empty shells are
    masked to zero rows.
    """
    m = len(member_lists)
    t_shells = params.t_shells
    e_dim = params.zeta.params[-2].tensor.data.shape[1]
    counts = [len(w) for w in member_lists]
    total = int(sum(counts))
    if total == 0:
        rbar_flat = constant(np.zeros((m * t_shells, e_dim)))
    else:
        flat_idx = np.concatenate([np.asarray(w, dtype=np.intp) for w in member_lists])
        rep = np.repeat(np.arange(m), counts)
        diffs = sub(gather_rows(center_features, rep), gather_rows(all_features, flat_idx))
        e = params.zeta.apply(diffs)                       # (S_total, E)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        buckets = []
        for j in range(m):
            shell_of = shell_list[j].shell_of
            for t in range(1, t_shells + 1):
                buckets.append(offsets[j] + np.flatnonzero(shell_of == t))
        pad = max(1, max(b.size for b in buckets))
        idx = np.zeros((len(buckets), pad), dtype=np.intp)
        mask = np.zeros(len(buckets))
        for i, b in enumerate(buckets):
            if b.size:
                idx[i, : b.size] = b
                idx[i, b.size :] = b[0]
                mask[i] = 1.0
        pooled = group_max(gather_rows(e, idx.reshape(-1)), pad)  # (m*T, E)
        rbar_flat = mul_rows(pooled, constant(mask))
    matrix = reshape(rbar_flat, (m, t_shells * e_dim))
    out = reshape(params.head.apply(matrix), (m,))
    return scale(out, layer_radius) if scale_by_radius else out


def rum2_delta(ctx: RumContext, params: RumParams, agg: str,
               scale_by_radius: bool = True) -> Tensor:
    """Like rum1, but shell rows are first mixed by scaled dot-product attention."""
    if params.query_w is None:
        raise ContractError("rum2_delta needs the attention blocks of a variant-2 build")
    r = shell_features(ctx, params, agg)                     # (T, E)
    e_dim = params.query_w.tensor.data.shape[1]
    q = matmul(r, params.query_w.tensor)
    keys = matmul(r, params.key_w.tensor)
    weights = softmax_rows(scale(matmul(q, transpose(keys)), 1.0 / math.sqrt(e_dim)))
    values = matmul(r, params.value_w.tensor)
    rhat = add(r, matmul(weights, values))
    return _head_delta(params, rhat, ctx.layer_radius, scale_by_radius)
