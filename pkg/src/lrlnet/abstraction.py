"""Set-abstraction layers and the point-cloud classifier.

Each layer samples centers by farthest-point sampling, optionally shifts
them (CSM) and resizes their receptive fields (RUM), groups neighbors by
ball query, and pools a per-point MLP channelwise.  Two such layers feed a
global abstraction and a fully connected head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import csm as csm_mod
from . import rum as rum_mod
from .errors import ArgumentError, CheckpointError, ConfigError, EmptyRegionError
from .geometry import (
    ball_query_from_distances,
    distance_matrix,
    farthest_point_sample,
    nearest_index,
    shell_partition,
)
from .loss import LossTerms, cross_entropy, fit_loss, range_loss, rum_loss
from .seeding import PARAM_INIT, SampleRng, derive_rng
from .tensor import (
    Mlp,
    ParamBlock,
    Tensor,
    add,
    concat,
    constant,
    gather_rows,
    group_max,
    max_rows,
    mlp_forward,
    repeat_rows,
    reshape,
    stack_rows,
    stack_scalars,
    sub,
)


@dataclass
class CsmSetting:
    variant: int
    sim: str = "sub"        # variant II similarity
    u: int = 4              # variant III neighbor-center count
    k: int | None = None    # neighbors drawn at 2r; None = layer group size


@dataclass
class RumSetting:
    variant: int
    agg: str = "max"
    t_shells: int = 4
    s_max: int = 64
    scale_by_radius: bool = True


@dataclass
class LayerConfig:
    n_centers: int
    radius: float
    k: int
    mlp_widths: tuple[int, ...]
    csm: CsmSetting | None = None
    rum: RumSetting | None = None


@dataclass
class LayerState:
    """Positions and features flowing between layers; both differentiable."""

    positions: Tensor  # (N, 3)
    features: Tensor   # (N, D)


@dataclass
class RegionRecord:
    """Everything one layer's grouping produced, kept for loss terms and dumps."""

    layer_index: int
    center_indices: np.ndarray
    base_centers: np.ndarray
    shifted_centers: Tensor
    shifts: Tensor | None
    radii: np.ndarray
    deltas: Tensor | None          # (m,) radius updates
    groups: np.ndarray
    prev_positions: Tensor
    layer_radius: float
    fallbacks: list[int] = field(default_factory=list)


class Model:
    """Parameter container for the full classifier."""

    def __init__(self, layers, global_widths, head_widths, n_classes, seed):
        self.layers: list[LayerConfig] = list(layers)
        self.global_widths = tuple(global_widths)
        self.head_widths = tuple(head_widths)
        self.n_classes = int(n_classes)
        self.seed = int(seed)
        self.sa_mlps: list[Mlp] = []
        self.csm_params: list[csm_mod.CsmParams | None] = []
        self.rum_params: list[rum_mod.RumParams | None] = []
        self.global_mlp: Mlp | None = None
        self.head: Mlp | None = None
        self.input_dims: list[int] = []

    def blocks(self) -> list[ParamBlock]:
        out: list[ParamBlock] = []
        for i in range(len(self.layers)):
            out.extend(self.sa_mlps[i].blocks())
            if self.csm_params[i] is not None:
                out.extend(self.csm_params[i].blocks())
            if self.rum_params[i] is not None:
                out.extend(self.rum_params[i].blocks())
        out.extend(self.global_mlp.blocks())
        out.extend(self.head.blocks())
        return out

    def load_weights(self, weights: dict[str, np.ndarray]) -> None:
        """Install checkpoint arrays; names and shapes must match exactly."""
        blocks = {pb.name: pb for pb in self.blocks()}
        missing = sorted(set(blocks) - set(weights))
        extra = sorted(set(weights) - set(blocks))
        if missing or extra:
            raise CheckpointError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for name, pb in blocks.items():
            arr = weights[name]
            if arr.shape != pb.tensor.data.shape:
                raise CheckpointError(
                    f"checkpoint tensor {name!r} has shape {arr.shape}, "
                    f"model expects {pb.tensor.data.shape}"
                )
            pb.tensor.data = arr.astype(np.float64).copy()
            pb.grad = np.zeros_like(pb.tensor.data)


def build_model(layers, global_widths, head_widths, n_classes, seed) -> Model:
    """Create all parameter blocks in a fixed, seed-reproducible order."""
    layers = list(layers)
    if len(layers) < 1:
        raise ConfigError("need at least one abstraction layer")
    for a, b in zip(layers, layers[1:]):
        if b.n_centers >= a.n_centers:
            raise ConfigError(
                f"center counts must strictly decrease, got {a.n_centers} -> {b.n_centers}"
            )
    model = Model(layers, global_widths, head_widths, n_classes, seed)
    rng = derive_rng(seed, PARAM_INIT)
    d = 3  # raw coordinates are the only input features
    for i, cfg in enumerate(layers, start=1):
        model.input_dims.append(d)
        widths = (d + 3,) + tuple(cfg.mlp_widths)
        model.sa_mlps.append(Mlp(f"sa{i}.mlp", widths, ("relu",) * len(cfg.mlp_widths), rng))
        if cfg.csm is not None:
            model.csm_params.append(
                csm_mod.build_csm_params(f"sa{i}.csm", cfg.csm.variant, d, rng, sim=cfg.csm.sim)
            )
        else:
            model.csm_params.append(None)
        if cfg.rum is not None:
            model.rum_params.append(
                rum_mod.build_rum_params(f"sa{i}.rum", cfg.rum.variant, d, cfg.rum.t_shells, rng)
            )
        else:
            model.rum_params.append(None)
        d = cfg.mlp_widths[-1]
    gw = (d + 3,) + tuple(global_widths)
    model.global_mlp = Mlp("global.mlp", gw, ("relu",) * len(global_widths), rng)
    hw = (gw[-1],) + tuple(head_widths) + (n_classes,)
    model.head = Mlp("head", hw, ("relu",) * len(head_widths) + ("identity",), rng)
    return model


def _row(t: Tensor, i: int) -> Tensor:
    return reshape(gather_rows(t, [i]), (t.data.shape[1],))


def _csm_contexts(state: LayerState, cfg: LayerConfig, sel, centers_t, feats_t,
                  layer_index: int, srng: SampleRng) -> list[csm_mod.CsmContext]:
    # The unshifted centers are themselves source points, so the 2r balls are
    # never empty here.
    groups = _csm_neighbor_indices(state, cfg, centers_t, layer_index, srng)
    contexts = []
    for jj in range(len(sel)):
        contexts.append(
            csm_mod.CsmContext(
                center=_row(centers_t, jj),
                center_feature=_row(feats_t, jj),
                neighbor_positions=gather_rows(state.positions, groups[jj]),
                neighbor_features=gather_rows(state.features, groups[jj]),
                layer_radius=cfg.radius,
                center_index=jj,
            )
        )
    return contexts


def _csm_neighbor_indices(state, cfg, centers_t, layer_index, srng) -> np.ndarray:
    k = cfg.csm.k if cfg.csm.k is not None else cfg.k
    dmat = distance_matrix(state.positions.data, centers_t.data)
    groups = np.empty((centers_t.data.shape[0], k), dtype=np.intp)
    for jj in range(groups.shape[0]):
        rng = srng.csm_gather(layer_index, jj)
        groups[jj] = ball_query_from_distances(dmat[jj], 2.0 * cfg.radius, k, rng)
    return groups


def _compute_shifts(state, cfg, sel, centers_t, feats_t, params, layer_index, srng) -> Tensor:
    variant = cfg.csm.variant
    if variant == 1:
        groups = _csm_neighbor_indices(state, cfg, centers_t, layer_index, srng)
        flat = groups.reshape(-1)
        return csm_mod.csm1_shifts(
            centers_t, feats_t,
            gather_rows(state.positions, flat),
            gather_rows(state.features, flat),
            groups.shape[1], params,
        )
    contexts = _csm_contexts(state, cfg, sel, centers_t, feats_t, layer_index, srng)
    if variant in (3, 4):
        all_centers = centers_t.data.copy()
        features = [c.center_feature for c in contexts]
        agg = csm_mod.precompute_center_aggregates(contexts, params)
        updated = csm_mod.precompute_updated_features(contexts, params) if variant == 4 else None
        for c in contexts:
            c.all_centers = all_centers
            c.all_centers_t = centers_t
            c.all_center_features = features
            c.all_center_agg = agg
            c.all_center_updated = updated
    shifts = []
    for c in contexts:
        if variant == 2:
            shifts.append(csm_mod.csm2_shift(c, params, cfg.csm.sim))
        elif variant == 3:
            shifts.append(csm_mod.csm3_shift(c, params, cfg.csm.u))
        elif variant == 4:
            shifts.append(csm_mod.csm4_shift(c, params))
        else:
            shifts.append(csm_mod.csm5_shift(c, params))
    return stack_rows(shifts)


def _compute_deltas(state, cfg, shifted, feats_t, params, layer_index, srng,
                    dmat) -> Tensor:
    pts = state.positions.data
    rcfg = cfg.rum
    members, shells = [], []
    for jj in range(shifted.data.shape[0]):
        d = dmat[jj]
        within = np.flatnonzero(d <= 2.0 * cfg.radius)
        # Enumerate by distance so the capped draw is permutation-equivariant.
        within = within[np.argsort(d[within], kind="stable")]
        if within.size > rcfg.s_max:
            rng = srng.rum_gather(layer_index, jj)
            picks = rng.choice(within.size, size=rcfg.s_max, replace=False)
            within = within[np.sort(picks)]
        members.append(within)
        shells.append(shell_partition(pts, within, shifted.data[jj], 2.0 * cfg.radius,
                                      rcfg.t_shells, distances=d))
    if rcfg.variant == 1 and rcfg.agg == "max":
        return rum_mod.rum1_deltas_max(state.features, feats_t, members, shells,
                                       cfg.radius, params,
                                       scale_by_radius=rcfg.scale_by_radius)
    deltas = []
    for jj, (within, part) in enumerate(zip(members, shells)):
        ctx = rum_mod.RumContext(
            center=shifted.data[jj],
            center_feature=_row(feats_t, jj),
            neighbor_positions=pts[within],
            neighbor_features=gather_rows(state.features, within),
            shells=part,
            layer_radius=cfg.radius,
        )
        fn = rum_mod.rum1_delta if rcfg.variant == 1 else rum_mod.rum2_delta
        deltas.append(fn(ctx, params, rcfg.agg, scale_by_radius=rcfg.scale_by_radius))
    return stack_scalars(deltas)


def set_abstraction(state: LayerState, cfg: LayerConfig, mlp: Mlp,
                    csm_params, rum_params, layer_index: int,
                    srng: SampleRng) -> tuple[LayerState, RegionRecord]:
    """Sample, optionally shift/resize, group, transform, and pool one layer."""
    pts = state.positions.data
    n = pts.shape[0]
    if n < cfg.n_centers:
        raise ArgumentError(f"layer {layer_index}: {n} points cannot yield {cfg.n_centers} centers")
    sel = farthest_point_sample(pts, cfg.n_centers, seed_index=0)
    centers_t = gather_rows(state.positions, sel)
    feats_t = gather_rows(state.features, sel)

    shifts = None
    if cfg.csm is not None:
        shifts = _compute_shifts(state, cfg, sel, centers_t, feats_t,
                                 csm_params, layer_index, srng)
        shifted = add(centers_t, shifts)
    else:
        shifted = centers_t

    dmat = distance_matrix(pts, shifted.data)

    deltas = None
    radii = np.full(cfg.n_centers, cfg.radius)
    if cfg.rum is not None:
        deltas = _compute_deltas(state, cfg, shifted, feats_t, rum_params, layer_index,
                                 srng, dmat)
        radii = cfg.radius + deltas.data

    groups = np.empty((cfg.n_centers, cfg.k), dtype=np.intp)
    fallbacks: list[int] = []
    for jj in range(cfg.n_centers):
        rng = srng.ball(layer_index, jj)
        try:
            groups[jj] = ball_query_from_distances(dmat[jj], radii[jj], cfg.k, rng)
        except EmptyRegionError:
            groups[jj] = nearest_index(pts, shifted.data[jj])
            fallbacks.append(jj)

    flat = groups.reshape(-1)
    grouped_pos = gather_rows(state.positions, flat)          # (m*k, 3)
    rel = sub(grouped_pos, repeat_rows(shifted, cfg.k))       # offsets p - c_hat
    grouped_feat = gather_rows(state.features, flat)          # (m*k, D)
    h = mlp.apply(concat([rel, grouped_feat], axis=1))
    pooled = group_max(h, cfg.k)                              # (m, W)

    record = RegionRecord(
        layer_index=layer_index,
        center_indices=sel,
        base_centers=centers_t.data.copy(),
        shifted_centers=shifted,
        shifts=shifts,
        radii=radii,
        deltas=deltas,
        groups=groups,
        prev_positions=state.positions,
        layer_radius=cfg.radius,
        fallbacks=fallbacks,
    )
    return LayerState(positions=shifted, features=pooled), record


def global_abstraction(state: LayerState, mlp: Mlp) -> Tensor:
    """One region covering every point; offsets taken from the first point."""
    n = state.positions.data.shape[0]
    if n < 1:
        raise ArgumentError("global abstraction needs a nonempty state")
    center = _row(state.positions, 0)
    rel = sub(state.positions, center)
    h = mlp.apply(concat([rel, state.features], axis=1))
    return max_rows(h)


def classify(cloud: np.ndarray, model: Model,
             srng: SampleRng) -> tuple[Tensor, list[RegionRecord]]:
    """Logits (pre-softmax) and the per-layer region records for one cloud."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ArgumentError(f"cloud must be (n, 3), got shape {cloud.shape}")
    if cloud.shape[0] < model.layers[0].n_centers:
        raise ArgumentError(
            f"cloud has {cloud.shape[0]} points, fewer than the first layer's "
            f"{model.layers[0].n_centers} centers"
        )
    state = LayerState(positions=constant(cloud), features=constant(cloud.copy()))
    records: list[RegionRecord] = []
    for i, cfg in enumerate(model.layers, start=1):
        state, rec = set_abstraction(state, cfg, model.sa_mlps[i - 1],
                                     model.csm_params[i - 1], model.rum_params[i - 1],
                                     i, srng)
        records.append(rec)
    descriptor = global_abstraction(state, model.global_mlp)
    logits = model.head.apply(descriptor)
    return logits, records


def collect_loss_terms(logits: Tensor, label: int, records: list[RegionRecord],
                       alpha1: float, alpha2: float) -> LossTerms:
    """Assemble the composite objective's terms from one forward pass."""
    terms = LossTerms(ce=cross_entropy(logits, label), alpha1=alpha1, alpha2=alpha2)
    for rec in records:
        if rec.shifts is not None:
            terms.fit_per_layer.append(fit_loss(rec.shifted_centers, rec.prev_positions))
            terms.range_per_layer.append(range_loss(rec.shifts, rec.layer_radius))
        if rec.deltas is not None:
            terms.rum_per_layer.append(rum_loss(rec.deltas, rec.layer_radius))
    return terms
