"""Random small CSM/RUM instances shared by the unit and acceptance tests.

Each builder returns plain arrays plus a `forward()` closure that rebuilds
the contexts and recomputes the module output from scratch, which is what
finite differencing needs (precomputed aggregates depend on the parameters).
"""

import numpy as np

from lrlnet import csm as csm_mod
from lrlnet import rum as rum_mod
from lrlnet.geometry import shell_partition
from lrlnet.tensor import Tensor, constant, hadamard, sum_all


def neighbors_near(rng, center, k, radius2):
    offs = rng.uniform(-1.0, 1.0, size=(k, 3))
    norms = np.sqrt((offs ** 2).sum(axis=1, keepdims=True))
    offs = offs / np.maximum(norms, 1e-9) * rng.uniform(0.05, 0.95, size=(k, 1)) * radius2
    return center + offs


def randomize_biases(blocks, rng):
    """Move zero-initialized biases to generic values.

    Gradient checks probe random points in parameter space; all-zero biases
    put relu pre-activations exactly on their kink whenever the inputs die,
    which makes the subgradient/forward-difference comparison ill-posed.
    """
    for pb in blocks:
        if pb.name.endswith(".b"):
            pb.tensor.data[...] = rng.uniform(-0.5, 0.5, size=pb.tensor.data.shape)


def make_csm_instance(rng, variant, k=3, d=4, m=4, sim="sub", u=2, radius=0.3):
    """Parameters plus a forward() returning the shift tensor for center 0."""
    params = csm_mod.build_csm_params("t.csm", variant, d, rng, sim=sim)
    randomize_biases(params.blocks(), rng)
    centers = rng.uniform(-0.5, 0.5, size=(m, 3))
    feats = rng.uniform(-1.0, 1.0, size=(m, d))
    neigh_pos = np.stack([neighbors_near(rng, centers[j], k, 2 * radius) for j in range(m)])
    neigh_feat = rng.uniform(-1.0, 1.0, size=(m, k, d))

    def build_contexts():
        ctxs = []
        for j in range(m):
            ctxs.append(csm_mod.CsmContext(
                center=constant(centers[j]),
                center_feature=constant(feats[j]),
                neighbor_positions=constant(neigh_pos[j]),
                neighbor_features=constant(neigh_feat[j]),
                layer_radius=radius,
                center_index=j,
            ))
        return ctxs

    def forward():
        ctxs = build_contexts()
        if variant in (3, 4):
            agg = csm_mod.precompute_center_aggregates(ctxs, params)
            updated = (csm_mod.precompute_updated_features(ctxs, params)
                       if variant == 4 else None)
            centers_t = constant(centers)
            features = [c.center_feature for c in ctxs]
            for c in ctxs:
                c.all_centers = centers
                c.all_centers_t = centers_t
                c.all_center_features = features
                c.all_center_agg = agg
                c.all_center_updated = updated
        ctx = ctxs[0]
        if variant == 1:
            return csm_mod.csm1_shift(ctx, params)
        if variant == 2:
            return csm_mod.csm2_shift(ctx, params, sim)
        if variant == 3:
            return csm_mod.csm3_shift(ctx, params, u)
        if variant == 4:
            return csm_mod.csm4_shift(ctx, params)
        return csm_mod.csm5_shift(ctx, params)

    return params, forward


def make_rum_instance(rng, variant, s=6, d=4, t_shells=2, agg="max", radius=0.3,
                      scale_by_radius=True):
    """Parameters plus a forward() returning the radius-update scalar."""
    params = rum_mod.build_rum_params("t.rum", variant, d, t_shells, rng)
    randomize_biases(params.blocks(), rng)
    center = rng.uniform(-0.5, 0.5, size=3)
    neigh_pos = neighbors_near(rng, center, s, 2 * radius)
    neigh_feat = rng.uniform(-1.0, 1.0, size=(s, d))
    g = rng.uniform(-1.0, 1.0, size=d)
    shells = shell_partition(neigh_pos, np.arange(s), center, 2 * radius, t_shells)

    def forward():
        ctx = rum_mod.RumContext(
            center=center,
            center_feature=constant(g),
            neighbor_positions=neigh_pos,
            neighbor_features=constant(neigh_feat),
            shells=shells,
            layer_radius=radius,
        )
        fn = rum_mod.rum1_delta if variant == 1 else rum_mod.rum2_delta
        return fn(ctx, params, agg, scale_by_radius=scale_by_radius)

    return params, forward


def squared(t: Tensor):
    return sum_all(hadamard(t, t))
