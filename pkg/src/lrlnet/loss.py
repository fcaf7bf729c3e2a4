"""Composite training objective: cross-entropy plus region regularizers.

The regularizers keep shifted centers near the previous layer's surface
(fit), bound shift magnitudes by the layer radius (range), and keep radius
updates inside [-r, r] (rum).  Layers with a module switched off contribute
nothing, not explicit zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ShapeError
from .geometry import PointSet
from .tensor import (
    Tensor,
    add,
    add_scalar,
    constant,
    gather_rows,
    hadamard,
    log_softmax,
    neg,
    relu,
    scale,
    sqrt,
    stack_scalars,
    sub,
    sum_all,
    sum_axis,
    take,
)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], computed with max subtraction."""
    if logits.data.ndim != 1 or logits.data.shape[0] < 2:
        raise ShapeError(f"logits must be a vector of >= 2 classes, got {logits.data.shape}")
    label = int(label)
    if not 0 <= label < logits.data.shape[0]:
        raise ArgumentError(f"label {label} out of range for {logits.data.shape[0]} classes")
    return neg(take(log_softmax(logits), label))


def _row_norms(x: Tensor) -> Tensor:
    return sqrt(sum_axis(hadamard(x, x), 1))


def fit_loss(shifted_centers: Tensor, prev_points) -> Tensor:
    """Mean distance from each shifted center to its nearest previous-layer point.

    The nearest-point identity is fixed per step (ties to the lowest index);
    gradient flows through both the center and, when the previous layer is
    tracked, the matched point's coordinates.
    """
    if shifted_centers.data.ndim != 2 or shifted_centers.data.shape[1] != 3:
        raise ShapeError(f"shifted centers must be (m, 3), got {shifted_centers.data.shape}")
    if isinstance(prev_points, Tensor):
        prev_t = prev_points
    elif isinstance(prev_points, PointSet):
        prev_t = constant(prev_points.positions)
    else:
        prev_t = constant(np.asarray(prev_points, dtype=np.float64))
    if prev_t.data.ndim != 2 or prev_t.data.shape[0] < 1:
        raise ArgumentError("prev_points must be a nonempty (n, 3) set")
    m = shifted_centers.data.shape[0]
    diff = shifted_centers.data[:, None, :] - prev_t.data[None, :, :]
    nearest = np.argmin((diff ** 2).sum(axis=2), axis=1)
    matched = gather_rows(prev_t, nearest)
    norms = _row_norms(sub(shifted_centers, matched))
    return scale(sum_all(norms), 1.0 / m)


def range_loss(shifts: Tensor, layer_radius: float) -> Tensor:
    """Mean hinge on shift norms exceeding the layer radius."""
    if shifts.data.ndim != 2 or shifts.data.shape[1] != 3:
        raise ShapeError(f"shifts must be (m, 3), got {shifts.data.shape}")
    if layer_radius <= 0:
        raise ArgumentError(f"layer radius must be positive, got {layer_radius}")
    m = shifts.data.shape[0]
    excess = relu(add_scalar(_row_norms(shifts), -layer_radius))
    return scale(sum_all(excess), 1.0 / m)


def rum_loss(deltas, layer_radius: float) -> Tensor:
    """Mean two-sided hinge keeping each radius update inside [-r, r]."""
    if layer_radius <= 0:
        raise ArgumentError(f"layer radius must be positive, got {layer_radius}")
    if isinstance(deltas, Tensor):
        vec = deltas
    else:
        vec = stack_scalars(list(deltas))
    if vec.data.ndim != 1 or vec.data.shape[0] < 1:
        raise ShapeError(f"deltas must be a nonempty vector, got {vec.data.shape}")
    m = vec.data.shape[0]
    below = relu(neg(add_scalar(vec, layer_radius)))   # |min(0, r + dr)|
    above = relu(add_scalar(vec, -layer_radius))       # max(0, dr - r)
    return scale(sum_all(add(below, above)), 1.0 / m)


@dataclass
class LossTerms:
    """Per-pass loss breakdown; layer lists hold only the layers with the module on."""

    ce: Tensor
    fit_per_layer: list[Tensor] = field(default_factory=list)
    range_per_layer: list[Tensor] = field(default_factory=list)
    rum_per_layer: list[Tensor] = field(default_factory=list)
    alpha1: float = 0.01
    alpha2: float = 0.01

    def component_values(self) -> dict[str, float]:
        return {
            "ce": float(self.ce.data),
            "fit": float(sum(float(t.data) for t in self.fit_per_layer)),
            "range": float(sum(float(t.data) for t in self.range_per_layer)),
            "rum": float(sum(float(t.data) for t in self.rum_per_layer)),
        }


def total_loss(terms: LossTerms) -> Tensor:
    """ce + alpha1 * sum(fit + range) + alpha2 * sum(rum)."""
    total = terms.ce
    csm_terms = list(terms.fit_per_layer) + list(terms.range_per_layer)
    if csm_terms:
        s = csm_terms[0]
        for t in csm_terms[1:]:
            s = add(s, t)
        total = add(total, scale(s, terms.alpha1))
    if terms.rum_per_layer:
        s = terms.rum_per_layer[0]
        for t in terms.rum_per_layer[1:]:
            s = add(s, t)
        total = add(total, scale(s, terms.alpha2))
    return total
