"""Non-differentiable spatial queries over point clouds.

Everything here is brute-force O(n*m) on purpose: the point counts stay at
or below a few thousand, and exact agreement with the linear-scan oracles in
the test suite matters more than speed.  All functions are pure given their
rng argument, so they can run concurrently over shared read-only arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ContractError, EmptyRegionError


def _positions(points) -> np.ndarray:
    arr = points.positions if isinstance(points, PointSet) else points
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
        raise ArgumentError(f"expected an (n, 3) point array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class PointSet:
    """An (n, 3) array of finite coordinates."""

    positions: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.positions, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
            raise ArgumentError(f"PointSet needs an (n>=1, 3) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ArgumentError("PointSet coordinates must be finite")
        object.__setattr__(self, "positions", arr)

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class RegionSet:
    """Per-center neighbor groups with their radii.

    `groups[j]` holds exactly K indices into the source point set (possibly
    with cyclic duplicates when the ball was sparse).
    """

    centers: np.ndarray          # (m, 3)
    center_feature_idx: np.ndarray  # (m,) indices into the source set
    radii: np.ndarray            # (m,) > 0
    groups: np.ndarray           # (m, K) indices into the source set

    def validate_against(self, points) -> None:
        pts = _positions(points)
        n = pts.shape[0]
        if self.groups.min() < 0 or self.groups.max() >= n:
            raise ContractError("group index out of range for source points")
        if np.any(self.radii <= 0):
            raise ContractError("region radii must be positive")
        for j in range(self.centers.shape[0]):
            d = np.sqrt(((pts[self.groups[j]] - self.centers[j]) ** 2).sum(axis=1))
            if np.any(d > self.radii[j]):
                raise ContractError(f"region {j}: grouped point outside radius")


@dataclass
class ShellPartition:
    """Assignment of neighbors to concentric shells 1..T."""

    shell_of: np.ndarray  # (S,) values in 1..T
    counts: np.ndarray    # (T,) occupancy per shell
    boundaries: np.ndarray = field(default=None)  # (T,) outer radius per shell

    @property
    def num_shells(self) -> int:
        return self.counts.shape[0]


def farthest_point_sample(points, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min selection of m point indices.

    The first pick is `seed_index`; every later pick maximizes the minimum
    squared distance to the picks so far, ties resolved to the lowest index.
    """
    pts = _positions(points)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ArgumentError(f"cannot sample {m} points from {n}")
    if not 0 <= seed_index < n:
        raise ArgumentError(f"seed index {seed_index} out of range for {n} points")
    selected = np.empty(m, dtype=np.intp)
    selected[0] = seed_index
    # einsum over the length-3 axis sums left to right, bitwise identical to
    # ((pts - p) ** 2).sum(axis=1); diff buffer reused across rounds.
    diff = pts - pts[seed_index]
    d2 = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, m):
        nxt = int(np.argmax(d2))
        selected[i] = nxt
        np.subtract(pts, pts[nxt], out=diff)
        np.minimum(d2, np.einsum("ij,ij->i", diff, diff), out=d2)
    return selected


def distances_to(points, center) -> np.ndarray:
    """Euclidean distances of all points to one center."""
    pts = _positions(points)
    center = np.asarray(center, dtype=np.float64)
    return np.sqrt(((pts - center) ** 2).sum(axis=1))


def distance_matrix(points, centers) -> np.ndarray:
    """(m, n) distances; row j is bitwise equal to distances_to(points, centers[j])."""
    pts = _positions(points)
    centers = np.asarray(centers, dtype=np.float64)
    return np.sqrt(((centers[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))


def ball_query_from_distances(distances: np.ndarray, radius: float, k: int,
                              rng: np.random.Generator) -> np.ndarray:
    """ball_query when the distances to every point are already known."""
    if radius <= 0:
        raise ArgumentError(f"radius must be positive, got {radius}")
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    eligible = np.flatnonzero(distances <= radius)
    if eligible.size == 0:
        raise EmptyRegionError(f"no points within {radius} of center")
    eligible = eligible[np.argsort(distances[eligible], kind="stable")]
    if eligible.size > k:
        picks = rng.choice(eligible.size, size=k, replace=False)
        return eligible[picks]
    return np.resize(eligible, k)


def ball_query(points, center, radius: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """K indices of points within `radius` of `center`.

    Candidates are enumerated by distance (ties by index), so the draw is a
    function of the region's geometry rather than of the input point order.
    More than k candidates: a uniform draw without replacement.  Fewer than
    k (but at least one): the candidate list repeated cyclically to length
    k.  No candidates: EmptyRegionError.
    """
    return ball_query_from_distances(distances_to(points, center), radius, k, rng)


def nearest_index(points, center) -> int:
    """Index of the point closest to `center`, ties to the lowest index."""
    pts = _positions(points)
    center = np.asarray(center, dtype=np.float64)
    d2 = ((pts - center) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def k_nearest_centers(centers, j: int, u: int) -> np.ndarray:
    """Indices of the u centers nearest center j, excluding j itself."""
    pts = _positions(centers)
    m = pts.shape[0]
    if not 0 <= j < m:
        raise ArgumentError(f"center index {j} out of range for {m} centers")
    if not 1 <= u <= m - 1:
        raise ArgumentError(f"u must be in [1, {m - 1}], got {u}")
    d2 = ((pts - pts[j]) ** 2).sum(axis=1)
    d2[j] = np.inf
    order = np.argsort(d2, kind="stable")
    return order[:u]


def shell_partition(points, neighbor_indices, center, r2: float, t_shells: int,
                    distances: np.ndarray | None = None) -> ShellPartition:
    """Split neighbors into T concentric shells of outer radii (t/T) * r2.

    Shell t covers ((t-1)/T * r2, t/T * r2]; shell 1 additionally includes
    distance zero.  Boundaries are closed from above, so a point exactly on
    a boundary belongs to the inner shell.  `distances` may carry the
    precomputed all-points distance row for this center.
    """
    pts = _positions(points)
    center = np.asarray(center, dtype=np.float64)
    if t_shells < 1:
        raise ArgumentError(f"t_shells must be >= 1, got {t_shells}")
    if r2 <= 0:
        raise ArgumentError(f"r2 must be positive, got {r2}")
    idx = np.asarray(neighbor_indices, dtype=np.intp)
    if distances is not None:
        d = distances[idx]
    elif idx.size:
        d = np.sqrt(((pts[idx] - center) ** 2).sum(axis=1))
    else:
        d = np.empty(0)
    boundaries = r2 * (np.arange(1, t_shells + 1) / t_shells)
    if idx.size and d.max() > boundaries[-1]:
        raise ContractError(f"neighbor at distance {d.max()} exceeds outer radius {boundaries[-1]}")
    shell_of = np.searchsorted(boundaries, d, side="left") + 1
    counts = np.bincount(shell_of, minlength=t_shells + 1)[1:]
    return ShellPartition(shell_of=shell_of.astype(np.intp), counts=counts, boundaries=boundaries)
