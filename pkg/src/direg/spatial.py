"""Neighbor queries and voxel-grid downsampling.

The index wraps a balanced KD-tree.  All queries are exact and follow one
tie rule everywhere: among equidistant candidates the lowest index wins.
Distances reported to callers are recomputed with plain numpy arithmetic
(``sqrt(sum((p - q)**2))``) so results are bit-comparable with a linear scan.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyInput
from .geometry import CorrespondenceSet, PointCloud, _as_float_array

# Relative slack used when converting a tree-reported distance into a ball
# radius: wide enough to absorb ulp-level disagreement between the tree's
# internal metric and the numpy recomputation, far below any real gap.
_TIE_SLACK = 1e-9


@dataclass(frozen=True)
class NeighborIndex:
    """KD-tree over a fixed point set, kept alongside the raw coordinates."""

    points: np.ndarray
    tree: cKDTree = field(repr=False, compare=False)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def build_index(points: np.ndarray | PointCloud) -> NeighborIndex:
    """Build a KD-tree index over an (M, dim) coordinate array or cloud."""
    if isinstance(points, PointCloud):
        points = points.coords
    arr = _as_float_array(points, "points")
    if arr.ndim != 2:
        raise ValueError("points must be a 2D array of shape (M, dim)")
    if arr.shape[0] == 0:
        raise EmptyInput("cannot index an empty point set")
    arr = arr.copy()
    arr.setflags(write=False)
    return NeighborIndex(points=arr, tree=cKDTree(arr))


def _check_queries(index: NeighborIndex, queries: np.ndarray) -> np.ndarray:
    arr = _as_float_array(queries, "queries")
    single = arr.ndim == 1
    if single:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError("queries must be one point or an array of points")
    if arr.shape[1] != index.dim:
        raise DimensionMismatch(
            f"index is {index.dim}D but queries are {arr.shape[1]}D"
        )
    return arr


def nearest(index: NeighborIndex, queries: np.ndarray | PointCloud) -> CorrespondenceSet:
    """Exact nearest neighbor of each query point.

    Returns a correspondence set mapping query row -> indexed point, with the
    Euclidean distance per pair.  Equidistant candidates resolve to the lowest
    index: the tree supplies a candidate radius and the winner is re-selected
    among all points inside it by (distance, index).
    """
    if isinstance(queries, PointCloud):
        queries = queries.coords
    q = _check_queries(index, queries)
    base_dist, base_idx = index.tree.query(q, k=1)
    radii = base_dist * (1.0 + _TIE_SLACK)
    candidate_lists = index.tree.query_ball_point(q, radii)
    n = q.shape[0]
    out_idx = np.empty(n, dtype=np.int64)
    out_dist = np.empty(n, dtype=np.float64)
    pts = index.points
    for i in range(n):
        cand = np.sort(np.asarray(candidate_lists[i], dtype=np.int64))
        if cand.size == 0:
            # Zero-radius edge: the reported neighbor is the unique answer.
            cand = np.array([base_idx[i]], dtype=np.int64)
        diffs = pts[cand] - q[i]
        dists = np.sqrt(np.sum(diffs * diffs, axis=1))
        best = int(np.argmin(dists))
        out_idx[i] = cand[best]
        out_dist[i] = dists[best]
    pairs = np.stack([np.arange(n, dtype=np.int64), out_idx], axis=1)
    return CorrespondenceSet(pairs, out_dist)


def radius_neighbors(
    index: NeighborIndex, query: np.ndarray, radius: float
) -> list[tuple[int, float]]:
    """All indexed points within ``radius`` (inclusive) of a single query.

    Returned as (index, distance) tuples sorted by ascending distance, then
    ascending index.
    """
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    q = _check_queries(index, query)[0]
    cand = np.asarray(
        index.tree.query_ball_point(q, radius * (1.0 + _TIE_SLACK)), dtype=np.int64
    )
    if cand.size == 0:
        return []
    diffs = index.points[cand] - q
    dists = np.sqrt(np.sum(diffs * diffs, axis=1))
    keep = dists <= radius
    cand, dists = cand[keep], dists[keep]
    order = np.lexsort((cand, dists))
    return [(int(cand[i]), float(dists[i])) for i in order]


def radius_neighbor_lists(
    index: NeighborIndex, queries: np.ndarray, radius: float
) -> list[np.ndarray]:
    """Batched radius query: index arrays (unordered) per query row.

    Shares the inclusive-``radius`` semantics of :func:`radius_neighbors` but
    skips the per-pair sort, which bulk feature extraction does not need.
    """
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    q = _check_queries(index, queries)
    raw = index.tree.query_ball_point(q, radius * (1.0 + _TIE_SLACK))
    out = []
    for i, cand in enumerate(raw):
        cand = np.asarray(cand, dtype=np.int64)
        if cand.size:
            diffs = index.points[cand] - q[i]
            dists = np.sqrt(np.sum(diffs * diffs, axis=1))
            cand = cand[dists <= radius]
        out.append(cand)
    return out


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Collapse all points sharing a voxel into their centroid.

    Voxel assignment is ``floor(coord / voxel_size)`` per axis; features are
    averaged alongside coordinates.  Output points are ordered by ascending
    lexicographic voxel key, and the members of each voxel are summed in a
    canonical (sorted-by-value) order, so the result is bit-identical under
    any permutation of the input points.
    """
    if voxel_size <= 0.0:
        raise ValueError("voxel_size must be positive")
    keys = np.floor(cloud.coords / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n_vox = uniq.shape[0]
    sort_keys = tuple(cloud.features.T[::-1]) + tuple(cloud.coords.T[::-1]) + (inverse,)
    order = np.lexsort(sort_keys)
    starts = np.r_[0, np.flatnonzero(np.diff(inverse[order])) + 1]
    counts = np.diff(np.r_[starts, inverse.size]).astype(np.float64)
    coords = np.add.reduceat(cloud.coords[order], starts, axis=0) / counts[:, None]
    k = cloud.n_feature_channels
    feats = np.zeros((n_vox, k))
    if k:
        feats = np.add.reduceat(cloud.features[order], starts, axis=0) / counts[:, None]
    return PointCloud(coords, feats)
