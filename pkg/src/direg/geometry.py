"""Rigid-transform algebra, closed-form alignment and pose-error metrics.

The registration problem is solved over proper rigid motions only: a rotation
``R`` with ``det(R) = +1`` plus a translation ``t``, acting on row vectors as
``p -> p @ R.T + t``.  Scale is fixed to one throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import TypeAlias

import numpy as np

from .errors import (
    DegenerateInput,
    DimensionMismatch,
    EmptyCorrespondences,
    FormatError,
)

FloatArray: TypeAlias = np.ndarray

_ORTHO_TOL = 1e-9


def _as_float_array(values, name: str) -> FloatArray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class RigidTransform:
    """A proper rigid motion: ``rotation`` (dim x dim) and ``translation`` (dim,)."""

    rotation: FloatArray
    translation: FloatArray

    def __post_init__(self) -> None:
        rot = _as_float_array(self.rotation, "rotation")
        tra = _as_float_array(self.translation, "translation").reshape(-1)
        if rot.ndim != 2 or rot.shape[0] != rot.shape[1]:
            raise ValueError("rotation must be a square matrix")
        dim = rot.shape[0]
        if dim not in (2, 3):
            raise ValueError("only 2D and 3D transforms are supported")
        if tra.shape != (dim,):
            raise DimensionMismatch(
                f"translation has length {tra.shape[0]}, expected {dim}"
            )
        gram_err = np.max(np.abs(rot.T @ rot - np.eye(dim)))
        if gram_err > _ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (max error {gram_err:.3e})")
        det = float(np.linalg.det(rot))
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation determinant is {det:.12f}, expected +1")
        rot = rot.copy()
        tra = tra.copy()
        rot.setflags(write=False)
        tra.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @property
    def dim(self) -> int:
        return self.rotation.shape[0]

    @staticmethod
    def identity(dim: int) -> "RigidTransform":
        return RigidTransform(np.eye(dim), np.zeros(dim))

    def to_json(self) -> str:
        payload = {
            "dim": self.dim,
            "rotation": [[float(v) for v in row] for row in self.rotation],
            "translation": [float(v) for v in self.translation],
        }
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "RigidTransform":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid transform JSON: {exc}") from exc
        for key in ("dim", "rotation", "translation"):
            if key not in payload:
                raise FormatError(f"transform JSON is missing field {key!r}")
        transform = RigidTransform(
            np.asarray(payload["rotation"], dtype=np.float64),
            np.asarray(payload["translation"], dtype=np.float64),
        )
        if transform.dim != payload["dim"]:
            raise FormatError("transform JSON dim field disagrees with matrix shape")
        return transform


@dataclass(frozen=True)
class PointCloud:
    """Points as an (N, dim) coordinate array plus optional per-point features.

    ``features`` always has shape (N, k) with k >= 0, so every point carries
    the same channel count.  Arrays are stored read-only; all operations that
    modify geometry return new instances.
    """

    coords: FloatArray
    features: FloatArray | None = None

    def __post_init__(self) -> None:
        coords = _as_float_array(self.coords, "coords")
        if coords.ndim != 2:
            raise ValueError("coords must be a 2D array of shape (N, dim)")
        n, dim = coords.shape
        if n < 1:
            raise ValueError("a point cloud must contain at least one point")
        if dim not in (2, 3):
            raise ValueError("only 2D and 3D clouds are supported")
        if self.features is None:
            feats = np.zeros((n, 0), dtype=np.float64)
        else:
            feats = _as_float_array(self.features, "features")
            if feats.ndim != 2 or feats.shape[0] != n:
                raise ValueError("features must have one row per point")
        coords = coords.copy()
        feats = feats.copy()
        coords.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def n_feature_channels(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class CorrespondenceSet:
    """Index pairs (index_a, index_b) with optional per-pair distances.

    ``index_a`` values are unique: each left point maps to at most one right
    point.  The set may be empty.
    """

    pairs: np.ndarray
    distances: FloatArray | None = None

    def __post_init__(self) -> None:
        pairs = np.asarray(self.pairs, dtype=np.int64)
        if pairs.size == 0:
            pairs = pairs.reshape(0, 2)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ValueError("pairs must have shape (M, 2)")
        if pairs.size and pairs.min() < 0:
            raise ValueError("correspondence indices must be non-negative")
        if len(np.unique(pairs[:, 0])) != pairs.shape[0]:
            raise ValueError("index_a values must be unique")
        if self.distances is not None:
            dists = _as_float_array(self.distances, "distances").reshape(-1)
            if dists.shape[0] != pairs.shape[0]:
                raise ValueError("distances must have one entry per pair")
            dists = dists.copy()
            dists.setflags(write=False)
            object.__setattr__(self, "distances", dists)
        pairs = pairs.copy()
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @property
    def index_a(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def index_b(self) -> np.ndarray:
        return self.pairs[:, 1]


def apply(transform: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Return the cloud with coordinates mapped through the transform.

    Features are carried over unchanged.
    """
    if transform.dim != cloud.dim:
        raise DimensionMismatch(
            f"transform is {transform.dim}D but cloud is {cloud.dim}D"
        )
    coords = cloud.coords @ transform.rotation.T + transform.translation
    return PointCloud(coords, cloud.features)


def apply_points(transform: RigidTransform, points: FloatArray) -> FloatArray:
    """Map a bare (N, dim) coordinate array through the transform."""
    if points.shape[1] != transform.dim:
        raise DimensionMismatch(
            f"transform is {transform.dim}D but points are {points.shape[1]}D"
        )
    return points @ transform.rotation.T + transform.translation


def compose(first: RigidTransform, second: RigidTransform) -> RigidTransform:
    """Return the transform equivalent to applying ``second`` then ``first``."""
    if first.dim != second.dim:
        raise DimensionMismatch("cannot compose transforms of different dimension")
    rotation = first.rotation @ second.rotation
    translation = first.rotation @ second.translation + first.translation
    return RigidTransform(rotation, translation)


def invert(transform: RigidTransform) -> RigidTransform:
    rotation = transform.rotation.T
    return RigidTransform(rotation, -(rotation @ transform.translation))


def _gather(a: PointCloud, b: PointCloud, corr: CorrespondenceSet):
    if a.dim != b.dim:
        raise DimensionMismatch("clouds live in different dimensions")
    if len(corr) == 0:
        raise EmptyCorrespondences("no correspondences given")
    if corr.index_a.max() >= a.n_points or corr.index_b.max() >= b.n_points:
        raise ValueError("correspondence index out of bounds")
    return a.coords[corr.index_a], b.coords[corr.index_b]


def kabsch_solve(
    a: PointCloud, b: PointCloud, corr: CorrespondenceSet
) -> RigidTransform:
    """Closed-form least-squares rigid alignment over the given pairs.

    Minimizes the sum of squared residuals ``sum_i ||R a_i + t - b_i||^2``
    via SVD of the cross-covariance of the centered matched points, with the
    determinant-sign correction that restricts the solution to proper
    rotations.  Raises :class:`DegenerateInput` when the matched points do
    not constrain a unique rotation (fewer than ``dim`` pairs, collinear
    supports in 3D, coincident supports in 2D).
    """
    pa, pb = _gather(a, b, corr)
    dim = a.dim
    if pa.shape[0] < dim:
        raise DegenerateInput(
            f"need at least {dim} correspondences, got {pa.shape[0]}"
        )
    ca = pa.mean(axis=0)
    cb = pb.mean(axis=0)
    cross = (pa - ca).T @ (pb - cb)
    u, sing, vt = np.linalg.svd(cross)
    # A unique proper rotation needs the second-smallest singular value to be
    # positive: rank >= dim-1 with the sign correction pinning the last axis.
    if sing[dim - 2] <= max(sing[0] * 1e-12, 0.0) or sing[0] == 0.0:
        raise DegenerateInput("matched points do not determine a rotation")
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    flip = np.eye(dim)
    flip[-1, -1] = sign
    rotation = vt.T @ flip @ u.T
    translation = cb - rotation @ ca
    return RigidTransform(rotation, translation)


def mse_alignment(
    a: PointCloud,
    b: PointCloud,
    corr: CorrespondenceSet,
    transform: RigidTransform,
) -> float:
    """Sum of squared residuals ``sum_i ||R a_i + t - b_i||^2`` over the pairs.

    Note this is the plain sum, not the per-pair mean; see
    :func:`mean_alignment` when a size-independent value is needed.
    """
    pa, pb = _gather(a, b, corr)
    residual = apply_points(transform, pa) - pb
    return float(np.sum(residual * residual))


def mean_alignment(
    a: PointCloud,
    b: PointCloud,
    corr: CorrespondenceSet,
    transform: RigidTransform,
) -> float:
    """Per-pair mean of the squared alignment residuals."""
    return mse_alignment(a, b, corr, transform) / len(corr)


def random_rotation(dim: int, rng: np.random.Generator) -> RigidTransform:
    """Draw a uniformly distributed rotation with zero translation.

    2D rotations use a uniform angle; 3D rotations come from a normalized
    Gaussian quaternion, which is uniform over the rotation group.
    """
    if dim == 2:
        theta = rng.uniform(0.0, 2.0 * math.pi)
        c, s = math.cos(theta), math.sin(theta)
        rotation = np.array([[c, -s], [s, c]])
    elif dim == 3:
        quat = rng.normal(size=4)
        quat /= np.linalg.norm(quat)
        w, x, y, z = quat
        rotation = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
    else:
        raise ValueError("dim must be 2 or 3")
    return RigidTransform(rotation, np.zeros(dim))


def rte(estimate: RigidTransform, truth: RigidTransform) -> float:
    """Relative translation error: Euclidean distance between translations."""
    if estimate.dim != truth.dim:
        raise DimensionMismatch("transforms live in different dimensions")
    return float(np.linalg.norm(estimate.translation - truth.translation))


def rre(estimate: RigidTransform, truth: RigidTransform) -> float:
    """Relative rotation error in degrees.

    The residual rotation angle theta satisfies
    ``||Re - Rg||_F = 2 sqrt(2) sin(theta / 2)`` in both 2D and 3D, so it is
    recovered through arcsin of the chordal distance.  Unlike the
    trace-then-arccos form this stays accurate near zero, where arccos turns
    rounding noise in the cosine into errors around 1e-6 degrees.
    """
    if estimate.dim != truth.dim:
        raise DimensionMismatch("transforms live in different dimensions")
    chord = float(np.linalg.norm(estimate.rotation - truth.rotation))
    half_sine = min(1.0, chord / (2.0 * math.sqrt(2.0)))
    return math.degrees(2.0 * math.asin(half_sine))
