"""Correspondence matching and robust rigid-transform estimation.

The estimation stack is deliberately classical: one-way nearest-neighbor
feature matching produces putative correspondences, a seeded RANSAC loop
maximizes the fraction of correspondences within a distance threshold, and an
optional point-to-point ICP polishes the result.  Everything is deterministic
given its configuration; RANSAC scoring ties resolve to the earliest
hypothesis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateInput,
    EmptyCorrespondences,
    NoOverlap,
    NoValidHypothesis,
    ShapeMismatch,
    TooFewCorrespondences,
)
from .features import FeatureMatrix
from .geometry import (
    CorrespondenceSet,
    PointCloud,
    RigidTransform,
    apply_points,
    kabsch_solve,
)
from .spatial import build_index, nearest


@dataclass(frozen=True)
class RansacConfig:
    """Settings for the correspondence-based RANSAC loop.

    ``inlier_threshold`` is the residual bound tau_1; the convention across
    the pipeline is twice the voxel size.  ``sample_size`` of None resolves
    to the spatial dimension, the minimal sample for a rigid transform.
    """

    max_iterations: int = 1000
    inlier_threshold: float = 0.5
    sample_size: int | None = None
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.inlier_threshold <= 0.0:
            raise ValueError("inlier_threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie strictly between 0 and 1")
        if self.sample_size is not None and self.sample_size < 2:
            raise ValueError("sample_size must be at least 2")


@dataclass(frozen=True)
class RefineConfig:
    """Settings for correspondence refinement and the optional ICP stage.

    ``refine_threshold`` is the rejection bound tau_2 shared by
    :func:`refine_correspondences` and ICP; the default convention is twice
    the voxel size.
    """

    refine_threshold: float = 0.5
    use_icp: bool = False
    icp_max_iterations: int = 50
    icp_convergence_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.refine_threshold <= 0.0:
            raise ValueError("refine_threshold must be positive")
        if self.icp_max_iterations < 1:
            raise ValueError("icp_max_iterations must be at least 1")
        if self.icp_convergence_eps <= 0.0:
            raise ValueError("icp_convergence_eps must be positive")


@dataclass(frozen=True)
class RansacResult:
    transform: RigidTransform
    inlier_ratio: float
    inlier_mask: np.ndarray
    iterations: int
    attempts: int
    trace: tuple[float, ...] | None = None


def _feature_values(features: FeatureMatrix | np.ndarray) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        return features.values
    return np.asarray(features, dtype=np.float64)


def match_features(
    fa: FeatureMatrix | np.ndarray, fb: FeatureMatrix | np.ndarray
) -> CorrespondenceSet:
    """One-way nearest neighbor in feature space: each row of ``fa`` to ``fb``.

    Ties resolve to the lowest ``fb`` index.  Distances in the returned set
    are feature-space Euclidean distances.  The scan runs in row chunks so
    the (chunk, M, l) difference tensor stays small.
    """
    va = _feature_values(fa)
    vb = _feature_values(fb)
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[1]:
        raise ShapeMismatch("feature matrices must share their width")
    if va.shape[0] == 0 or vb.shape[0] == 0:
        raise EmptyCorrespondences("cannot match empty feature sets")
    n = va.shape[0]
    out_idx = np.empty(n, dtype=np.int64)
    out_dist = np.empty(n, dtype=np.float64)
    chunk = max(1, int(2_000_000 // max(vb.size, 1)))
    for start in range(0, n, chunk):
        block = va[start : start + chunk]
        diffs = block[:, None, :] - vb[None, :, :]
        d2 = np.sum(diffs * diffs, axis=2)
        best = np.argmin(d2, axis=1)
        rows = np.arange(block.shape[0])
        out_idx[start : start + chunk] = best
        out_dist[start : start + chunk] = np.sqrt(d2[rows, best])
    pairs = np.stack([np.arange(n, dtype=np.int64), out_idx], axis=1)
    return CorrespondenceSet(pairs, out_dist)


def inlier_ratio(
    a: PointCloud,
    b: PointCloud,
    corr: CorrespondenceSet,
    transform: RigidTransform,
    tau1: float,
) -> float:
    """Fraction of correspondences with residual strictly below ``tau1``.

    This is the unsupervised objective the teacher maximizes: it needs no
    ground truth, only a candidate transform.
    """
    if tau1 <= 0.0:
        raise ValueError("tau1 must be positive")
    if len(corr) == 0:
        raise EmptyCorrespondences("inlier ratio of an empty set is undefined")
    residuals = np.linalg.norm(
        apply_points(transform, a.coords[corr.index_a]) - b.coords[corr.index_b],
        axis=1,
    )
    return float(np.mean(residuals < tau1))


def _residual_norms(
    pa: np.ndarray, pb: np.ndarray, transform: RigidTransform
) -> np.ndarray:
    return np.linalg.norm(apply_points(transform, pa) - pb, axis=1)


def ransac_register(
    a: PointCloud,
    b: PointCloud,
    corr: CorrespondenceSet,
    config: RansacConfig,
    collect_trace: bool = False,
) -> RansacResult:
    """Estimate the rigid transform maximizing the inlier ratio over ``corr``.

    Minimal samples are drawn without replacement from a generator seeded by
    ``config.seed``, so results are reproducible.  Samples on which the
    closed-form solve is degenerate are discarded without consuming the
    iteration budget, up to a hard cap of ``10 * max_iterations`` attempts.
    The loop exits early once ``1 - (1 - ir^s)^n >= confidence`` and finishes
    with a single least-squares refit on the best hypothesis's inliers.
    """
    sample_size = config.sample_size if config.sample_size is not None else a.dim
    if sample_size < a.dim:
        raise ValueError("sample_size cannot be below the spatial dimension")
    n_corr = len(corr)
    if n_corr < sample_size:
        raise TooFewCorrespondences(
            f"{n_corr} correspondences but sample size is {sample_size}"
        )
    pa = a.coords[corr.index_a]
    pb = b.coords[corr.index_b]
    sub_a = PointCloud(pa)
    sub_b = PointCloud(pb)
    identity_pairs = np.stack([np.arange(sample_size, dtype=np.int64)] * 2, axis=1)

    rng = np.random.default_rng(config.seed)
    best_ir = -1.0
    best_transform: RigidTransform | None = None
    best_mask: np.ndarray | None = None
    trace: list[float] = []
    iterations = 0
    attempts = 0
    max_attempts = 10 * config.max_iterations
    log_outlier_floor = math.log(1.0 - config.confidence)

    while iterations < config.max_iterations and attempts < max_attempts:
        attempts += 1
        pick = rng.choice(n_corr, size=sample_size, replace=False)
        try:
            hypothesis = kabsch_solve(
                PointCloud(pa[pick]), PointCloud(pb[pick]), CorrespondenceSet(identity_pairs)
            )
        except DegenerateInput:
            continue
        iterations += 1
        residuals = _residual_norms(pa, pb, hypothesis)
        mask = residuals < config.inlier_threshold
        ir = float(np.mean(mask))
        if ir > best_ir:
            best_ir = ir
            best_transform = hypothesis
            best_mask = mask
        if collect_trace:
            trace.append(best_ir)
        if best_ir > 0.0:
            p_good = best_ir**sample_size
            if p_good >= 1.0:
                break
            needed = log_outlier_floor / math.log(1.0 - p_good)
            if iterations >= needed:
                break

    if best_transform is None or best_mask is None:
        raise NoValidHypothesis(
            f"no non-degenerate sample found in {attempts} attempts"
        )

    transform = best_transform
    if int(best_mask.sum()) >= sample_size:
        inlier_idx = np.flatnonzero(best_mask)
        refit_pairs = np.stack([inlier_idx, inlier_idx], axis=1)
        try:
            transform = kabsch_solve(sub_a, sub_b, CorrespondenceSet(refit_pairs))
        except DegenerateInput:
            transform = best_transform
    residuals = _residual_norms(pa, pb, transform)
    mask = residuals < config.inlier_threshold
    return RansacResult(
        transform=transform,
        inlier_ratio=float(np.mean(mask)),
        inlier_mask=mask,
        iterations=iterations,
        attempts=attempts,
        trace=tuple(trace) if collect_trace else None,
    )


def _icp_iterate(
    a: PointCloud,
    b: PointCloud,
    init: RigidTransform,
    config: RefineConfig,
) -> tuple[RigidTransform, list[float]]:
    index_b = build_index(b.coords)
    current = init
    prev_residual = math.inf
    residual_trace: list[float] = []
    for iteration in range(config.icp_max_iterations):
        moved = apply_points(current, a.coords)
        nn = nearest(index_b, moved)
        keep = nn.distances < config.refine_threshold
        if not np.any(keep):
            if iteration == 0:
                raise NoOverlap(
                    "no point pairs within the rejection threshold at the start"
                )
            break
        ia = nn.index_a[keep]
        ib = nn.index_b[keep]
        try:
            candidate = kabsch_solve(
                a, b, CorrespondenceSet(np.stack([ia, ib], axis=1))
            )
        except DegenerateInput:
            break
        residual = float(
            np.mean(
                np.linalg.norm(
                    apply_points(candidate, a.coords[ia]) - b.coords[ib], axis=1
                )
            )
        )
        if residual > prev_residual + 1e-12:
            # The matched set changed in a way that raised the mean residual;
            # reject the step so accepted iterations stay non-increasing.
            break
        current = candidate
        residual_trace.append(residual)
        if abs(prev_residual - residual) < config.icp_convergence_eps:
            break
        prev_residual = residual
    return current, residual_trace


def icp_refine(
    a: PointCloud,
    b: PointCloud,
    init: RigidTransform,
    config: RefineConfig,
) -> RigidTransform:
    """Point-to-point ICP from ``init``, rejecting pairs beyond the threshold.

    Each iteration re-matches ``a`` (under the current transform) to its
    nearest points in ``b``, drops pairs at or beyond ``refine_threshold``,
    and re-solves in closed form.  Iterations that would increase the mean
    matched residual are rejected; convergence is declared once the residual
    improves by less than ``icp_convergence_eps``.
    """
    transform, _ = _icp_iterate(a, b, init, config)
    return transform


def refine_correspondences(
    a: PointCloud,
    b: PointCloud,
    transform: RigidTransform,
    tau2: float,
) -> CorrespondenceSet:
    """Re-derive correspondences geometrically under a candidate transform.

    Every point of ``a`` maps to its nearest neighbor in ``b`` after applying
    ``transform``; pairs at distance >= ``tau2`` are dropped.  The result may
    be empty and records the post-transform distances.
    """
    if tau2 <= 0.0:
        raise ValueError("tau2 must be positive")
    index_b = build_index(b.coords)
    nn = nearest(index_b, apply_points(transform, a.coords))
    keep = nn.distances < tau2
    return CorrespondenceSet(nn.pairs[keep], nn.distances[keep])


def verify_label(ir: float, threshold: float) -> bool:
    """Accept a pseudo-label when its inlier ratio reaches ``threshold``.

    A threshold of zero accepts everything, which is the default pipeline
    behavior; the gate exists for the ablation that filters low-quality
    labels.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return ir >= threshold
