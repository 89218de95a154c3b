"""Self-distillation training: a momentum teacher labels pairs for a student.

The teacher never sees a gradient.  Each step it matches its own features
across a pair, estimates a rigid transform robustly, re-derives
correspondences under that transform, and hands them to the student as
pseudo-labels for a hardest-contrastive descriptor loss.  The teacher then
tracks the student through an exponential moving average whose momentum
follows a cosine schedule, or is refreshed periodically / shared outright in
the ablation modes.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyCorrespondences,
    EmptyDataset,
    NoOverlap,
    NoValidHypothesis,
    ShapeMismatch,
    SkippedPair,
    StepOutOfRange,
    TooFewCorrespondences,
)
from .features import (
    ENCODING_GEOMETRIC_WIDTH,
    FeatureMatrix,
    NetParams,
    fpfh_compute,
    local_encoding,
    net_backward,
    net_forward,
    param_init,
)
from .geometry import CorrespondenceSet, PointCloud, RigidTransform, apply, random_rotation
from .solvers import (
    RansacConfig,
    RefineConfig,
    icp_refine,
    inlier_ratio,
    match_features,
    ransac_register,
    refine_correspondences,
    verify_label,
)

TRAIN_MODES = ("continuous_ema", "shared", "periodic_sgp")
BOOTSTRAP_MODES = ("random", "fpfh")


@dataclass(frozen=True)
class DistillSchedule:
    """Teacher-update schedule: EMA momentum endpoints and the update mode.

    ``total_steps`` is the training horizon (epochs times pairs per epoch)
    over which the momentum is cosine-interpolated from ``alpha_start`` to
    ``alpha_end``.  ``refresh_every_epochs`` only matters in periodic mode,
    where the teacher is replaced by a student snapshot at epoch boundaries
    instead of tracking it continuously.
    """

    total_steps: int
    alpha_start: float = 0.9
    alpha_end: float = 1.0
    mode: str = "continuous_ema"
    refresh_every_epochs: int = 1

    def __post_init__(self) -> None:
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if not 0.0 <= self.alpha_start <= 1.0 or not 0.0 <= self.alpha_end <= 1.0:
            raise ValueError("alpha endpoints must lie in [0, 1]")
        if self.alpha_end < self.alpha_start:
            raise ValueError("alpha_end must not be below alpha_start")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}")
        if self.refresh_every_epochs < 1:
            raise ValueError("refresh_every_epochs must be at least 1")


@dataclass(frozen=True)
class TrainConfig:
    """Everything the training loop needs besides the schedule.

    Threshold fields left as None resolve against ``voxel_size``: both the
    RANSAC inlier bound and the refinement bound default to twice the voxel
    size, the negative-mining safe radius to twice the voxel size, and the
    encoding radius to five times the voxel size.
    """

    voxel_size: float
    epochs: int
    seed: int = 0
    learning_rate: float = 0.1
    sgd_momentum: float = 0.9
    pos_margin: float = 0.1
    neg_margin: float = 1.4
    safe_radius: float | None = None
    max_pos_pairs: int = 256
    encoding_radius: float | None = None
    hidden_dims: tuple[int, ...] = (64, 64)
    descriptor_dim: int = 32
    ransac: RansacConfig | None = None
    refine: RefineConfig | None = None
    augment_teacher: bool = False
    bootstrap: str = "random"
    verifier_threshold: float = 0.0
    fmr_ir_threshold: float = 0.05

    def __post_init__(self) -> None:
        if self.voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ValueError("sgd_momentum must lie in [0, 1)")
        if not 0.0 < self.pos_margin < self.neg_margin:
            raise ValueError("margins must satisfy 0 < pos_margin < neg_margin")
        if self.max_pos_pairs < 1:
            raise ValueError("max_pos_pairs must be at least 1")
        if self.bootstrap not in BOOTSTRAP_MODES:
            raise ValueError(f"bootstrap must be one of {BOOTSTRAP_MODES}")
        if not 0.0 <= self.verifier_threshold <= 1.0:
            raise ValueError("verifier_threshold must lie in [0, 1]")
        if self.safe_radius is None:
            object.__setattr__(self, "safe_radius", 2.0 * self.voxel_size)
        if self.encoding_radius is None:
            object.__setattr__(self, "encoding_radius", 5.0 * self.voxel_size)
        if self.ransac is None:
            object.__setattr__(
                self, "ransac", RansacConfig(inlier_threshold=2.0 * self.voxel_size)
            )
        if self.refine is None:
            object.__setattr__(
                self, "refine", RefineConfig(refine_threshold=2.0 * self.voxel_size)
            )
        if self.safe_radius <= 0.0:
            raise ValueError("safe_radius must be positive")

    @property
    def fpfh_normal_radius(self) -> float:
        return 2.0 * self.voxel_size

    @property
    def fpfh_feature_radius(self) -> float:
        return 5.0 * self.voxel_size


@dataclass(frozen=True)
class AugmentedPair:
    """Teacher and student views of one training pair.

    The student views are exact rigid transforms of the corresponding teacher
    views (``student_a == apply(rot_a, teacher_a)``), so correspondence
    indices transfer between views unchanged.
    """

    teacher_a: PointCloud
    teacher_b: PointCloud
    student_a: PointCloud
    student_b: PointCloud
    rot_a: RigidTransform
    rot_b: RigidTransform


@dataclass(frozen=True)
class PseudoLabels:
    correspondences: CorrespondenceSet
    transform: RigidTransform
    inlier_ratio: float
    n_raw: int
    n_refined: int


@dataclass(frozen=True)
class OptimizerState:
    """SGD momentum buffers, one velocity array per parameter array."""

    velocities: NetParams


@dataclass(frozen=True)
class StepResult:
    student: NetParams
    teacher: NetParams
    optimizer: OptimizerState
    loss: float
    inlier_ratio: float
    n_refined: int
    skipped: bool


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    val_fmr_unsup: float
    mean_ir: float
    skipped_pairs: int


@dataclass(frozen=True)
class TrainResult:
    best_student: NetParams
    history: tuple[EpochStats, ...]
    final_student: NetParams
    final_teacher: NetParams
    optimizer: OptimizerState
    best_epoch: int


def cosine_alpha(schedule: DistillSchedule, step: int) -> float:
    """Cosine-interpolated EMA momentum at a given step.

    Equals ``alpha_start`` at step 0 and ``alpha_end`` at ``total_steps``,
    increasing monotonically in between.
    """
    if step < 0 or step > schedule.total_steps:
        raise StepOutOfRange(
            f"step {step} outside [0, {schedule.total_steps}]"
        )
    if schedule.total_steps == 0:
        return schedule.alpha_end
    span = schedule.alpha_end - schedule.alpha_start
    progress = step / schedule.total_steps
    return schedule.alpha_end - span * (math.cos(math.pi * progress) + 1.0) / 2.0


def ema_update(teacher: NetParams, student: NetParams, alpha: float) -> NetParams:
    """Elementwise convex blend ``alpha * teacher + (1 - alpha) * student``.

    Results are clipped to the closed interval between the two operands to
    guard against one-ulp excursions of the blend arithmetic.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if teacher.layer_dims != student.layer_dims:
        raise ShapeMismatch("teacher and student networks differ in shape")

    def blend(t: np.ndarray, s: np.ndarray) -> np.ndarray:
        mixed = alpha * t + (1.0 - alpha) * s
        return np.clip(mixed, np.minimum(t, s), np.maximum(t, s))

    weights = tuple(blend(t, s) for t, s in zip(teacher.weights, student.weights))
    biases = tuple(blend(t, s) for t, s in zip(teacher.biases, student.biases))
    return NetParams(weights, biases, teacher.activation)


def augment_pair(
    a: PointCloud, b: PointCloud, config: TrainConfig, rng: np.random.Generator
) -> AugmentedPair:
    """Build teacher and student views of an (already voxelized) pair.

    Student views always receive independent random rotations.  Teacher views
    are the unmodified inputs unless ``config.augment_teacher`` is set, in
    which case they get their own independent rotations first (the ablation
    that removes the easy, original-orientation teacher problem).
    """
    teacher_a, teacher_b = a, b
    if config.augment_teacher:
        teacher_a = apply(random_rotation(a.dim, rng), a)
        teacher_b = apply(random_rotation(b.dim, rng), b)
    rot_a = random_rotation(a.dim, rng)
    rot_b = random_rotation(b.dim, rng)
    return AugmentedPair(
        teacher_a=teacher_a,
        teacher_b=teacher_b,
        student_a=apply(rot_a, teacher_a),
        student_b=apply(rot_b, teacher_b),
        rot_a=rot_a,
        rot_b=rot_b,
    )


# ---------------------------------------------------------------------------
# hardest-contrastive loss
# ---------------------------------------------------------------------------


def _values(features: FeatureMatrix | np.ndarray) -> np.ndarray:
    return features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)


def _hardest_valid(
    anchors: np.ndarray,
    pool: np.ndarray,
    anchor_pos_coords: np.ndarray,
    pool_coords: np.ndarray,
    safe_radius: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per anchor: index into ``pool`` of the hardest valid negative.

    A pool entry is a valid negative when its coordinate distance from the
    anchor's positive match exceeds ``safe_radius``.  Returns (pool position,
    feature distance, has_valid).
    """
    diff = anchors[:, None, :] - pool[None, :, :]
    feat_d = np.sqrt(np.sum(diff * diff, axis=2))
    geo = np.linalg.norm(
        anchor_pos_coords[:, None, :] - pool_coords[None, :, :], axis=2
    )
    feat_d[geo <= safe_radius] = np.inf
    pos = np.argmin(feat_d, axis=1)
    rows = np.arange(anchors.shape[0])
    dist = feat_d[rows, pos]
    return pos, dist, np.isfinite(dist)


def hardest_contrastive_loss(
    corr: CorrespondenceSet,
    fa: FeatureMatrix | np.ndarray,
    fb: FeatureMatrix | np.ndarray,
    cloud_a: PointCloud,
    cloud_b: PointCloud,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Positive-pair pull plus symmetric hardest-negative push.

    With positive set P (subsampled to ``max_pos_pairs`` when larger):

    * positive term: mean over P of ``max(0, d(f_i, f_j) - pos_margin)^2``;
    * negative terms, both directions, halved: ``max(0, neg_margin -
      min_k d(f_i, f_k))^2`` averaged with the same 1/|P| weight, where the
      minimum runs over subsample points farther than ``safe_radius`` (in
      coordinates) from the anchor's positive match.  Anchors without any
      valid negative contribute zero.

    The hardest-negative selection is treated as fixed during
    differentiation.  Returns the scalar loss and its gradients with respect
    to both full feature matrices.
    """
    if len(corr) == 0:
        raise EmptyCorrespondences("contrastive loss needs at least one positive pair")
    va, vb = _values(fa), _values(fb)
    if va.shape[1] != vb.shape[1]:
        raise ShapeMismatch("feature matrices must share their width")

    pairs = corr.pairs
    if len(corr) > config.max_pos_pairs:
        if rng is None:
            rng = np.random.default_rng(config.seed)
        sel = np.sort(rng.choice(len(corr), size=config.max_pos_pairs, replace=False))
        pairs = pairs[sel]
    ia = pairs[:, 0]
    jb = pairs[:, 1]
    n_pos = pairs.shape[0]

    grad_a = np.zeros_like(va)
    grad_b = np.zeros_like(vb)

    diff_pos = va[ia] - vb[jb]
    d_pos = np.linalg.norm(diff_pos, axis=1)
    hinge_pos = np.maximum(0.0, d_pos - config.pos_margin)
    loss_pos = float(np.sum(hinge_pos**2)) / n_pos
    active = (hinge_pos > 0.0) & (d_pos > 1e-12)
    if np.any(active):
        coef = (2.0 * hinge_pos[active] / (n_pos * d_pos[active]))[:, None]
        push = coef * diff_pos[active]
        np.add.at(grad_a, ia[active], push)
        np.add.at(grad_b, jb[active], -push)

    def negative_direction(
        anchor_feats: np.ndarray,
        anchor_rows: np.ndarray,
        pool_rows: np.ndarray,
        pool_feats_all: np.ndarray,
        positive_coords: np.ndarray,
        pool_coords_all: np.ndarray,
        grad_anchor: np.ndarray,
        grad_pool: np.ndarray,
    ) -> float:
        pool = np.unique(pool_rows)
        pos, dist, has = _hardest_valid(
            anchor_feats[anchor_rows],
            pool_feats_all[pool],
            positive_coords,
            pool_coords_all[pool],
            config.safe_radius,
        )
        hinge = np.where(has, np.maximum(0.0, config.neg_margin - dist), 0.0)
        loss = float(np.sum(hinge**2)) / n_pos
        act = has & (hinge > 0.0) & (dist > 1e-12)
        if np.any(act):
            k = pool[pos[act]]
            diff = (anchor_feats[anchor_rows[act]] - pool_feats_all[k]) / dist[
                act, None
            ]
            # Chain rule through the halved negative term: d/dd of
            # 0.5 * (1/|P|) * hinge^2 is -(hinge / |P|).
            step = (hinge[act] / n_pos)[:, None] * diff
            np.add.at(grad_anchor, anchor_rows[act], -step)
            np.add.at(grad_pool, k, step)
        return loss

    loss_ab = negative_direction(
        va, ia, jb, vb, cloud_b.coords[jb], cloud_b.coords, grad_a, grad_b
    )
    loss_ba = negative_direction(
        vb, jb, ia, va, cloud_a.coords[ia], cloud_a.coords, grad_b, grad_a
    )

    loss = loss_pos + 0.5 * (loss_ab + loss_ba)
    return loss, grad_a, grad_b


# ---------------------------------------------------------------------------
# pseudo-label generation
# ---------------------------------------------------------------------------


def _teacher_views(pair) -> tuple[PointCloud, PointCloud]:
    if isinstance(pair, AugmentedPair):
        return pair.teacher_a, pair.teacher_b
    a, b = pair
    return a, b


def _labels_from_features(
    view_a: PointCloud,
    view_b: PointCloud,
    fa: FeatureMatrix,
    fb: FeatureMatrix,
    config: TrainConfig,
    rng: np.random.Generator | None,
) -> PseudoLabels:
    raw = match_features(fa, fb)
    ransac_cfg = config.ransac
    if rng is not None:
        ransac_cfg = dataclasses.replace(
            ransac_cfg, seed=int(rng.integers(0, 2**31 - 1))
        )
    result = ransac_register(view_a, view_b, raw, ransac_cfg)
    transform = result.transform
    if config.refine.use_icp:
        transform = icp_refine(view_a, view_b, transform, config.refine)
    ir = inlier_ratio(view_a, view_b, raw, transform, ransac_cfg.inlier_threshold)
    refined = refine_correspondences(
        view_a, view_b, transform, config.refine.refine_threshold
    )
    if len(refined) == 0:
        exc = SkippedPair("refinement produced an empty correspondence set")
        exc.inlier_ratio = ir  # type: ignore[attr-defined]
        raise exc
    return PseudoLabels(
        correspondences=refined,
        transform=transform,
        inlier_ratio=ir,
        n_raw=len(raw),
        n_refined=len(refined),
    )


def generate_pseudo_labels(
    pair,
    teacher: NetParams,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    teacher_encodings: tuple[np.ndarray, np.ndarray] | None = None,
) -> PseudoLabels:
    """Run the full teacher labeling path on a pair's teacher views.

    Teacher features -> one-way matching -> RANSAC (-> ICP when enabled) ->
    geometric refinement under tau_2.  No gradients exist anywhere on this
    path; the teacher is a fixed function of its parameters.  Raises
    :class:`SkippedPair` when refinement is empty; solver failures propagate.

    ``pair`` may be an :class:`AugmentedPair` or a plain (a, b) tuple;
    ``teacher_encodings`` can carry precomputed ``local_encoding`` outputs
    for the two views to avoid recomputation across epochs.
    """
    view_a, view_b = _teacher_views(pair)
    if teacher_encodings is None:
        enc_a = local_encoding(view_a, config.encoding_radius)
        enc_b = local_encoding(view_b, config.encoding_radius)
    else:
        enc_a, enc_b = teacher_encodings
    fa = net_forward(teacher, enc_a, normalize=True)
    fb = net_forward(teacher, enc_b, normalize=True)
    return _labels_from_features(view_a, view_b, fa, fb, config, rng)


def fpfh_bootstrap_labels(
    pair,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> PseudoLabels:
    """Pseudo-labels from handcrafted FPFH features instead of the teacher.

    This is the label source the periodic baseline starts from.  Only defined
    in 3D; 2D input raises :class:`Unsupported2D`.
    """
    view_a, view_b = _teacher_views(pair)
    fa = fpfh_compute(view_a, config.fpfh_normal_radius, config.fpfh_feature_radius)
    fb = fpfh_compute(view_b, config.fpfh_normal_radius, config.fpfh_feature_radius)
    return _labels_from_features(view_a, view_b, fa, fb, config, rng)


# ---------------------------------------------------------------------------
# optimization step and outer loop
# ---------------------------------------------------------------------------


def init_optimizer(params: NetParams) -> OptimizerState:
    zeros = NetParams(
        tuple(np.zeros_like(w) for w in params.weights),
        tuple(np.zeros_like(b) for b in params.biases),
        params.activation,
    )
    return OptimizerState(velocities=zeros)


def _sgd_step(
    params: NetParams,
    grads: NetParams,
    state: OptimizerState,
    learning_rate: float,
    momentum: float,
) -> tuple[NetParams, OptimizerState]:
    new_v_w = tuple(
        momentum * v + g for v, g in zip(state.velocities.weights, grads.weights)
    )
    new_v_b = tuple(
        momentum * v + g for v, g in zip(state.velocities.biases, grads.biases)
    )
    new_w = tuple(p - learning_rate * v for p, v in zip(params.weights, new_v_w))
    new_b = tuple(p - learning_rate * v for p, v in zip(params.biases, new_v_b))
    return (
        NetParams(new_w, new_b, params.activation),
        OptimizerState(velocities=NetParams(new_v_w, new_v_b, params.activation)),
    )


def _add_grads(a: NetParams, b: NetParams) -> NetParams:
    return NetParams(
        tuple(x + y for x, y in zip(a.weights, b.weights)),
        tuple(x + y for x, y in zip(a.biases, b.biases)),
        a.activation,
    )


_SKIP_ERRORS = (
    SkippedPair,
    TooFewCorrespondences,
    NoValidHypothesis,
    NoOverlap,
    EmptyCorrespondences,
)


def train_step(
    student: NetParams,
    teacher: NetParams,
    pair: AugmentedPair,
    config: TrainConfig,
    schedule: DistillSchedule,
    step: int,
    optimizer: OptimizerState,
    rng: np.random.Generator | None = None,
    use_fpfh_labels: bool = False,
    teacher_encodings: tuple[np.ndarray, np.ndarray] | None = None,
) -> StepResult:
    """One pair: teacher labels, student gradient step, teacher update.

    A pair that yields no usable pseudo-label (solver failure, empty
    refinement, or a verifier rejection) is skipped: all parameters come back
    unchanged and ``skipped`` is set.  The teacher update depends on the
    schedule mode: continuous EMA with the cosine momentum, an outright copy
    of the new student in shared mode, or no change in periodic mode (the
    loop refreshes it at epoch boundaries).
    """
    try:
        if use_fpfh_labels:
            labels = fpfh_bootstrap_labels(pair, config, rng)
        else:
            labels = generate_pseudo_labels(
                pair, teacher, config, rng, teacher_encodings
            )
        if config.verifier_threshold > 0.0 and not verify_label(
            labels.inlier_ratio, config.verifier_threshold
        ):
            exc = SkippedPair("verifier rejected the pseudo-label")
            exc.inlier_ratio = labels.inlier_ratio  # type: ignore[attr-defined]
            raise exc
    except _SKIP_ERRORS as exc:
        ir = float(getattr(exc, "inlier_ratio", 0.0))
        return StepResult(student, teacher, optimizer, 0.0, ir, 0, skipped=True)

    enc_a = local_encoding(pair.student_a, config.encoding_radius)
    enc_b = local_encoding(pair.student_b, config.encoding_radius)
    feats_a = net_forward(student, enc_a, normalize=True)
    feats_b = net_forward(student, enc_b, normalize=True)
    loss, grad_fa, grad_fb = hardest_contrastive_loss(
        labels.correspondences,
        feats_a,
        feats_b,
        pair.student_a,
        pair.student_b,
        config,
        rng,
    )
    grads = _add_grads(
        net_backward(student, enc_a, grad_fa, normalize=True),
        net_backward(student, enc_b, grad_fb, normalize=True),
    )
    new_student, new_optimizer = _sgd_step(
        student, grads, optimizer, config.learning_rate, config.sgd_momentum
    )

    if schedule.mode == "continuous_ema":
        alpha = cosine_alpha(schedule, min(step, schedule.total_steps))
        new_teacher = ema_update(teacher, new_student, alpha)
    elif schedule.mode == "shared":
        new_teacher = new_student
    else:  # periodic_sgp: refreshed by the loop at epoch boundaries
        new_teacher = teacher

    return StepResult(
        new_student,
        new_teacher,
        new_optimizer,
        loss,
        labels.inlier_ratio,
        labels.n_refined,
        skipped=False,
    )


def unsupervised_fmr(
    pairs,
    params: NetParams,
    config: TrainConfig,
) -> float:
    """Fraction of pairs whose pseudo-label inlier ratio exceeds the bound.

    This is the label-free recall proxy used for model selection: it needs no
    ground-truth transforms, only the teacher path's own inlier ratio.  Pairs
    on which the solver fails outright count as zero.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyDataset("unsupervised FMR over an empty pair list")
    above = 0
    for pair in pairs:
        try:
            ir = generate_pseudo_labels(pair, params, config).inlier_ratio
        except SkippedPair as exc:
            ir = float(getattr(exc, "inlier_ratio", 0.0))
        except (TooFewCorrespondences, NoValidHypothesis, NoOverlap):
            ir = 0.0
        if ir > config.fmr_ir_threshold:
            above += 1
    return above / len(pairs)


def encoding_width(n_feature_channels: int) -> int:
    return ENCODING_GEOMETRIC_WIDTH + n_feature_channels


def train_loop(dataset, config: TrainConfig, schedule: DistillSchedule) -> TrainResult:
    """Full self-distillation run over a dataset of voxelized pairs.

    ``dataset`` must expose ``train_pairs`` and ``val_pairs`` as sequences of
    (a, b) cloud tuples; no ground truth is touched anywhere on this path.
    Student and teacher start from the same random initialization.  When
    ``config.bootstrap`` is "fpfh", the label source is FPFH for the first
    epoch (continuous and shared modes) or until the first teacher refresh
    (periodic mode).  After each epoch the student is scored by unsupervised
    FMR on the validation pairs and the best-scoring snapshot is retained
    (ties keep the later epoch, since recall saturates before the
    descriptors stop improving).
    """
    train_pairs = list(dataset.train_pairs)
    val_pairs = list(dataset.val_pairs)
    if not train_pairs:
        raise EmptyDataset("training requires at least one pair")
    rng = np.random.default_rng(config.seed)
    n_channels = train_pairs[0][0].n_feature_channels
    dims = (encoding_width(n_channels), *config.hidden_dims, config.descriptor_dim)
    student = param_init(dims, rng)
    teacher = student
    optimizer = init_optimizer(student)

    # Teacher views are the raw pair clouds unless teacher augmentation is
    # on, so their encodings are loop invariants worth computing once.
    encoding_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    if not config.augment_teacher:
        for idx, (a, b) in enumerate(train_pairs):
            encoding_cache[idx] = (
                local_encoding(a, config.encoding_radius),
                local_encoding(b, config.encoding_radius),
            )

    fpfh_epochs = 0
    if config.bootstrap == "fpfh":
        fpfh_epochs = (
            schedule.refresh_every_epochs if schedule.mode == "periodic_sgp" else 1
        )

    history: list[EpochStats] = []
    best_student = student
    best_fmr = -1.0
    best_epoch = -1
    step = 0
    for epoch in range(config.epochs):
        if (
            schedule.mode == "periodic_sgp"
            and epoch > 0
            and epoch % schedule.refresh_every_epochs == 0
        ):
            teacher = student
        use_fpfh = epoch < fpfh_epochs
        order = rng.permutation(len(train_pairs))
        losses: list[float] = []
        irs: list[float] = []
        skipped = 0
        for idx in order:
            a, b = train_pairs[idx]
            pair = augment_pair(a, b, config, rng)
            result = train_step(
                student,
                teacher,
                pair,
                config,
                schedule,
                step,
                optimizer,
                rng,
                use_fpfh_labels=use_fpfh,
                teacher_encodings=encoding_cache.get(int(idx)),
            )
            step += 1
            student, teacher, optimizer = (
                result.student,
                result.teacher,
                result.optimizer,
            )
            if result.skipped:
                skipped += 1
            else:
                losses.append(result.loss)
                irs.append(result.inlier_ratio)
        val_fmr = (
            unsupervised_fmr(val_pairs, student, config) if val_pairs else 0.0
        )
        history.append(
            EpochStats(
                epoch=epoch,
                mean_loss=float(np.mean(losses)) if losses else 0.0,
                val_fmr_unsup=val_fmr,
                mean_ir=float(np.mean(irs)) if irs else 0.0,
                skipped_pairs=skipped,
            )
        )
        if val_fmr >= best_fmr:
            # Ties keep the most recent snapshot: match recall saturates
            # quickly while descriptors keep sharpening under the loss.
            best_fmr = val_fmr
            best_student = student
            best_epoch = epoch
    return TrainResult(
        best_student=best_student,
        history=tuple(history),
        final_student=student,
        final_teacher=teacher,
        optimizer=optimizer,
        best_epoch=best_epoch,
    )


def history_to_csv(history) -> str:
    """Render epoch statistics as the canonical history CSV."""
    lines = ["epoch,mean_loss,val_fmr_unsup,mean_ir,skipped_pairs"]
    for row in history:
        lines.append(
            f"{row.epoch},{row.mean_loss!r},{row.val_fmr_unsup!r},"
            f"{row.mean_ir!r},{row.skipped_pairs}"
        )
    return "\n".join(lines) + "\n"
