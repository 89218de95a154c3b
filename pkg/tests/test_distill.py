from types import SimpleNamespace

import numpy as np
import pytest

from direg.distill import (
    DistillSchedule,
    EpochStats,
    TrainConfig,
    augment_pair,
    cosine_alpha,
    ema_update,
    fpfh_bootstrap_labels,
    generate_pseudo_labels,
    hardest_contrastive_loss,
    history_to_csv,
    init_optimizer,
    train_loop,
    train_step,
    unsupervised_fmr,
)
from direg.errors import (
    EmptyCorrespondences,
    EmptyDataset,
    ShapeMismatch,
    SkippedPair,
    StepOutOfRange,
)
from direg.features import param_init
from direg.geometry import (
    CorrespondenceSet,
    PointCloud,
    RigidTransform,
    apply,
    apply_points,
    random_rotation,
)


def params_equal(p, q):
    return all(np.array_equal(a, b) for a, b in zip(p.weights, q.weights)) and all(
        np.array_equal(a, b) for a, b in zip(p.biases, q.biases)
    )


def pair_problem(seed, n=120, noise=0.0, features=0):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-1.5, 1.5, size=(n, 3))
    feats = rng.uniform(0.0, 1.0, size=(n, features)) if features else None
    a = PointCloud(coords, feats)
    truth = RigidTransform(random_rotation(3, rng).rotation, rng.uniform(-1, 1, 3))
    b = PointCloud(
        apply_points(truth, coords) + rng.normal(0.0, noise, size=(n, 3)), feats
    )
    return a, b, truth


def small_config(**overrides):
    base = dict(
        voxel_size=0.25,
        epochs=1,
        hidden_dims=(16,),
        descriptor_dim=8,
        max_pos_pairs=64,
    )
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# momentum schedule
# ---------------------------------------------------------------------------


def test_cosine_alpha_endpoints_and_midpoint():
    schedule = DistillSchedule(total_steps=10, alpha_start=0.9, alpha_end=1.0)
    assert cosine_alpha(schedule, 0) == pytest.approx(0.9)
    assert cosine_alpha(schedule, 10) == pytest.approx(1.0)
    # cos(pi/2) = 0 puts the midpoint halfway up the ramp
    assert cosine_alpha(schedule, 5) == pytest.approx(0.95)


def test_cosine_alpha_is_monotone():
    schedule = DistillSchedule(total_steps=97, alpha_start=0.8, alpha_end=0.99)
    values = [cosine_alpha(schedule, s) for s in range(98)]
    assert all(x <= y + 1e-15 for x, y in zip(values, values[1:]))


def test_cosine_alpha_rejects_out_of_range_steps():
    schedule = DistillSchedule(total_steps=5)
    with pytest.raises(StepOutOfRange):
        cosine_alpha(schedule, -1)
    with pytest.raises(StepOutOfRange):
        cosine_alpha(schedule, 6)


def test_cosine_alpha_zero_horizon_returns_the_endpoint():
    schedule = DistillSchedule(total_steps=0, alpha_start=0.9, alpha_end=0.97)
    assert cosine_alpha(schedule, 0) == pytest.approx(0.97)


def test_schedule_validation():
    with pytest.raises(ValueError):
        DistillSchedule(total_steps=-1)
    with pytest.raises(ValueError):
        DistillSchedule(total_steps=1, alpha_start=0.9, alpha_end=0.8)
    with pytest.raises(ValueError):
        DistillSchedule(total_steps=1, mode="nope")
    with pytest.raises(ValueError):
        DistillSchedule(total_steps=1, refresh_every_epochs=0)


# ---------------------------------------------------------------------------
# EMA update
# ---------------------------------------------------------------------------


def test_ema_update_hand_example():
    teacher = param_init((2, 2), np.random.default_rng(0))
    student = param_init((2, 2), np.random.default_rng(1))
    blended = ema_update(teacher, student, 0.25)
    expected = 0.25 * teacher.weights[0] + 0.75 * student.weights[0]
    assert np.allclose(blended.weights[0], expected, atol=1e-15)


def test_ema_update_endpoints_are_exact_copies():
    teacher = param_init((3, 4), np.random.default_rng(2))
    student = param_init((3, 4), np.random.default_rng(3))
    assert params_equal(ema_update(teacher, student, 1.0), teacher)
    assert params_equal(ema_update(teacher, student, 0.0), student)


def test_ema_update_stays_inside_the_operand_interval():
    teacher = param_init((6, 5), np.random.default_rng(4))
    student = param_init((6, 5), np.random.default_rng(5))
    blended = ema_update(teacher, student, 0.9999999)
    lo = np.minimum(teacher.weights[0], student.weights[0])
    hi = np.maximum(teacher.weights[0], student.weights[0])
    assert (blended.weights[0] >= lo).all() and (blended.weights[0] <= hi).all()


def test_ema_update_validation():
    teacher = param_init((2, 2), np.random.default_rng(0))
    student = param_init((2, 3), np.random.default_rng(1))
    with pytest.raises(ShapeMismatch):
        ema_update(teacher, student, 0.5)
    with pytest.raises(ValueError):
        ema_update(teacher, teacher, 1.5)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def pairwise_distances(cloud):
    return np.linalg.norm(cloud.coords[:, None] - cloud.coords[None, :], axis=2)


def test_augment_pair_rotates_student_views_only():
    a, b, _ = pair_problem(seed=0, n=40, features=2)
    aug = augment_pair(a, b, small_config(), np.random.default_rng(7))
    assert aug.teacher_a is a and aug.teacher_b is b
    assert not np.allclose(aug.student_a.coords, a.coords)
    assert np.allclose(pairwise_distances(aug.student_a), pairwise_distances(a))
    assert np.array_equal(aug.student_a.features, a.features)
    assert np.array_equal(
        aug.student_a.coords, apply(aug.rot_a, aug.teacher_a).coords
    )
    assert np.array_equal(
        aug.student_b.coords, apply(aug.rot_b, aug.teacher_b).coords
    )


def test_augment_pair_can_also_rotate_the_teacher():
    a, b, _ = pair_problem(seed=1, n=40)
    cfg = small_config(augment_teacher=True)
    aug = augment_pair(a, b, cfg, np.random.default_rng(8))
    assert not np.allclose(aug.teacher_a.coords, a.coords)
    assert np.allclose(pairwise_distances(aug.teacher_a), pairwise_distances(a))
    assert np.array_equal(
        aug.student_a.coords, apply(aug.rot_a, aug.teacher_a).coords
    )


# ---------------------------------------------------------------------------
# hardest-contrastive loss
# ---------------------------------------------------------------------------


def brute_contrastive(pairs, va, vb, ca, cb, cfg):
    """Loss re-derived with explicit loops straight from its definition."""
    n = len(pairs)
    loss_pos = 0.0
    for i, j in pairs:
        loss_pos += max(0.0, np.linalg.norm(va[i] - vb[j]) - cfg.pos_margin) ** 2
    loss_pos /= n

    def direction(anchor_feats, pool_feats, pool_rows, anchors, pos_coords, pool_coords):
        total = 0.0
        for (row, pos_coord) in zip(anchors, pos_coords):
            best = None
            for k in pool_rows:
                if np.linalg.norm(pos_coord - pool_coords[k]) <= cfg.safe_radius:
                    continue
                d = np.linalg.norm(anchor_feats[row] - pool_feats[k])
                if best is None or d < best:
                    best = d
            if best is not None:
                total += max(0.0, cfg.neg_margin - best) ** 2
        return total / n

    pool_b = sorted({j for _, j in pairs})
    pool_a = sorted({i for i, _ in pairs})
    loss_ab = direction(va, vb, pool_b, [i for i, _ in pairs], [cb[j] for _, j in pairs], cb)
    loss_ba = direction(vb, va, pool_a, [j for _, j in pairs], [ca[i] for i, _ in pairs], ca)
    return loss_pos + 0.5 * (loss_ab + loss_ba)


def loss_problem(seed=21, n_a=12, n_b=14, n_pairs=9, width=4):
    rng = np.random.default_rng(seed)
    va = rng.normal(size=(n_a, width))
    vb = rng.normal(size=(n_b, width))
    ca = PointCloud(rng.uniform(-1.0, 1.0, size=(n_a, 3)))
    cb = PointCloud(rng.uniform(-1.0, 1.0, size=(n_b, 3)))
    ia = rng.permutation(n_a)[:n_pairs]
    jb = rng.permutation(n_b)[:n_pairs]
    corr = CorrespondenceSet(np.stack([ia, jb], axis=1))
    cfg = small_config(safe_radius=0.8, max_pos_pairs=256)
    return corr, va, vb, ca, cb, cfg


def test_contrastive_loss_matches_loop_oracle():
    corr, va, vb, ca, cb, cfg = loss_problem()
    loss, _, _ = hardest_contrastive_loss(corr, va, vb, ca, cb, cfg)
    oracle = brute_contrastive(corr.pairs.tolist(), va, vb, ca.coords, cb.coords, cfg)
    assert loss == pytest.approx(oracle, rel=1e-12)


@pytest.mark.parametrize("seed", [3, 21, 77])
def test_contrastive_gradients_match_finite_differences(seed):
    corr, va, vb, ca, cb, cfg = loss_problem(seed=seed, n_a=8, n_b=9, n_pairs=6, width=3)
    loss, grad_a, grad_b = hardest_contrastive_loss(corr, va, vb, ca, cb, cfg)
    eps = 1e-6

    def value(wa, wb):
        out, _, _ = hardest_contrastive_loss(corr, wa, wb, ca, cb, cfg)
        return out

    fd_a = np.zeros_like(va)
    for idx in np.ndindex(va.shape):
        hi = va.copy()
        hi[idx] += eps
        lo = va.copy()
        lo[idx] -= eps
        fd_a[idx] = (value(hi, vb) - value(lo, vb)) / (2 * eps)
    fd_b = np.zeros_like(vb)
    for idx in np.ndindex(vb.shape):
        hi = vb.copy()
        hi[idx] += eps
        lo = vb.copy()
        lo[idx] -= eps
        fd_b[idx] = (value(va, hi) - value(va, lo)) / (2 * eps)
    assert np.allclose(grad_a, fd_a, rtol=1e-4, atol=1e-8)
    assert np.allclose(grad_b, fd_b, rtol=1e-4, atol=1e-8)


def test_contrastive_loss_without_valid_negatives_is_positive_term_only():
    # all points coincide geometrically, so every pool entry sits inside the
    # safe radius and both negative terms vanish
    va = np.array([[1.0, 0.0], [0.0, 1.0]])
    vb = np.array([[0.0, 1.0], [1.0, 0.0]])
    coords = PointCloud(np.zeros((2, 3)))
    corr = CorrespondenceSet(np.array([[0, 0], [1, 1]]))
    cfg = small_config(safe_radius=0.5)
    loss, grad_a, grad_b = hardest_contrastive_loss(corr, va, vb, coords, coords, cfg)
    expected = (np.sqrt(2.0) - cfg.pos_margin) ** 2  # both positives equal
    assert loss == pytest.approx(expected)
    assert np.isfinite(grad_a).all() and np.isfinite(grad_b).all()


def test_contrastive_loss_is_zero_for_separated_identical_features():
    # positives already coincide in feature space and every negative is
    # beyond the margin: nothing to optimize, zero gradients
    va = np.array([[10.0, 0.0], [0.0, 10.0]])
    vb = va.copy()
    coords = PointCloud(np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]]))
    corr = CorrespondenceSet(np.array([[0, 0], [1, 1]]))
    cfg = small_config(safe_radius=0.5)
    loss, grad_a, grad_b = hardest_contrastive_loss(corr, va, vb, coords, coords, cfg)
    assert loss == 0.0
    assert np.array_equal(grad_a, np.zeros_like(va))
    assert np.array_equal(grad_b, np.zeros_like(vb))


def test_contrastive_loss_subsamples_large_positive_sets_deterministically():
    rng = np.random.default_rng(5)
    n = 40
    va = rng.normal(size=(n, 3))
    vb = rng.normal(size=(n, 3))
    clouds = PointCloud(rng.uniform(-1, 1, size=(n, 3)))
    corr = CorrespondenceSet(np.stack([np.arange(n), np.arange(n)], axis=1))
    cfg = small_config(max_pos_pairs=10, safe_radius=0.4)
    l1, _, _ = hardest_contrastive_loss(corr, va, vb, clouds, clouds, cfg)
    l2, _, _ = hardest_contrastive_loss(corr, va, vb, clouds, clouds, cfg)
    assert l1 == l2
    full_cfg = small_config(max_pos_pairs=1000, safe_radius=0.4)
    l3, _, _ = hardest_contrastive_loss(corr, va, vb, clouds, clouds, full_cfg)
    assert l3 != l1  # different positive sets give a different loss


def test_contrastive_loss_rejects_bad_inputs():
    coords = PointCloud(np.zeros((1, 3)))
    cfg = small_config()
    with pytest.raises(EmptyCorrespondences):
        hardest_contrastive_loss(
            CorrespondenceSet(np.zeros((0, 2), dtype=np.int64)),
            np.zeros((1, 2)),
            np.zeros((1, 2)),
            coords,
            coords,
            cfg,
        )
    with pytest.raises(ShapeMismatch):
        hardest_contrastive_loss(
            CorrespondenceSet(np.array([[0, 0]])),
            np.zeros((1, 2)),
            np.zeros((1, 3)),
            coords,
            coords,
            cfg,
        )


# ---------------------------------------------------------------------------
# pseudo-labels
# ---------------------------------------------------------------------------


def teacher_for(config, n_channels=0, seed=0):
    dims = (8 + n_channels, *config.hidden_dims, config.descriptor_dim)
    return param_init(dims, np.random.default_rng(seed))


def test_generate_pseudo_labels_on_an_exact_copy():
    a, b, truth = pair_problem(seed=2, n=150)
    cfg = small_config()
    labels = generate_pseudo_labels((a, b), teacher_for(cfg), cfg)
    assert labels.n_raw == 150
    assert labels.n_refined == len(labels.correspondences)
    assert 0.0 <= labels.inlier_ratio <= 1.0
    # an exact rigid copy is registerable from raw encodings alone
    moved = apply_points(labels.transform, a.coords)
    assert np.linalg.norm(moved - b.coords, axis=1).mean() < 0.05


def test_generate_pseudo_labels_raises_skipped_pair_when_refinement_empties():
    from direg.solvers import RefineConfig

    a, b, _ = pair_problem(seed=3, n=80, noise=0.05)
    cfg = small_config(refine=RefineConfig(refine_threshold=1e-9))
    with pytest.raises(SkippedPair) as info:
        generate_pseudo_labels((a, b), teacher_for(cfg), cfg)
    assert 0.0 <= info.value.inlier_ratio <= 1.0


def test_fpfh_bootstrap_labels_register_an_exact_copy():
    a, b, truth = pair_problem(seed=4, n=150)
    cfg = small_config()
    labels = fpfh_bootstrap_labels((a, b), cfg)
    moved = apply_points(labels.transform, a.coords)
    # handcrafted features on a sparse blob give a coarse but usable warm
    # start: residuals well under the cloud scale (~3 units across)
    assert np.linalg.norm(moved - b.coords, axis=1).mean() < 0.15
    assert labels.inlier_ratio > 0.1  # enough raw-match support to anchor RANSAC


# ---------------------------------------------------------------------------
# single training step
# ---------------------------------------------------------------------------


def step_inputs(seed=6, noise=0.0, **cfg_overrides):
    a, b, _ = pair_problem(seed=seed, n=130, noise=noise)
    cfg = small_config(**cfg_overrides)
    student = teacher_for(cfg, seed=1)
    teacher = teacher_for(cfg, seed=2)
    schedule = DistillSchedule(total_steps=10, mode=cfg_overrides.get("mode", "continuous_ema"))
    aug = augment_pair(a, b, cfg, np.random.default_rng(9))
    return student, teacher, aug, cfg, schedule


def test_train_step_updates_student_and_teacher():
    student, teacher, aug, cfg, schedule = step_inputs()
    result = train_step(
        student, teacher, aug, cfg, schedule, 0, init_optimizer(student)
    )
    assert not result.skipped
    assert result.loss >= 0.0 and np.isfinite(result.loss)
    assert result.n_refined > 0
    assert not params_equal(result.student, student)
    assert not params_equal(result.teacher, teacher)
    # EMA keeps the teacher a convex blend: each entry between the operands
    lo = np.minimum(teacher.weights[0], result.student.weights[0])
    hi = np.maximum(teacher.weights[0], result.student.weights[0])
    assert (result.teacher.weights[0] >= lo).all()
    assert (result.teacher.weights[0] <= hi).all()


def test_train_step_shared_mode_copies_the_student():
    student, teacher, aug, cfg, schedule = step_inputs()
    shared = DistillSchedule(total_steps=10, mode="shared")
    result = train_step(student, teacher, aug, cfg, shared, 0, init_optimizer(student))
    assert not result.skipped
    assert params_equal(result.teacher, result.student)


def test_train_step_periodic_mode_leaves_the_teacher_alone():
    student, teacher, aug, cfg, schedule = step_inputs()
    periodic = DistillSchedule(total_steps=10, mode="periodic_sgp")
    result = train_step(student, teacher, aug, cfg, periodic, 0, init_optimizer(student))
    assert not result.skipped
    assert params_equal(result.teacher, teacher)


def test_train_step_verifier_rejection_skips_without_touching_params():
    student, teacher, aug, cfg, schedule = step_inputs(
        noise=0.15, verifier_threshold=1.0
    )
    optimizer = init_optimizer(student)
    result = train_step(student, teacher, aug, cfg, schedule, 0, optimizer)
    assert result.skipped
    assert result.student is student
    assert result.teacher is teacher
    assert result.optimizer is optimizer
    assert 0.0 < result.inlier_ratio < 1.0  # the rejected label's quality


def test_train_step_skips_unregisterable_pairs():
    rng = np.random.default_rng(0)
    tiny_a = PointCloud(rng.normal(size=(2, 3)))
    tiny_b = PointCloud(rng.normal(size=(2, 3)))
    cfg = small_config()
    student = teacher_for(cfg, seed=1)
    schedule = DistillSchedule(total_steps=1)
    aug = augment_pair(tiny_a, tiny_b, cfg, rng)
    result = train_step(student, student, aug, cfg, schedule, 0, init_optimizer(student))
    assert result.skipped
    assert result.loss == 0.0


# ---------------------------------------------------------------------------
# unsupervised FMR
# ---------------------------------------------------------------------------


def test_unsupervised_fmr_counts_strictly_above_threshold():
    a, b, _ = pair_problem(seed=7, n=140)
    cfg = small_config()
    params = teacher_for(cfg)
    assert unsupervised_fmr([(a, b)], params, cfg) == 1.0
    # even a perfect inlier ratio of 1.0 does not clear a threshold of 1.0
    strict = small_config(fmr_ir_threshold=1.0)
    assert unsupervised_fmr([(a, b)], params, strict) == 0.0


def test_unsupervised_fmr_counts_solver_failures_as_zero():
    a, b, _ = pair_problem(seed=8, n=140)
    rng = np.random.default_rng(1)
    bad = (PointCloud(rng.normal(size=(2, 3))), PointCloud(rng.normal(size=(2, 3))))
    cfg = small_config()
    params = teacher_for(cfg)
    assert unsupervised_fmr([(a, b), bad], params, cfg) == 0.5
    with pytest.raises(EmptyDataset):
        unsupervised_fmr([], params, cfg)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def tiny_dataset(n_train=3, n_val=1, seed=10):
    pairs = [pair_problem(seed=seed + i, n=110)[:2] for i in range(n_train + n_val)]
    return SimpleNamespace(train_pairs=pairs[:n_train], val_pairs=pairs[n_train:])


def test_train_loop_runs_and_keeps_the_latest_tied_snapshot():
    cfg = small_config(epochs=2)
    schedule = DistillSchedule(total_steps=6)
    result = train_loop(tiny_dataset(), cfg, schedule)
    assert len(result.history) == 2
    assert [row.epoch for row in result.history] == [0, 1]
    # validation FMR saturates at 1.0 on exact copies in both epochs; the
    # tie must resolve to the later snapshot
    assert result.history[0].val_fmr_unsup == 1.0
    assert result.best_epoch == 1
    assert params_equal(result.best_student, result.final_student)


def test_train_loop_shared_mode_ends_with_teacher_equal_to_student():
    cfg = small_config(epochs=1)
    schedule = DistillSchedule(total_steps=3, mode="shared")
    result = train_loop(tiny_dataset(), cfg, schedule)
    assert params_equal(result.final_teacher, result.final_student)


def test_train_loop_periodic_mode_and_fpfh_bootstrap():
    cfg = small_config(epochs=2, bootstrap="fpfh")
    schedule = DistillSchedule(total_steps=6, mode="periodic_sgp")
    result = train_loop(tiny_dataset(), cfg, schedule)
    assert len(result.history) == 2
    assert all(row.mean_ir > 0.0 for row in result.history)


def test_train_loop_rejects_an_empty_dataset():
    with pytest.raises(EmptyDataset):
        train_loop(
            SimpleNamespace(train_pairs=[], val_pairs=[]),
            small_config(),
            DistillSchedule(total_steps=0),
        )


def test_train_config_default_resolution():
    cfg = TrainConfig(voxel_size=0.25, epochs=1)
    assert cfg.safe_radius == pytest.approx(0.5)
    assert cfg.encoding_radius == pytest.approx(1.25)
    assert cfg.ransac.inlier_threshold == pytest.approx(0.5)
    assert cfg.refine.refine_threshold == pytest.approx(0.5)
    assert cfg.fpfh_normal_radius == pytest.approx(0.5)
    assert cfg.fpfh_feature_radius == pytest.approx(1.25)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(voxel_size=0.0, epochs=1)
    with pytest.raises(ValueError):
        TrainConfig(voxel_size=0.25, epochs=1, pos_margin=1.5, neg_margin=1.4)
    with pytest.raises(ValueError):
        TrainConfig(voxel_size=0.25, epochs=1, sgd_momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(voxel_size=0.25, epochs=1, bootstrap="nope")
    with pytest.raises(ValueError):
        TrainConfig(voxel_size=0.25, epochs=1, verifier_threshold=1.5)


def test_history_to_csv_layout():
    rows = [
        EpochStats(epoch=0, mean_loss=0.5, val_fmr_unsup=1.0, mean_ir=0.25, skipped_pairs=2),
        EpochStats(epoch=1, mean_loss=0.375, val_fmr_unsup=1.0, mean_ir=0.5, skipped_pairs=0),
    ]
    text = history_to_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "epoch,mean_loss,val_fmr_unsup,mean_ir,skipped_pairs"
    assert lines[1] == "0,0.5,1.0,0.25,2"
    assert lines[2] == "1,0.375,1.0,0.5,0"
    assert text.endswith("\n")
