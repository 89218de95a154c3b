"""Release acceptance suite: one check per criterion, one verdict line each.

Every test records a ``[PASS]``/``[FAIL]`` line that is replayed in the
"acceptance criteria" summary section after the run (they also print live
under ``pytest -s``).  Checks 01-05, 10 and 11 finish in seconds; the
end-to-end comparisons (06, 08, 09) share one generated corpus and one set
of trained models and together take roughly twenty minutes of CPU time.
"""

from __future__ import annotations

import functools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from direg.cli import main
from direg.data import (
    SynthConfig,
    generate_dataset,
    load_manifest,
    load_training_dataset,
    require_ground_truth,
)
from direg.distill import (
    DistillSchedule,
    TrainConfig,
    cosine_alpha,
    ema_update,
    encoding_width,
    hardest_contrastive_loss,
    train_loop,
)
from direg.errors import Unsupported2D
from direg.evaluation import EvalConfig, evaluate, train_supervised
from direg.features import NetParams, fpfh_compute, net_backward, net_forward, param_init
from direg.geometry import (
    CorrespondenceSet,
    PointCloud,
    RigidTransform,
    apply,
    apply_points,
    kabsch_solve,
    mse_alignment,
    random_rotation,
    rre,
    rte,
)
from direg.solvers import RansacConfig, inlier_ratio, match_features, ransac_register
from direg.spatial import build_index, nearest, voxel_downsample

VOXEL = 0.25
TAU1 = 2 * VOXEL
SEEDS = (0, 1, 2)
EPOCHS = 10


def criterion(tag):
    """Wrap a check returning (ok, detail) so it always leaves one line."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                ok, detail = fn(*args, **kwargs)
            except BaseException as exc:  # record the crash, then surface it
                ACCEPTANCE_LINES.append(f"[FAIL] {tag}: crashed: {exc!r}")
                print(ACCEPTANCE_LINES[-1], flush=True)
                raise
            line = f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}"
            ACCEPTANCE_LINES.append(line)
            print(line, flush=True)
            assert ok, line

        return wrapper

    return deco


def random_rigid(dim: int, rng: np.random.Generator) -> RigidTransform:
    rotation = random_rotation(dim, rng).rotation
    return RigidTransform(rotation, rng.uniform(-5.0, 5.0, size=dim))


# ---------------------------------------------------------------------------
# 01-05: solver, oracle, schedule and gradient exactness
# ---------------------------------------------------------------------------


@criterion("01 closed-form alignment exactness")
def test_criterion_01_closed_form_alignment_exactness():
    t0 = time.perf_counter()
    worst_rre = worst_rte = 0.0
    for trial in range(100):
        rng = np.random.default_rng([901, trial])
        dim = 3 if trial % 2 == 0 else 2
        n = int(rng.integers(dim + 1, 60))
        pts = rng.normal(size=(n, dim)) * rng.uniform(0.5, 3.0)
        truth = random_rigid(dim, rng)
        a = PointCloud(pts)
        b = PointCloud(apply_points(truth, pts))
        idx = np.arange(n, dtype=np.int64)
        estimate = kabsch_solve(a, b, CorrespondenceSet(np.stack([idx, idx], 1)))
        scale = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        worst_rre = max(worst_rre, rre(estimate, truth))
        worst_rte = max(worst_rte, rte(estimate, truth) / scale)
    elapsed = time.perf_counter() - t0
    ok = worst_rre < 1e-9 and worst_rte < 1e-9 and elapsed < 1.0
    return ok, (
        f"100 recoveries, worst rre {worst_rre:.2e} deg, "
        f"worst relative rte {worst_rte:.2e}, {elapsed:.2f}s"
    )


@criterion("02 robust estimation under 70% outliers")
def test_criterion_02_ransac_outlier_robustness():
    t0 = time.perf_counter()
    hits = 0
    for inst in range(100):
        rng = np.random.default_rng([902, inst])
        pts = rng.uniform(0.0, 4.0, size=(500, 3))
        truth = random_rigid(3, rng)
        moved = apply_points(truth, pts)
        scrambled = rng.choice(500, size=350, replace=False)
        moved = moved.copy()
        moved[scrambled] = rng.uniform(
            moved.min(axis=0), moved.max(axis=0), size=(350, 3)
        )
        idx = np.arange(500, dtype=np.int64)
        result = ransac_register(
            PointCloud(pts),
            PointCloud(moved),
            CorrespondenceSet(np.stack([idx, idx], 1)),
            RansacConfig(max_iterations=1000, inlier_threshold=TAU1, seed=inst),
        )
        if rre(result.transform, truth) < 1.0 and rte(result.transform, truth) < TAU1:
            hits += 1
    elapsed = time.perf_counter() - t0
    ok = hits >= 99 and elapsed < 30.0
    return ok, f"{hits}/100 instances within 1 deg and {TAU1}, {elapsed:.1f}s"


@criterion("03 brute-force oracle agreement")
def test_criterion_03_brute_force_oracle_agreement():
    agree = True
    for inst in range(100):
        rng = np.random.default_rng([903, inst])
        dim = 2 if inst % 3 == 0 else 3
        na = int(rng.integers(4, 40))
        nb = int(rng.integers(4, 40))
        pa = rng.normal(size=(na, dim))
        pb = rng.normal(size=(nb, dim))

        found = nearest(build_index(pb), pa)
        d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
        best = d2.argmin(axis=1)
        agree &= bool(np.array_equal(found.index_b, best))
        agree &= bool(
            np.allclose(
                found.distances,
                np.sqrt(d2[np.arange(na), best]),
                rtol=0.0,
                atol=1e-12,
            )
        )

        width = int(rng.integers(2, 8))
        fa = rng.normal(size=(na, width))
        fb = rng.normal(size=(nb, width))
        matched = match_features(fa, fb)
        fd2 = ((fa[:, None, :] - fb[None, :, :]) ** 2).sum(axis=2)
        fbest = fd2.argmin(axis=1)
        agree &= bool(np.array_equal(matched.index_b, fbest))
        agree &= bool(
            np.allclose(
                matched.distances,
                np.sqrt(fd2[np.arange(na), fbest]),
                rtol=0.0,
                atol=1e-12,
            )
        )

        k = int(rng.integers(1, min(na, nb) + 1))
        ia = rng.choice(na, size=k, replace=False).astype(np.int64)
        ib = rng.integers(0, nb, size=k, dtype=np.int64)
        corr = CorrespondenceSet(np.stack([ia, ib], 1))
        transform = random_rigid(dim, rng)
        residuals = np.array(
            [
                np.linalg.norm(
                    transform.rotation @ pa[i] + transform.translation - pb[j]
                )
                for i, j in zip(ia, ib)
            ]
        )
        tau = float(rng.uniform(0.3, 1.5))
        cloud_a, cloud_b = PointCloud(pa), PointCloud(pb)
        agree &= inlier_ratio(cloud_a, cloud_b, corr, transform, tau) == float(
            (residuals < tau).sum()
        ) / k
        loop_sum = float((residuals**2).sum())
        agree &= (
            abs(mse_alignment(cloud_a, cloud_b, corr, transform) - loop_sum)
            <= 1e-12 * max(1.0, loop_sum)
        )
    return agree, "nearest, match_features, inlier_ratio, mse vs loops: 100 instances"


@criterion("04 momentum fixed points and cosine schedule")
def test_criterion_04_momentum_fixed_points_and_schedule():
    rng = np.random.default_rng(904)
    teacher = param_init((6, 8, 4), rng)
    student = param_init((6, 8, 4), np.random.default_rng(905))

    def same(p: NetParams, q: NetParams) -> bool:
        return all(
            np.array_equal(x, y) for x, y in zip(p.weights + p.biases, q.weights + q.biases)
        )

    frozen = same(ema_update(teacher, student, 1.0), teacher)
    copied = same(ema_update(teacher, student, 0.0), student)

    schedule = DistillSchedule(total_steps=10_000)
    alphas = [cosine_alpha(schedule, step) for step in range(10_001)]
    endpoints = abs(alphas[0] - 0.9) < 1e-12 and abs(alphas[-1] - 1.0) < 1e-12
    monotone = all(b >= a for a, b in zip(alphas, alphas[1:]))
    ok = frozen and copied and endpoints and monotone
    return ok, (
        f"alpha=1 freezes: {frozen}, alpha=0 copies: {copied}, "
        f"endpoints 0.9/1.0: {endpoints}, monotone over 10k steps: {monotone}"
    )


def _fd_feature_grads(fn, values: np.ndarray, step: float) -> np.ndarray:
    grads = np.zeros_like(values)
    for pos in np.ndindex(values.shape):
        probe = values.copy()
        probe[pos] = values[pos] + step
        upper = fn(probe)
        probe[pos] = values[pos] - step
        lower = fn(probe)
        grads[pos] = (upper - lower) / (2.0 * step)
    return grads


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


@criterion("05 analytic gradients vs central differences")
def test_criterion_05_gradients_match_finite_differences():
    step = 1e-5
    worst_loss = 0.0
    for inst in range(20):
        rng = np.random.default_rng([951, inst])
        na = int(rng.integers(5, 11))
        nb = int(rng.integers(5, 11))
        fa = rng.normal(size=(na, 4))
        fb = rng.normal(size=(nb, 4))
        cloud_a = PointCloud(rng.uniform(0.0, 3.0, size=(na, 3)))
        cloud_b = PointCloud(rng.uniform(0.0, 3.0, size=(nb, 3)))
        k = int(rng.integers(2, min(na, nb) + 1))
        ia = rng.choice(na, size=k, replace=False).astype(np.int64)
        ib = rng.integers(0, nb, size=k, dtype=np.int64)
        corr = CorrespondenceSet(np.stack([ia, ib], 1))
        config = TrainConfig(
            voxel_size=0.4, epochs=1, safe_radius=0.8, max_pos_pairs=64
        )
        _, grad_a, grad_b = hardest_contrastive_loss(
            corr, fa, fb, cloud_a, cloud_b, config
        )
        fd_a = _fd_feature_grads(
            lambda v: hardest_contrastive_loss(corr, v, fb, cloud_a, cloud_b, config)[0],
            fa,
            step,
        )
        fd_b = _fd_feature_grads(
            lambda v: hardest_contrastive_loss(corr, fa, v, cloud_a, cloud_b, config)[0],
            fb,
            step,
        )
        worst_loss = max(
            worst_loss,
            _relative_error(
                np.concatenate([grad_a.ravel(), grad_b.ravel()]),
                np.concatenate([fd_a.ravel(), fd_b.ravel()]),
            ),
        )

    worst_net = 0.0
    for inst in range(20):
        rng = np.random.default_rng([952, inst])
        dims = (
            int(rng.integers(4, 8)),
            int(rng.integers(5, 10)),
            int(rng.integers(3, 6)),
        )
        params = param_init(dims, rng)
        rows = int(rng.integers(3, 7))
        encoding = rng.normal(size=(rows, dims[0]))
        direction = rng.normal(size=(rows, dims[-1]))
        normalize = inst % 2 == 0

        def net_loss(p: NetParams) -> float:
            output = net_forward(p, encoding, normalize=normalize).values
            return float(np.sum(output * direction))

        analytic = net_backward(params, encoding, direction, normalize=normalize)
        numeric_flat = []
        analytic_flat = []
        for layer in range(len(params.weights)):
            for field in ("weights", "biases"):
                source = getattr(params, field)[layer]
                grads = np.zeros_like(source)
                for pos in np.ndindex(source.shape):
                    for sign in (1.0, -1.0):
                        probe = source.copy()
                        probe[pos] = source[pos] + sign * step
                        weights = list(params.weights)
                        biases = list(params.biases)
                        if field == "weights":
                            weights[layer] = probe
                        else:
                            biases[layer] = probe
                        value = net_loss(NetParams(tuple(weights), tuple(biases)))
                        grads[pos] += sign * value / (2.0 * step)
                numeric_flat.append(grads.ravel())
                analytic_flat.append(getattr(analytic, field)[layer].ravel())
        worst_net = max(
            worst_net,
            _relative_error(
                np.concatenate(analytic_flat), np.concatenate(numeric_flat)
            ),
        )

    ok = worst_loss < 1e-4 and worst_net < 1e-4
    return ok, (
        f"20+20 instances, worst relative error: loss {worst_loss:.2e}, "
        f"network {worst_net:.2e}"
    )


# ---------------------------------------------------------------------------
# 06-09: end-to-end training comparisons on one shared corpus
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    base = str(tmp_path_factory.mktemp("corpus"))
    t0 = time.perf_counter()
    manifest = generate_dataset(SynthConfig(), base, 200, 50, 50, seed=0)
    return {
        "base": base,
        "manifest": manifest,
        "gen_seconds": time.perf_counter() - t0,
    }


@pytest.fixture(scope="session")
def splits(corpus):
    manifest = load_manifest(corpus["manifest"])
    dataset = load_training_dataset(corpus["manifest"], VOXEL)
    return {
        "dataset": dataset,
        "test_records": [r for r in manifest.records if r.split == "test"],
        "train_truths": [
            require_ground_truth(r) for r in manifest.records if r.split == "train"
        ],
        "val_truths": [
            require_ground_truth(r) for r in manifest.records if r.split == "val"
        ],
    }


@pytest.fixture(scope="session")
def eval_config():
    return EvalConfig(
        voxel_size=VOXEL,
        ransac=RansacConfig(max_iterations=300, inlier_threshold=TAU1),
    )


@pytest.fixture(scope="session")
def model_recalls(corpus, splits, eval_config):
    """Test-set registration recall per training arm per seed."""
    dataset = splits["dataset"]
    records = splits["test_records"]
    base = corpus["base"]
    total_steps = EPOCHS * len(dataset.train_pairs)

    def recall(params) -> float:
        report = evaluate(records, base, params, eval_config)
        return report.aggregates["registration_recall"]

    recalls = {
        arm: [] for arm in ("distilled", "supervised", "untrained", "verifier", "shared")
    }
    t0 = time.perf_counter()
    for seed in SEEDS:
        config = TrainConfig(voxel_size=VOXEL, epochs=EPOCHS, seed=seed)
        schedule = DistillSchedule(mode="continuous_ema", total_steps=total_steps)
        recalls["distilled"].append(recall(train_loop(dataset, config, schedule).best_student))

        best, _ = train_supervised(
            list(dataset.train_pairs),
            splits["train_truths"],
            list(dataset.val_pairs),
            splits["val_truths"],
            config,
        )
        recalls["supervised"].append(recall(best))

        rng = np.random.default_rng(seed)
        dims = (
            encoding_width(dataset.train_pairs[0][0].n_feature_channels),
            *config.hidden_dims,
            config.descriptor_dim,
        )
        recalls["untrained"].append(recall(param_init(dims, rng)))
    core_seconds = corpus["gen_seconds"] + (time.perf_counter() - t0)

    for seed in SEEDS:
        config = TrainConfig(
            voxel_size=VOXEL, epochs=EPOCHS, seed=seed, verifier_threshold=0.3
        )
        schedule = DistillSchedule(mode="continuous_ema", total_steps=total_steps)
        recalls["verifier"].append(recall(train_loop(dataset, config, schedule).best_student))

    for seed in SEEDS:
        config = TrainConfig(voxel_size=VOXEL, epochs=EPOCHS, seed=seed)
        schedule = DistillSchedule(mode="shared", total_steps=total_steps)
        recalls["shared"].append(recall(train_loop(dataset, config, schedule).best_student))

    return {"recalls": recalls, "core_seconds": core_seconds}


@criterion("06 self-distillation close to supervised, far above untrained")
def test_criterion_06_self_distillation_close_to_supervised(model_recalls):
    recalls = model_recalls["recalls"]
    distilled = float(np.median(recalls["distilled"]))
    supervised = float(np.median(recalls["supervised"]))
    untrained = float(np.median(recalls["untrained"]))
    seconds = model_recalls["core_seconds"]
    ok = (
        distilled >= 0.9 * supervised
        and distilled >= untrained + 0.30
        and seconds < 1200.0
    )
    return ok, (
        f"median RR over seeds {SEEDS}: distilled {distilled:.2f}, "
        f"supervised {supervised:.2f}, untrained {untrained:.2f}; "
        f"three-arm wall time {seconds:.0f}s"
    )


@pytest.fixture(scope="session")
def augmentation_epochs(tmp_path_factory):
    """First epoch at which validation recall proxy reaches 0.5, per arm."""
    base = str(tmp_path_factory.mktemp("augstudy"))
    generate_dataset(SynthConfig(), base, 30, 8, 0, seed=7)
    dataset = load_training_dataset(f"{base}/manifest.json", VOXEL)
    budget = 6
    rows = []
    for seed in range(5):
        first = {}
        for augmented in (False, True):
            config = TrainConfig(
                voxel_size=VOXEL, epochs=budget, seed=seed, augment_teacher=augmented
            )
            schedule = DistillSchedule(
                mode="continuous_ema", total_steps=budget * len(dataset.train_pairs)
            )
            history = train_loop(dataset, config, schedule).history
            first[augmented] = next(
                (h.epoch for h in history if h.val_fmr_unsup >= 0.5), math.inf
            )
        rows.append((first[False], first[True]))
    return rows


@criterion("07 teacher-side augmentation delays the bootstrap")
def test_criterion_07_teacher_augmentation_delays_bootstrap(augmentation_epochs):
    later = sum(1 for plain, augmented in augmentation_epochs if augmented > plain)
    detail = ", ".join(
        f"seed {i}: {plain}->{augmented}"
        for i, (plain, augmented) in enumerate(augmentation_epochs)
    )
    ok = later >= 4
    return ok, f"augmented arm later in {later}/5 seeds ({detail})"


@criterion("08 pseudo-label verifier does not help")
def test_criterion_08_verifier_does_not_help(model_recalls):
    recalls = model_recalls["recalls"]
    gated = float(np.median(recalls["verifier"]))
    default = float(np.median(recalls["distilled"]))
    ok = gated <= default
    return ok, f"median RR with verifier(0.3) {gated:.2f} vs default {default:.2f}"


@criterion("09 shared-parameter teacher stays close")
def test_criterion_09_shared_parameters_stay_close(model_recalls):
    recalls = model_recalls["recalls"]
    shared = float(np.median(recalls["shared"]))
    default = float(np.median(recalls["distilled"]))
    ok = shared >= default - 0.05
    return ok, f"median RR shared {shared:.2f} vs continuous EMA {default:.2f}"


# ---------------------------------------------------------------------------
# 10-11: handcrafted baseline and interface determinism
# ---------------------------------------------------------------------------


def _smooth_blob(rng: np.random.Generator, n: int = 800) -> PointCloud:
    """Star-shaped surface with a few low-frequency radial lobes."""
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = np.full(n, 1.5)
    for _ in range(4):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        amplitude = rng.uniform(0.15, 0.3)
        frequency = rng.uniform(1.5, 3.5)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        radius += amplitude * np.cos(frequency * (direction @ axis) + phase)
    return PointCloud(direction * radius[:, None])


@criterion("10 handcrafted descriptor baseline")
def test_criterion_10_fpfh_baseline():
    hits = 0
    for trial in range(20):
        rng = np.random.default_rng([910, trial])
        scene = _smooth_blob(rng)
        truth = RigidTransform(
            random_rotation(3, rng).rotation, rng.uniform(-2.0, 2.0, size=3)
        )
        rotated = apply(truth, scene)
        down_a = voxel_downsample(scene, VOXEL)
        down_b = voxel_downsample(rotated, VOXEL)
        fa = fpfh_compute(down_a, 2 * VOXEL, 5 * VOXEL)
        fb = fpfh_compute(down_b, 2 * VOXEL, 5 * VOXEL)
        result = ransac_register(
            down_a,
            down_b,
            match_features(fa, fb),
            RansacConfig(max_iterations=1000, inlier_threshold=TAU1, seed=trial),
        )
        if rte(result.transform, truth) < 0.3 and rre(result.transform, truth) < 15.0:
            hits += 1
    recall = hits / 20

    try:
        fpfh_compute(
            PointCloud(np.random.default_rng(0).normal(size=(40, 2))), 0.5, 1.25
        )
        rejects_2d = False
    except Unsupported2D:
        rejects_2d = True
    ok = recall >= 0.90 and rejects_2d
    return ok, (
        f"RR {recall:.2f} on 20 noiseless rotated copies; "
        f"2D input rejected: {rejects_2d}"
    )


@criterion("11 training and evaluation are byte-deterministic")
def test_criterion_11_cli_determinism(tmp_path):
    data = tmp_path / "data"
    assert (
        main(
            [
                "generate",
                "--out",
                str(data),
                "--n-train",
                "4",
                "--n-val",
                "2",
                "--n-test",
                "2",
                "--n-points",
                "80",
                "--feature-channels",
                "3",
                "--seed",
                "5",
            ]
        )
        == 0
    )
    manifest = str(data / "manifest.json")

    train_bytes = []
    for run in ("first", "second"):
        out = tmp_path / f"train_{run}"
        code = main(
            [
                "train",
                "--data",
                manifest,
                "--out",
                str(out),
                "--voxel-size",
                str(VOXEL),
                "--epochs",
                "2",
                "--ransac-iters",
                "200",
                "--seed",
                "0",
            ]
        )
        assert code == 0
        train_bytes.append(
            (out / "history.csv").read_bytes() + (out / "student.json").read_bytes()
        )
    train_same = train_bytes[0] == train_bytes[1]

    checkpoint = str(tmp_path / "train_first" / "student.json")
    eval_bytes = []
    for run in ("first", "second"):
        report = tmp_path / f"report_{run}.json"
        table = tmp_path / f"report_{run}.csv"
        code = main(
            [
                "eval",
                "--data",
                manifest,
                "--checkpoint",
                checkpoint,
                "--voxel-size",
                str(VOXEL),
                "--ransac-iters",
                "200",
                "--seed",
                "0",
                "--out",
                str(report),
                "--csv",
                str(table),
            ]
        )
        assert code == 0
        eval_bytes.append(report.read_bytes() + table.read_bytes())
    eval_same = eval_bytes[0] == eval_bytes[1]

    ok = train_same and eval_same
    return ok, f"train files identical: {train_same}, report files identical: {eval_same}"
