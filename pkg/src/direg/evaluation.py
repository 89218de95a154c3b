"""Ground-truth evaluation, report serialization and reference baselines.

This is the only layer allowed to read generating transforms.  It scores a
matcher (a trained descriptor network or handcrafted FPFH) by running the
full correspondence -> RANSAC -> optional ICP pipeline per pair and
comparing against ground truth, and it hosts the supervised trainer used as
an upper-bound baseline in experiments.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import __version__
from .data import ScenePairRecord, load_record_clouds, require_ground_truth
from .distill import (
    TrainConfig,
    _add_grads,
    _sgd_step,
    augment_pair,
    encoding_width,
    hardest_contrastive_loss,
    init_optimizer,
)
from .errors import (
    DegenerateInput,
    EmptyCorrespondences,
    EmptyDataset,
    NoOverlap,
    NoValidHypothesis,
    TooFewCorrespondences,
)
from .features import (
    NetParams,
    fpfh_compute,
    local_encoding,
    net_backward,
    net_forward,
    param_init,
)
from .geometry import PointCloud, RigidTransform, rre, rte
from .solvers import (
    RansacConfig,
    RefineConfig,
    icp_refine,
    inlier_ratio,
    match_features,
    ransac_register,
    refine_correspondences,
)
from .spatial import voxel_downsample

REPORT_SCHEMA = "direg-report/1"


@dataclass(frozen=True)
class EvalThresholds:
    """Success bounds: translation error, rotation error, FMR inlier bound.

    Defaults follow the indoor convention (0.3 m, 15 degrees); the radar-like
    2D setting conventionally uses (0.5 m, 1 degree).  A pair counts as
    successfully registered only when both errors are strictly below their
    bounds; FMR counts pairs whose inlier ratio is strictly above
    ``fmr_ir_min``.
    """

    rte_max: float = 0.3
    rre_max: float = 15.0
    fmr_ir_min: float = 0.05

    def __post_init__(self) -> None:
        if self.rte_max <= 0.0 or self.rre_max <= 0.0:
            raise ValueError("success thresholds must be positive")
        if not 0.0 <= self.fmr_ir_min < 1.0:
            raise ValueError("fmr_ir_min must lie in [0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    voxel_size: float
    thresholds: EvalThresholds = EvalThresholds()
    ransac: RansacConfig | None = None
    refine: RefineConfig | None = None
    encoding_radius: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")
        if self.ransac is None:
            object.__setattr__(
                self, "ransac", RansacConfig(inlier_threshold=2.0 * self.voxel_size)
            )
        if self.refine is None:
            object.__setattr__(
                self, "refine", RefineConfig(refine_threshold=2.0 * self.voxel_size)
            )
        if self.encoding_radius is None:
            object.__setattr__(self, "encoding_radius", 5.0 * self.voxel_size)

    @property
    def fpfh_normal_radius(self) -> float:
        return 2.0 * self.voxel_size

    @property
    def fpfh_feature_radius(self) -> float:
        return 5.0 * self.voxel_size


@dataclass(frozen=True)
class PairEval:
    pair_id: str
    success: bool
    solver_failed: bool
    rte: float | None
    rre: float | None
    ir_unsup: float
    ir_gt: float
    n_corr: int


@dataclass(frozen=True)
class EvalReport:
    schema: str
    version: str
    dim: int
    matcher: str
    config: dict
    aggregates: dict
    pairs: tuple[PairEval, ...]

    def to_json(self) -> str:
        payload = {
            "schema": self.schema,
            "version": self.version,
            "dim": self.dim,
            "matcher": self.matcher,
            "config": self.config,
            "aggregates": self.aggregates,
            "pairs": [dataclasses.asdict(p) for p in self.pairs],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        lines = ["pair_id,success,solver_failed,rte,rre,ir_unsup,ir_gt,n_corr"]
        for p in self.pairs:
            rte_s = "" if p.rte is None else repr(p.rte)
            rre_s = "" if p.rre is None else repr(p.rre)
            lines.append(
                f"{p.pair_id},{int(p.success)},{int(p.solver_failed)},"
                f"{rte_s},{rre_s},{p.ir_unsup!r},{p.ir_gt!r},{p.n_corr}"
            )
        return "\n".join(lines) + "\n"


def _pair_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0] % (2**31 - 1))


def _matcher_features(cloud: PointCloud, matcher, config: EvalConfig):
    if isinstance(matcher, NetParams):
        return net_forward(
            matcher, local_encoding(cloud, config.encoding_radius), normalize=True
        )
    if matcher == "fpfh":
        return fpfh_compute(
            cloud, config.fpfh_normal_radius, config.fpfh_feature_radius
        )
    raise ValueError(f"unknown matcher {matcher!r}")


def evaluate(
    records,
    base_dir,
    matcher,
    config: EvalConfig,
) -> EvalReport:
    """Score a matcher against ground truth over the given records.

    Each pair runs feature matching, RANSAC and (optionally) ICP; success
    requires both pose errors strictly under the thresholds.  A solver
    failure counts as a non-success with null pose errors.  The per-pair
    ground-truth inlier ratio is measured on the raw matches under the
    generating transform, independent of the estimate.
    """
    records = sorted(records, key=lambda r: r.pair_id)
    if not records:
        raise EmptyDataset("evaluation needs at least one pair")
    results: list[PairEval] = []
    dim = None
    for index, record in enumerate(records):
        truth = require_ground_truth(record)
        cloud_a, cloud_b = load_record_clouds(record, base_dir)
        cloud_a = voxel_downsample(cloud_a, config.voxel_size)
        cloud_b = voxel_downsample(cloud_b, config.voxel_size)
        dim = cloud_a.dim
        feats_a = _matcher_features(cloud_a, matcher, config)
        feats_b = _matcher_features(cloud_b, matcher, config)
        corr = match_features(feats_a, feats_b)
        tau1 = config.ransac.inlier_threshold
        ir_gt = inlier_ratio(cloud_a, cloud_b, corr, truth, tau1)
        ransac_cfg = dataclasses.replace(
            config.ransac, seed=_pair_seed(config.seed, index)
        )
        try:
            estimate = ransac_register(cloud_a, cloud_b, corr, ransac_cfg).transform
            if config.refine.use_icp:
                try:
                    estimate = icp_refine(cloud_a, cloud_b, estimate, config.refine)
                except (NoOverlap, DegenerateInput):
                    pass
            err_t = rte(estimate, truth)
            err_r = rre(estimate, truth)
            results.append(
                PairEval(
                    pair_id=record.pair_id,
                    success=bool(
                        err_t < config.thresholds.rte_max
                        and err_r < config.thresholds.rre_max
                    ),
                    solver_failed=False,
                    rte=err_t,
                    rre=err_r,
                    ir_unsup=inlier_ratio(cloud_a, cloud_b, corr, estimate, tau1),
                    ir_gt=ir_gt,
                    n_corr=len(corr),
                )
            )
        except (TooFewCorrespondences, NoValidHypothesis, EmptyCorrespondences):
            results.append(
                PairEval(
                    pair_id=record.pair_id,
                    success=False,
                    solver_failed=True,
                    rte=None,
                    rre=None,
                    ir_unsup=0.0,
                    ir_gt=ir_gt,
                    n_corr=len(corr),
                )
            )

    n = len(results)
    successes = [p for p in results if p.success]
    bound = config.thresholds.fmr_ir_min
    aggregates = {
        "n_pairs": n,
        "registration_recall": len(successes) / n,
        "fmr_gt": sum(1 for p in results if p.ir_gt > bound) / n,
        "fmr_unsup": sum(1 for p in results if p.ir_unsup > bound) / n,
        "mean_ir_gt": float(np.mean([p.ir_gt for p in results])),
        "mean_ir_unsup": float(np.mean([p.ir_unsup for p in results])),
        "mean_rte_success": (
            float(np.mean([p.rte for p in successes])) if successes else None
        ),
        "mean_rre_success": (
            float(np.mean([p.rre for p in successes])) if successes else None
        ),
    }
    matcher_name = "fpfh" if matcher == "fpfh" else "net"
    config_echo = {
        "voxel_size": config.voxel_size,
        "encoding_radius": config.encoding_radius,
        "seed": config.seed,
        "ransac": dataclasses.asdict(config.ransac),
        "refine": dataclasses.asdict(config.refine),
        "thresholds": dataclasses.asdict(config.thresholds),
    }
    return EvalReport(
        schema=REPORT_SCHEMA,
        version=__version__,
        dim=int(dim),
        matcher=matcher_name,
        config=config_echo,
        aggregates=aggregates,
        pairs=tuple(results),
    )


# ---------------------------------------------------------------------------
# supervised reference trainer (ground-truth side)
# ---------------------------------------------------------------------------


def gt_fmr(
    pairs,
    truths,
    params: NetParams,
    config: TrainConfig,
) -> float:
    """Fraction of pairs whose raw matches have IR above the bound under gt."""
    pairs = list(pairs)
    truths = list(truths)
    if not pairs:
        raise EmptyDataset("gt FMR over an empty pair list")
    tau1 = config.ransac.inlier_threshold
    above = 0
    for (cloud_a, cloud_b), truth in zip(pairs, truths):
        fa = net_forward(
            params, local_encoding(cloud_a, config.encoding_radius), normalize=True
        )
        fb = net_forward(
            params, local_encoding(cloud_b, config.encoding_radius), normalize=True
        )
        corr = match_features(fa, fb)
        if inlier_ratio(cloud_a, cloud_b, corr, truth, tau1) > config.fmr_ir_threshold:
            above += 1
    return above / len(pairs)


def train_supervised(
    train_pairs,
    train_truths,
    val_pairs,
    val_truths,
    config: TrainConfig,
) -> tuple[NetParams, list[tuple[int, float, float]]]:
    """Train the descriptor on ground-truth correspondences.

    Labels per pair are the geometric refinement of the generating transform
    (nearest neighbor under gt, thresholded), computed once up front.  The
    optimizer, loss and augmentation match the unsupervised path exactly, so
    results are directly comparable; model selection uses ground-truth FMR on
    the validation pairs.  Returns the best parameters and a history of
    (epoch, mean loss, validation gt-FMR) rows.
    """
    train_pairs = list(train_pairs)
    train_truths = list(train_truths)
    if not train_pairs:
        raise EmptyDataset("supervised training requires at least one pair")
    rng = np.random.default_rng(config.seed)
    n_channels = train_pairs[0][0].n_feature_channels
    dims = (encoding_width(n_channels), *config.hidden_dims, config.descriptor_dim)
    params = param_init(dims, rng)
    optimizer = init_optimizer(params)

    labels = []
    for (cloud_a, cloud_b), truth in zip(train_pairs, train_truths):
        labels.append(
            refine_correspondences(
                cloud_a, cloud_b, truth, config.refine.refine_threshold
            )
        )

    best = params
    best_fmr = -1.0
    history: list[tuple[int, float, float]] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_pairs))
        losses = []
        for idx in order:
            cloud_a, cloud_b = train_pairs[idx]
            corr = labels[idx]
            pair = augment_pair(cloud_a, cloud_b, config, rng)
            if len(corr) == 0:
                continue
            enc_a = local_encoding(pair.student_a, config.encoding_radius)
            enc_b = local_encoding(pair.student_b, config.encoding_radius)
            fa = net_forward(params, enc_a, normalize=True)
            fb = net_forward(params, enc_b, normalize=True)
            loss, grad_fa, grad_fb = hardest_contrastive_loss(
                corr, fa, fb, pair.student_a, pair.student_b, config, rng
            )
            grads = _add_grads(
                net_backward(params, enc_a, grad_fa, normalize=True),
                net_backward(params, enc_b, grad_fb, normalize=True),
            )
            params, optimizer = _sgd_step(
                params, grads, optimizer, config.learning_rate, config.sgd_momentum
            )
            losses.append(loss)
        val = gt_fmr(val_pairs, val_truths, params, config) if val_pairs else 0.0
        history.append((epoch, float(np.mean(losses)) if losses else 0.0, val))
        if val >= best_fmr:
            # Ties keep the most recent snapshot: recall saturates quickly
            # while descriptors keep sharpening under the loss.
            best_fmr = val
            best = params
    return best, history
