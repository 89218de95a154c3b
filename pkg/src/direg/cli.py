"""Command-line interface: generate / train / register / eval / ablate.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure.  Failures print a machine-parsable JSON object
(``{"error": ..., "message": ...}``) on standard error.  Every command is
byte-reproducible for a fixed seed: no timestamps or environment state leak
into any artifact.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .data import (
    SynthConfig,
    generate_dataset,
    load_cloud,
    load_manifest,
    load_training_dataset,
)
from .distill import DistillSchedule, TrainConfig, history_to_csv, train_loop
from .errors import DataError, NumericalError
from .evaluation import EvalConfig, EvalThresholds, _matcher_features, evaluate
from .features import load_params, save_params
from .solvers import (
    RansacConfig,
    RefineConfig,
    icp_refine,
    match_features,
    ransac_register,
)
from .spatial import voxel_downsample

# Public mode names -> teacher-update modes.  "eyoc-aug" additionally turns
# on teacher-view augmentation, "sgp" defaults to 8 refreshes over the run.
MODE_MAP = {
    "direg": "continuous_ema",
    "direg-shared": "shared",
    "sgp": "periodic_sgp",
    "eyoc-aug": "continuous_ema",
}


def _add_solver_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--voxel-size", type=float, required=True)
    parser.add_argument(
        "--tau1", type=float, default=None, help="RANSAC inlier bound (default 2x voxel)"
    )
    parser.add_argument(
        "--tau2",
        type=float,
        default=None,
        help="correspondence refinement bound (default 2x voxel)",
    )
    parser.add_argument("--ransac-iters", type=int, default=1000)
    parser.add_argument("--use-icp", action="store_true")
    parser.add_argument("--seed", type=int, default=0)


def _add_matcher_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", help="descriptor network checkpoint")
    group.add_argument(
        "--fpfh", action="store_true", help="use handcrafted FPFH features"
    )


def _solver_configs(args) -> tuple[RansacConfig, RefineConfig]:
    tau1 = args.tau1 if args.tau1 is not None else 2.0 * args.voxel_size
    tau2 = args.tau2 if args.tau2 is not None else 2.0 * args.voxel_size
    ransac = RansacConfig(
        max_iterations=args.ransac_iters, inlier_threshold=tau1, seed=args.seed
    )
    refine = RefineConfig(refine_threshold=tau2, use_icp=args.use_icp)
    return ransac, refine


def _matcher(args):
    if args.fpfh:
        return "fpfh"
    return load_params(args.checkpoint)


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="ascii") as handle:
        handle.write(text)


def cmd_generate(args) -> int:
    config = SynthConfig(
        dim=args.dim,
        points_per_cloud=args.n_points,
        overlap_range=(args.overlap_min, args.overlap_max),
        noise_sigma=args.noise_sigma,
        outlier_fraction=args.outlier_fraction,
        feature_channels=args.feature_channels,
        translation_range=args.translation_range,
    )
    manifest_path = generate_dataset(
        config, args.out, args.n_train, args.n_val, args.n_test, args.seed
    )
    print(manifest_path)
    return 0


def cmd_train(args) -> int:
    dataset = load_training_dataset(args.data, args.voxel_size)
    ransac, refine = _solver_configs(args)
    config = TrainConfig(
        voxel_size=args.voxel_size,
        epochs=args.epochs,
        seed=args.seed,
        learning_rate=args.lr,
        ransac=ransac,
        refine=refine,
        augment_teacher=(args.mode == "eyoc-aug"),
        bootstrap=args.bootstrap,
        verifier_threshold=args.verifier_threshold,
    )
    refresh = args.refresh_every
    if refresh is None:
        refresh = max(1, args.epochs // 8)
    schedule = DistillSchedule(
        total_steps=args.epochs * len(dataset.train_pairs),
        alpha_start=args.alpha_start,
        alpha_end=args.alpha_end,
        mode=MODE_MAP[args.mode],
        refresh_every_epochs=refresh,
    )
    result = train_loop(dataset, config, schedule)
    os.makedirs(args.out, exist_ok=True)
    save_params(result.best_student, os.path.join(args.out, "student.json"))
    save_params(result.final_teacher, os.path.join(args.out, "teacher.json"))
    save_params(
        result.optimizer.velocities, os.path.join(args.out, "optimizer.json")
    )
    _write_text(os.path.join(args.out, "history.csv"), history_to_csv(result.history))
    print(os.path.join(args.out, "student.json"))
    return 0


def cmd_register(args) -> int:
    cloud_a = voxel_downsample(load_cloud(args.cloud_a), args.voxel_size)
    cloud_b = voxel_downsample(load_cloud(args.cloud_b), args.voxel_size)
    ransac, refine = _solver_configs(args)
    config = EvalConfig(voxel_size=args.voxel_size, ransac=ransac, refine=refine)
    matcher = _matcher(args)
    feats_a = _matcher_features(cloud_a, matcher, config)
    feats_b = _matcher_features(cloud_b, matcher, config)
    corr = match_features(feats_a, feats_b)
    transform = ransac_register(cloud_a, cloud_b, corr, ransac).transform
    if refine.use_icp:
        transform = icp_refine(cloud_a, cloud_b, transform, refine)
    text = transform.to_json()
    if args.out:
        _write_text(args.out, text + "\n")
    print(text)
    return 0


def _eval_config(args) -> EvalConfig:
    ransac, refine = _solver_configs(args)
    thresholds = EvalThresholds(
        rte_max=args.rte_max, rre_max=args.rre_max, fmr_ir_min=args.fmr_ir_min
    )
    return EvalConfig(
        voxel_size=args.voxel_size,
        thresholds=thresholds,
        ransac=ransac,
        refine=refine,
        seed=args.seed,
    )


def _split_records(manifest_path: str, split: str):
    manifest = load_manifest(manifest_path)
    records = [r for r in manifest.records if r.split == split]
    base = os.path.dirname(os.path.abspath(manifest_path))
    return records, base


def cmd_eval(args) -> int:
    records, base = _split_records(args.data, args.split)
    report = evaluate(records, base, _matcher(args), _eval_config(args))
    if args.out:
        _write_text(args.out, report.to_json())
    if args.csv:
        _write_text(args.csv, report.to_csv())
    print(json.dumps(report.aggregates, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    """Train/evaluate the component-ablation grid and emit a comparison CSV.

    Variants: the full method with ICP, without ICP, with the pseudo-label
    verifier enabled (threshold 0.3), and untrained FPFH + RANSAC.
    """
    records, base = _split_records(args.data, "test")
    dataset = load_training_dataset(args.data, args.voxel_size)
    variants = (
        ("with_icp", True, 0.0, False),
        ("no_icp", False, 0.0, False),
        ("verifier", True, 0.3, False),
        ("fpfh_ransac", True, 0.0, True),
    )
    rows = [
        "variant,seed,registration_recall,fmr_unsup,fmr_gt,"
        "mean_rte_success,mean_rre_success"
    ]
    tau1 = args.tau1 if args.tau1 is not None else 2.0 * args.voxel_size
    tau2 = args.tau2 if args.tau2 is not None else 2.0 * args.voxel_size
    for name, use_icp, verifier, handcrafted in variants:
        for seed in args.seeds:
            ransac = RansacConfig(
                max_iterations=args.ransac_iters, inlier_threshold=tau1, seed=seed
            )
            refine = RefineConfig(refine_threshold=tau2, use_icp=use_icp)
            if handcrafted:
                matcher = "fpfh"
            else:
                config = TrainConfig(
                    voxel_size=args.voxel_size,
                    epochs=args.epochs,
                    seed=seed,
                    ransac=ransac,
                    refine=refine,
                    verifier_threshold=verifier,
                )
                schedule = DistillSchedule(
                    total_steps=args.epochs * len(dataset.train_pairs),
                    mode="continuous_ema",
                )
                matcher = train_loop(dataset, config, schedule).best_student
            eval_config = EvalConfig(
                voxel_size=args.voxel_size,
                ransac=ransac,
                refine=refine,
                seed=seed,
            )
            agg = evaluate(records, base, matcher, eval_config).aggregates
            mean_rte = "" if agg["mean_rte_success"] is None else repr(agg["mean_rte_success"])
            mean_rre = "" if agg["mean_rre_success"] is None else repr(agg["mean_rre_success"])
            rows.append(
                f"{name},{seed},{agg['registration_recall']!r},"
                f"{agg['fmr_unsup']!r},{agg['fmr_gt']!r},{mean_rte},{mean_rre}"
            )
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "ablation.csv")
    _write_text(out_path, "\n".join(rows) + "\n")
    print(out_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="direg",
        description="Unsupervised rigid point-cloud registration by self-distillation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="generate a synthetic pair corpus")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--dim", type=int, choices=(2, 3), default=3)
    p_gen.add_argument("--n-train", type=int, default=200)
    p_gen.add_argument("--n-val", type=int, default=50)
    p_gen.add_argument("--n-test", type=int, default=50)
    p_gen.add_argument("--n-points", type=int, default=500)
    p_gen.add_argument("--overlap-min", type=float, default=0.3)
    p_gen.add_argument("--overlap-max", type=float, default=0.8)
    p_gen.add_argument("--noise-sigma", type=float, default=0.075)
    p_gen.add_argument("--outlier-fraction", type=float, default=0.05)
    p_gen.add_argument("--feature-channels", type=int, default=14)
    p_gen.add_argument("--translation-range", type=float, default=2.0)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train the descriptor by self-distillation")
    p_train.add_argument("--data", required=True, help="manifest path")
    p_train.add_argument("--out", required=True, help="output directory")
    _add_solver_flags(p_train)
    p_train.add_argument("--epochs", type=int, default=40)
    p_train.add_argument("--lr", type=float, default=0.1)
    p_train.add_argument("--mode", choices=tuple(MODE_MAP), default="direg")
    p_train.add_argument("--alpha-start", type=float, default=0.9)
    p_train.add_argument("--alpha-end", type=float, default=1.0)
    p_train.add_argument(
        "--refresh-every",
        type=int,
        default=None,
        help="epochs between teacher refreshes in sgp mode (default epochs/8)",
    )
    p_train.add_argument("--bootstrap", choices=("random", "fpfh"), default="random")
    p_train.add_argument("--verifier-threshold", type=float, default=0.0)
    p_train.set_defaults(func=cmd_train)

    p_reg = sub.add_parser("register", help="align two point cloud files")
    p_reg.add_argument("cloud_a")
    p_reg.add_argument("cloud_b")
    _add_matcher_flags(p_reg)
    _add_solver_flags(p_reg)
    p_reg.add_argument("--out", default=None, help="also write the transform JSON here")
    p_reg.set_defaults(func=cmd_register)

    p_eval = sub.add_parser("eval", help="score a matcher against ground truth")
    p_eval.add_argument("--data", required=True, help="manifest path")
    p_eval.add_argument("--split", default="test", choices=("train", "val", "test"))
    _add_matcher_flags(p_eval)
    _add_solver_flags(p_eval)
    p_eval.add_argument("--rte-max", type=float, default=0.3)
    p_eval.add_argument("--rre-max", type=float, default=15.0)
    p_eval.add_argument("--fmr-ir-min", type=float, default=0.05)
    p_eval.add_argument("--out", default=None, help="report JSON path")
    p_eval.add_argument("--csv", default=None, help="per-pair CSV path")
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="run the component-ablation grid")
    p_abl.add_argument("--data", required=True, help="manifest path")
    p_abl.add_argument("--out", required=True, help="output directory")
    _add_solver_flags(p_abl)
    p_abl.add_argument("--epochs", type=int, default=20)
    p_abl.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p_abl.set_defaults(func=cmd_ablate)

    return parser


def _fail(exc: Exception) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        _fail(exc)
        return 3
    except NumericalError as exc:
        _fail(exc)
        return 4
    except ValueError as exc:
        _fail(exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
