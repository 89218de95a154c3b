"""End-to-end benchmark: generate a corpus, train a descriptor, score it.

Everything below goes through the public CLI, so the script doubles as a
usage example.  The full run (200/50/50 pairs, 10 epochs) takes around ten
minutes on a laptop CPU; ``--quick`` shrinks it to roughly a minute for
smoke-testing a checkout.

    python3 scripts/run_benchmark.py --out runs/demo
    python3 scripts/run_benchmark.py --out runs/quick --quick --mode sgp
"""

from __future__ import annotations

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from direg.cli import main as direg


def run(argv: list[str]) -> None:
    print(f"$ direg {' '.join(argv)}", flush=True)
    code = direg(argv)
    if code != 0:
        raise SystemExit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="working directory")
    parser.add_argument(
        "--mode",
        default="direg",
        choices=("direg", "direg-shared", "sgp", "eyoc-aug"),
        help="teacher-update mode",
    )
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--quick", action="store_true", help="tiny corpus and two epochs"
    )
    args = parser.parse_args()

    data = os.path.join(args.out, "data")
    model = os.path.join(args.out, "model")
    voxel = "0.25"
    epochs = 2 if args.quick else args.epochs
    counts = ("12", "4", "8") if args.quick else ("200", "50", "50")

    if not os.path.exists(os.path.join(data, "manifest.json")):
        run(
            [
                "generate",
                "--out", data,
                "--n-train", counts[0],
                "--n-val", counts[1],
                "--n-test", counts[2],
                "--seed", str(args.seed),
            ]
        )
    manifest = os.path.join(data, "manifest.json")

    run(
        [
            "train",
            "--data", manifest,
            "--out", model,
            "--voxel-size", voxel,
            "--epochs", str(epochs),
            "--mode", args.mode,
            "--ransac-iters", "300",
            "--seed", str(args.seed),
        ]
    )

    learned = os.path.join(args.out, "report_net.json")
    run(
        [
            "eval",
            "--data", manifest,
            "--checkpoint", os.path.join(model, "student.json"),
            "--voxel-size", voxel,
            "--ransac-iters", "300",
            "--out", learned,
            "--seed", str(args.seed),
        ]
    )
    baseline = os.path.join(args.out, "report_fpfh.json")
    run(
        [
            "eval",
            "--data", manifest,
            "--fpfh",
            "--voxel-size", voxel,
            "--ransac-iters", "300",
            "--out", baseline,
            "--seed", str(args.seed),
        ]
    )

    for label, path in (("learned", learned), ("fpfh", baseline)):
        with open(path, encoding="utf-8") as handle:
            aggregates = json.load(handle)["aggregates"]
        print(
            f"{label:>8}: RR {aggregates['registration_recall']:.3f} "
            f"FMR {aggregates['fmr_gt']:.3f} over {aggregates['n_pairs']} pairs"
        )


if __name__ == "__main__":
    main()
