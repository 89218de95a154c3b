"""Component ablations: ICP polish, pseudo-label verifier, FPFH labels.

Runs the ``direg ablate`` grid (each variant trained over several seeds on
one shared corpus) and prints the resulting table.  Expect around half an
hour at the default sizes; ``--quick`` cuts the corpus and budget down to a
few minutes.

    python3 scripts/run_ablations.py --out runs/ablations
"""

from __future__ import annotations

import argparse
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
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument(
        "--quick", action="store_true", help="tiny corpus, two epochs, one seed"
    )
    args = parser.parse_args()

    data = os.path.join(args.out, "data")
    grid = os.path.join(args.out, "grid")
    counts = ("12", "4", "8") if args.quick else ("120", "30", "30")
    epochs = 2 if args.quick else args.epochs
    seeds = [args.seeds[0]] if args.quick else args.seeds

    if not os.path.exists(os.path.join(data, "manifest.json")):
        run(
            [
                "generate",
                "--out", data,
                "--n-train", counts[0],
                "--n-val", counts[1],
                "--n-test", counts[2],
            ]
        )

    run(
        [
            "ablate",
            "--data", os.path.join(data, "manifest.json"),
            "--out", grid,
            "--voxel-size", "0.25",
            "--epochs", str(epochs),
            "--ransac-iters", "300",
            "--seeds", *[str(s) for s in seeds],
        ]
    )

    with open(os.path.join(grid, "ablation.csv"), encoding="utf-8") as handle:
        print(handle.read(), end="")


if __name__ == "__main__":
    main()
