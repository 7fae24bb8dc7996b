"""Accuracy as the training set grows."""

from pathlib import Path

from _common import parser

from mopelab.config import load
from mopelab.experiments import SweepSpec, mean_by_value, run_sweep


def main():
    p = parser(__doc__, "runs/shot_sweep")
    p.add_argument("--shots", type=int, nargs="+", default=[64, 256, 1024, 4096])
    args = p.parse_args()
    rows = run_sweep(SweepSpec("shots", args.shots, args.seeds, load(args.config)), Path(args.out))
    for n, acc in sorted(mean_by_value(rows).items()):
        print(f"{n:5d} shots: {acc:.4f}")


if __name__ == "__main__":
    main()
