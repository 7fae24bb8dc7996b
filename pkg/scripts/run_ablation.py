"""Full prompt decomposition against each single component."""

import csv
from pathlib import Path

import numpy as np
from _common import parser

from mopelab.config import load
from mopelab.experiments import run, with_seed

VARIANTS = {
    "full": {},
    "static only": {"dynamic": False, "mapped": False},
    "dynamic only": {"static": False, "mapped": False},
    "mapped only": {"static": False, "dynamic": False},
    "no prompts": {"static": False, "dynamic": False, "mapped": False},
}


def main():
    args = parser(__doc__, "runs/ablation").parse_args()
    base = load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, flags in VARIANTS.items():
        for s in args.seeds:
            res = run(with_seed(base.replace(prompts=flags), s))
            rows.append((name, s, res.test.accuracy, res.model.num_trainable()))
        accs = [r[2] for r in rows if r[0] == name]
        print(f"{name:<13s} {np.mean(accs):.4f}  ({rows[-1][3]} trainable)")
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant", "seed", "test_accuracy", "trainable"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
