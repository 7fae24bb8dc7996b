"""Both adaptivity demos at their shipped settings."""

import argparse
import json
from pathlib import Path

from _common import ROOT  # noqa: F401  (puts src on the path)

from mopelab.adaptivity import DemoSettings, theorem1_demo, theorem2_demo


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/theorems")
    args = p.parse_args()
    cfg = DemoSettings(trials=args.trials, seed=args.seed)
    reports = [
        theorem1_demo(cfg),
        theorem1_demo(cfg, identical=True),
        theorem2_demo(cfg, n_instances=2, k=2),
        theorem2_demo(cfg, n_instances=4, k=2),
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        s = rep.summary()
        gaps = [abs(t["gap"]) for t in rep.valid]
        print(f"{rep.demo:<20s} pass rate {s['pass_rate']:.3f} over {s['valid']} valid, max |gap| {max(gaps, default=0):.2e}")
        (out / f"{rep.demo}_report.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
