"""Expert balance and cluster purity with and without the importance loss."""

import json
from pathlib import Path

import numpy as np
from _common import parser

from mopelab.config import load
from mopelab.experiments import dataset_for, importance_stats, routing_report, run, with_seed


def main():
    p = parser(__doc__, "runs/importance")
    p.add_argument("--weights", type=float, nargs="+", default=None, help="default: the config's weight and 0")
    args = p.parse_args()
    base = load(args.config)
    weights = args.weights or [base.train.imp_loss_weight, 0.0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for w in weights:
        cv, share, purity = [], [], []
        for s in args.seeds:
            res = run(with_seed(base.replace(train={"imp_loss_weight": w}), s))
            stats = importance_stats(res.train.importance[-1])  # last training epoch
            rep = routing_report(res.model, dataset_for(base).test, res.test_scores)
            cv.append(stats["mean_cv"])
            share.append(stats["max_share"])
            purity.append(rep["mean_purity"])
        summary[str(w)] = {"mean_cv": float(np.mean(cv)), "max_share": float(np.max(share)), "mean_purity": float(np.mean(purity))}
        print(f"imp weight {w:g}: CV {np.mean(cv):.3f}  max share {np.max(share):.3f}  purity {np.mean(purity):.3f}")
    (out / "importance.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
