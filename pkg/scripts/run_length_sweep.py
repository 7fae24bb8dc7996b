"""Vanilla static prompts grown to (k+1)*l rows, no routing."""

from pathlib import Path

from _common import parser

from mopelab.config import load
from mopelab.experiments import SweepSpec, length_for_experts, mean_by_value, run_sweep


def main():
    p = parser(__doc__, "runs/length_sweep")
    p.add_argument("--match", type=int, nargs="+", default=[2, 4, 8], help="expert counts to match")
    args = p.parse_args()
    base = load(args.config)
    rows = run_sweep(SweepSpec("length", args.match, args.seeds, base), Path(args.out))
    for k, acc in sorted(mean_by_value(rows).items()):
        print(f"static_len {length_for_experts(k, base.mope.prompt_len):3d} (matches k={k}): {acc:.4f}")


if __name__ == "__main__":
    main()
