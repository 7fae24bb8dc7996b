"""Expert count versus parameter-matched prompt length, 3 seeds each."""

from pathlib import Path

from _common import parser

from mopelab.config import load
from mopelab.experiments import SweepSpec, mean_by_value, run_sweep


def main():
    p = parser(__doc__, "runs/expert_sweep")
    p.add_argument("--experts", type=int, nargs="+", default=[2, 4, 8])
    args = p.parse_args()
    base = load(args.config)
    means = {}
    for axis in ("experts", "length"):
        rows = run_sweep(SweepSpec(axis, args.experts, args.seeds, base), Path(args.out) / axis)
        means[axis] = mean_by_value(rows)
    print("k   mope    length-matched  margin")
    for k in args.experts:
        m, l = means["experts"][k], means["length"][k]
        print(f"{k:<3d} {m:.4f}  {l:.4f}          {m - l:+.4f}")


if __name__ == "__main__":
    main()
