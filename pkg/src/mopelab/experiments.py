"""Single runs, parameter-matched sweeps and routing reports."""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, dumps, from_dict
from .data import Dataset, Split, generate, subsample_shots
from .errors import ConfigError, MopeError
from .fusion import FusionModel, build_model, prompt_rows_per_layer
from .trainer import MetricsRow, TrainResult, evaluate, train, write_metrics_csv

log = logging.getLogger(__name__)

_DATA_CACHE: dict[str, Dataset] = {}


def dataset_for(cfg: RunConfig) -> Dataset:
    key = json.dumps(asdict(cfg.data), sort_keys=True)
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = generate(cfg.data)
    return _DATA_CACHE[key]


def with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    """Seed override: one integer drives model init and training order."""
    if seed is None:
        return cfg
    return cfg.replace(model_seed=int(seed), train={"seed": int(seed)})


@dataclass
class RunResult:
    model: FusionModel
    train: TrainResult
    test: MetricsRow
    test_scores: np.ndarray | None
    runtime_s: float

    @property
    def rows(self) -> list[MetricsRow]:
        return self.train.history + [self.test]


def run(cfg: RunConfig, shots: int | None = None, out_dir=None) -> RunResult:
    """Generate (cached) data, build, train and test one configuration."""
    t0 = time.perf_counter()
    ds = dataset_for(cfg)
    train_split = ds.train if shots is None else subsample_shots(ds.train, shots, cfg.train.seed)
    model = build_model(cfg)
    hook = None
    if out_dir is not None and cfg.train.checkpoint_every > 0:
        every = cfg.train.checkpoint_every

        def hook(epoch, m):
            if epoch % every == 0:
                save_model(m, Path(out_dir) / f"checkpoint_epoch{epoch:03d}.bin", epoch)

    result = train(model, train_split, ds.val, on_epoch=hook)
    last = result.last_good_epoch
    test, scores = evaluate(model, ds.test, epoch=last, name="test")
    out = RunResult(model, result, test, scores, time.perf_counter() - t0)
    if out_dir is not None:
        write_run(out, Path(out_dir), ds.test)
    return out


def save_model(model: FusionModel, path, epoch: int) -> Path:
    return checkpoint.save(path, model.named_state(), {"epoch": epoch, "config": model.cfg.to_dict()})


def load_model(path) -> tuple[FusionModel, int]:
    tensors, meta = checkpoint.load(path)
    if "config" not in meta:
        raise ConfigError(f"{path}: checkpoint carries no config")
    cfg = from_dict(meta["config"])
    model = build_model(cfg, pretrain=False)
    model.load_state(tensors)
    return model, int(meta.get("epoch", -1))


def write_run(res: RunResult, out: Path, test_split: Split) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dumps(res.model.cfg))
    write_metrics_csv(res.rows, out / "metrics.csv")
    save_model(res.model, out / "checkpoint.bin", res.train.last_good_epoch)
    report = routing_report(res.model, test_split, res.test_scores, res.train.importance, split_name="test")
    write_report(report, out / "routing.json", out / "top_instances.csv")


# routing report -------------------------------------------------------------------


def importance_stats(imp: np.ndarray) -> dict:
    """CV and shares of per-layer expert importance ``imp`` (layers, k)."""
    imp = np.asarray(imp, dtype=np.float64)
    mean = imp.mean(axis=1)
    cv = imp.std(axis=1) / mean
    share = imp / imp.sum(axis=1, keepdims=True)
    return {"cv": cv.tolist(), "mean_cv": float(cv.mean()), "share": share.tolist(), "max_share": float(share.max())}


def routing_report(model: FusionModel, data: Split, scores=None, trajectory=None, split_name: str = "test", top_n: int = 20) -> dict:
    """Importance distribution and per-expert top instances on ``data``.

    ``scores`` (layers, n, k) are recomputed in eval mode when not given;
    ``trajectory`` is the per-epoch training importance, if it was kept.
    """
    if scores is None:
        _, scores = evaluate(model, data)
    mc = model.cfg.mope
    report = {
        "split": split_name,
        "num_layers": model.cfg.encoder.num_layers,
        "num_experts": mc.experts,
        "routed": scores is not None,
        "top_n": top_n,
        "importance_trajectory": trajectory or [],
        "final_importance": [],
        "cv": [],
        "mean_cv": 0.0,
        "share": [],
        "max_share": 0.0,
        "experts": [],
        "mean_purity": 0.0,
    }
    if scores is None:
        return report
    imp = scores.sum(axis=1)  # (L, k)
    report["final_importance"] = imp.tolist()
    report.update(importance_stats(imp))
    purities = []
    n = min(top_n, scores.shape[1])
    for layer in range(scores.shape[0]):
        for j in range(scores.shape[2]):
            col = scores[layer, :, j]
            top = np.argsort(-col, kind="stable")[:n]
            clusters = [int(c) for c in data.cluster[top]]
            majority, count = Counter(clusters).most_common(1)[0]
            purity = count / len(clusters)
            purities.append(purity)
            report["experts"].append({
                "layer": layer,
                "expert": j,
                "importance": float(imp[layer, j]),
                "majority_cluster": majority,
                "purity": purity,
                "top_instances": [{"index": int(i), "score": float(col[i]), "cluster": int(data.cluster[i])} for i in top],
            })
    report["mean_purity"] = float(np.mean(purities))
    return report


def write_report(report: dict, json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    if csv_path is None:
        return
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "expert", "rank", "index", "score", "cluster"])
        for e in report["experts"]:
            for rank, inst in enumerate(e["top_instances"]):
                w.writerow([e["layer"], e["expert"], rank, inst["index"], repr(inst["score"]), inst["cluster"]])


# sweeps ---------------------------------------------------------------------------

AXES = ("experts", "length", "shots")
SWEEP_COLUMNS = ["axis", "value", "seed", "prompt_rows", "test_accuracy", "test_f1_macro", "runtime_s", "status"]


@dataclass
class SweepSpec:
    axis: str
    values: list[int]
    seeds: list[int]
    base: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"sweep axis must be one of {AXES}, got {self.axis!r}")
        if not self.values or not self.seeds:
            raise ConfigError("sweep needs at least one value and one seed")
        if any(int(v) < 1 for v in self.values):
            raise ConfigError("sweep values must be positive integers")


def length_for_experts(k: int, prompt_len: int) -> int:
    """Static length whose per-layer row count matches MoPE with k experts.

    MoPE holds (k+1)*l+1 tunable rows per layer (static l, k experts of l,
    one mapped); the length-scaled baseline keeps the mapped row and a static
    prompt of (k+1)*l rows.
    """
    return (k + 1) * prompt_len


def point_config(spec: SweepSpec, value: int, seed: int) -> tuple[RunConfig, int | None]:
    base = with_seed(spec.base, seed)
    if spec.axis == "experts":
        return base.replace(mope={"experts": int(value)}), None
    if spec.axis == "length":
        # values are the expert counts being matched
        return base.replace(prompts={"dynamic": False, "static": True, "static_len": length_for_experts(int(value), base.mope.prompt_len)}), None
    return base, int(value)


def point_dir(out_dir, spec: SweepSpec, value: int, seed: int) -> Path:
    return Path(out_dir) / f"{spec.axis}{value}_seed{seed}"


def _run_point(args):
    spec, value, seed, out_dir = args
    cfg, shots = point_config(spec, value, seed)
    row = {"axis": spec.axis, "value": value, "seed": seed, "prompt_rows": prompt_rows_per_layer(cfg)}
    try:
        res = run(cfg, shots=shots, out_dir=None if out_dir is None else point_dir(out_dir, spec, value, seed))
        row.update(test_accuracy=res.test.accuracy, test_f1_macro=res.test.f1_macro, runtime_s=round(res.runtime_s, 3),
                   status="ok" if not res.train.diverged else f"diverged@{res.train.last_good_epoch}")
    except MopeError as e:
        log.warning("sweep point %s=%s seed %s failed: %s", spec.axis, value, seed, e)
        row.update(test_accuracy=float("nan"), test_f1_macro=float("nan"), runtime_s=0.0, status=f"error: {type(e).__name__}")
    return row


def run_sweep(spec: SweepSpec, out_dir=None, workers: int = 1) -> list[dict]:
    """One row per (value, seed); a failed point becomes a row with its status.

    With ``out_dir`` each point also writes its full run into its own
    subdirectory (see :func:`point_dir`).
    """
    jobs = [(spec, v, s, out_dir) for v in spec.values for s in spec.seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_point, jobs))
    else:
        rows = [_run_point(j) for j in jobs]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(SWEEP_COLUMNS)
            for r in rows:
                w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in SWEEP_COLUMNS])
    return rows


def mean_by_value(rows: list[dict], key: str = "test_accuracy") -> dict[int, float]:
    out: dict[int, list[float]] = {}
    for r in rows:
        out.setdefault(r["value"], []).append(r[key])
    return {v: float(np.mean(xs)) for v, xs in out.items()}


def sweep_from_dict(raw: dict) -> SweepSpec:
    if not isinstance(raw, dict):
        raise ConfigError("sweep config must be an object")
    unknown = sorted(set(raw) - {"axis", "values", "seeds", "base"})
    if unknown:
        raise ConfigError(f"unknown key(s) in sweep config: {', '.join(unknown)}")
    try:
        return SweepSpec(raw["axis"], [int(v) for v in raw["values"]], [int(s) for s in raw.get("seeds", [0])], from_dict(raw.get("base", {})))
    except (KeyError, TypeError) as e:
        raise ConfigError(f"sweep config: missing or malformed field ({e})") from None
