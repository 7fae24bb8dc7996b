"""``mopelab`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 a demo or check missed its acceptance threshold.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import tensor as T
from .adaptivity import DemoSettings, theorem1_demo, theorem2_demo
from .data import save_dataset
from .errors import ConfigError, DataError, DimensionError, MopeError, NumericError
from .experiments import (
    dataset_for,
    load_model,
    mean_by_value,
    routing_report,
    run,
    run_sweep,
    sweep_from_dict,
    with_seed,
    write_report,
)
from .trainer import evaluate, write_metrics_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 2, 3, 4
GRAD_TOL = 1e-4
DEMO_PASS_RATE = 0.95

log = logging.getLogger("mopelab")


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None


def _run_config(args) -> config_mod.RunConfig:
    cfg = config_mod.from_dict(_read_json(args.config))
    cfg = with_seed(cfg, args.seed)
    if args.out:
        cfg = cfg.replace(output_dir=args.out)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = config_mod.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg = cfg.replace(data={"seed": args.seed})
    out = Path(args.out or Path(cfg.output_dir) / "data")
    paths = save_dataset(dataset_for(cfg), out)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    res = run(cfg, out_dir=cfg.output_dir)
    t = res.test
    print(f"test accuracy {t.accuracy:.4f}  f1_macro {t.f1_macro:.4f}  trainable {res.model.num_trainable()}  -> {cfg.output_dir}")
    if res.train.diverged:
        print(f"training diverged; kept epoch {res.train.last_good_epoch}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _checkpoint_path(cfg) -> Path:
    path = Path(cfg.output_dir) / "checkpoint.bin"
    if not path.exists():
        raise ConfigError(f"no checkpoint at {path}; run `mopelab train` first")
    return path


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    model, epoch = load_model(_checkpoint_path(cfg))
    ds = dataset_for(model.cfg)
    row, scores = evaluate(model, ds.test, epoch=epoch, name="test")
    out = Path(cfg.output_dir)
    write_metrics_csv([row], out / "eval_metrics.csv")
    print(f"test accuracy {row.accuracy:.4f}  f1_macro {row.f1_macro:.4f}")
    return EXIT_OK


def cmd_routing_report(args) -> int:
    cfg = _run_config(args)
    model, _ = load_model(_checkpoint_path(cfg))
    ds = dataset_for(model.cfg)
    traj = []
    prev = Path(cfg.output_dir) / "routing.json"
    if prev.exists():
        traj = json.loads(prev.read_text()).get("importance_trajectory", [])
    report = routing_report(model, ds.test, trajectory=traj, split_name="test")
    out = Path(cfg.output_dir)
    write_report(report, out / "routing_report.json", out / "routing_top_instances.csv")
    print(f"max importance share {report['max_share']:.3f}  mean CV {report['mean_cv']:.3f}  mean purity {report['mean_purity']:.3f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    raw = _read_json(args.config)
    spec = sweep_from_dict(raw)
    if args.seed is not None:
        spec.seeds = [args.seed]
    out = Path(args.out or spec.base.output_dir)
    rows = run_sweep(spec, out, workers=args.workers)
    for value, acc in sorted(mean_by_value(rows).items()):
        print(f"{spec.axis}={value}: mean test accuracy {acc:.4f}")
    print(f"-> {out / 'sweep.csv'}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_NUMERIC


def demo_settings(raw: dict) -> tuple[dict, DemoSettings]:
    known = {"which", "n", "k", "identical"}
    fields = set(DemoSettings.__dataclass_fields__)
    unknown = sorted(set(raw) - known - fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in demo config: {', '.join(unknown)}")
    try:
        settings = DemoSettings(**{k: v for k, v in raw.items() if k in fields})
    except TypeError as e:
        raise ConfigError(f"demo config: {e}") from None
    return {k: raw[k] for k in known if k in raw}, settings


def cmd_theorem_demo(args) -> int:
    extra, settings = demo_settings(_read_json(args.config))
    if args.seed is not None:
        settings.seed = args.seed
    which = extra.get("which", 1)
    if which == 1:
        report = theorem1_demo(settings, identical=bool(extra.get("identical", False)))
    elif which == 2:
        report = theorem2_demo(settings, int(extra.get("n", 2)), int(extra.get("k", 2)))
    else:
        raise ConfigError(f"theorem demo 'which' must be 1 or 2, got {which!r}")
    out = Path(args.out or "runs/theorem")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{report.demo}_report.json"
    path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    s = report.summary()
    print(f"{report.demo}: pass rate {s['pass_rate']:.3f} ({s['passed']}/{s['valid']} valid, {s['invalid']} invalid) -> {path}")
    return EXIT_OK if s["valid"] > 0 and s["pass_rate"] >= DEMO_PASS_RATE else EXIT_ACCEPT


def fusion_grad_check(cfg: config_mod.RunConfig, batch: int = 4) -> float:
    """Max relative error of the full fusion loss gradient.

    Dropout and routing noise are switched off and gamma is zero so that every
    term is a smooth function of the parameters; the mapper runs on batch
    statistics as in training.
    """
    cfg = cfg.replace(mope={"dropout": 0.0, "noise": False, "gamma": 0.0})
    from .fusion import build_model
    from .router import importance_loss

    model = build_model(cfg)
    ds = dataset_for(cfg)
    x, y, label = ds.train.x[:batch], ds.train.y[:batch], ds.train.label[:batch]
    params = model.parameters()
    state = (model.mapper.running_mean.copy(), model.mapper.running_var.copy())

    def loss():
        model.mapper.running_mean, model.mapper.running_var = state[0].copy(), state[1].copy()
        logits, rec = model.forward(x, y, train=True)
        out = T.cross_entropy(logits, label)
        if rec.layers:
            out = out + importance_loss(rec, 0.0) * cfg.train.imp_loss_weight
        return out

    return T.grad_check(loss, params)


def cmd_grad_check(args) -> int:
    cfg = _run_config(args)
    err = fusion_grad_check(cfg)
    print(f"max relative gradient error {err:.3e} (threshold {GRAD_TOL:g})")
    return EXIT_OK if err <= GRAD_TOL else EXIT_ACCEPT


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "routing-report": cmd_routing_report,
    "theorem-demo": cmd_theorem_demo,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mopelab", description="Mixture-of-prompt-experts fusion lab")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", default=None, help="output directory (defaults to the config's output_dir)")
    p.add_argument("--workers", type=int, default=1, help="parallel runs for sweep")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DimensionError, DataError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except MopeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
