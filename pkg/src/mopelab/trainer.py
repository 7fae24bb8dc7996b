"""AdamW training loop, evaluation metrics and metrics.csv output."""

from __future__ import annotations

import csv
import logging
from dataclasses import astuple, dataclass, fields

import numpy as np
from sklearn.metrics import f1_score

from . import tensor as T
from .config import TrainConfig
from .data import Split
from .errors import NumericError, ParameterError
from .fusion import FusionModel
from .optim import OptimState, adamw_step, advance
from .router import importance, importance_loss

log = logging.getLogger(__name__)


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    task_loss: float
    imp_loss: float
    accuracy: float
    f1_macro: float


METRIC_COLUMNS = [f.name for f in fields(MetricsRow)]


def classification_metrics(pred: np.ndarray, label: np.ndarray, num_classes: int) -> tuple[float, float]:
    acc = float(np.mean(pred == label))
    f1 = float(f1_score(label, pred, labels=list(range(num_classes)), average="macro", zero_division=0))
    return acc, f1


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def evaluate(model: FusionModel, split: Split, batch_size: int = 256, epoch: int = -1, name: str = "eval"):
    """Eval-mode metrics over ``split`` plus per-instance routing scores.

    Returns ``(MetricsRow, scores)`` where scores has shape (layers, n, k) or
    is ``None`` when the dynamic prompt is not routed.
    """
    n = len(split)
    if n == 0:
        raise ParameterError("cannot evaluate an empty split")
    logits, chunks = [], []
    for sl in _batches(n, batch_size):
        out, rec = model.forward(split.x[sl], split.y[sl], train=False)
        logits.append(out.data)
        if rec.layers:
            chunks.append(rec.numpy())
    z = np.concatenate(logits)
    task = float(T.cross_entropy(z, split.label).item())
    scores = np.concatenate(chunks, axis=1) if chunks else None
    imp = 0.0
    if scores is not None:
        imp = float(np.mean([_cv2(scores[i].sum(axis=0)) for i in range(scores.shape[0])]))
    w = model.cfg.train.imp_loss_weight
    acc, f1 = classification_metrics(z.argmax(axis=1), split.label, model.cfg.data.num_classes)
    return MetricsRow(epoch, name, task + w * imp, task, imp, acc, f1), scores


def _cv2(imp: np.ndarray) -> float:
    m = imp.mean()
    return float(((imp - m) ** 2).mean() / (m * m))


@dataclass
class TrainResult:
    history: list[MetricsRow]
    importance: list[list[list[float]]]  # per epoch, per layer, per expert (train-mode sums)
    diverged: bool = False
    last_good_epoch: int = 0


def train(
    model: FusionModel,
    train_split: Split,
    val_split: Split | None,
    cfg: TrainConfig | None = None,
    on_epoch=None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of minibatch AdamW.

    Loss per step is cross-entropy + imp_loss_weight * importance loss; the
    importance term is left out of the graph when its weight is zero.
    ``on_epoch(epoch, model)`` runs after every completed epoch.
    """
    cfg = cfg or model.cfg.train
    if len(train_split) == 0:
        raise ParameterError("training split is empty")
    rng = T.make_rng(cfg.seed)
    groups = model.param_groups()
    lrs = {"main": cfg.lr_main, "comp": cfg.lr_comp}
    state = OptimState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    gamma = model.cfg.mope.gamma
    routed = model.cfg.prompts.dynamic and not model.cfg.mope.single_dynamic
    history: list[MetricsRow] = []
    imp_trace: list = []
    snapshot = model.named_state()
    n = len(train_split)
    last_good = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(2)
        preds, labels = [], []
        epoch_imp = None
        try:
            for sl in _batches(n, cfg.batch_size):
                idx = order[sl]
                with T.Tape() as tape:
                    logits, record = model.forward(train_split.x[idx], train_split.y[idx], train=True, rng=rng)
                    task = T.cross_entropy(logits, train_split.label[idx])
                    imp = importance_loss(record, gamma) if routed else None
                    loss = task
                    if imp is not None and cfg.imp_loss_weight > 0:
                        loss = task + imp * cfg.imp_loss_weight
                grads = T.backward(loss, tape)
                advance(state)
                for gname, params in groups.items():
                    adamw_step(params, [grads[p] for p in params], state, lrs[gname], cfg.weight_decay)
                b = len(idx)
                imp_v = imp.item() if imp is not None else 0.0
                sums += b * np.array([task.item(), imp_v])
                pred = logits.data.argmax(axis=1)
                preds.append(pred)
                labels.append(train_split.label[idx])
                if routed:
                    cur = np.stack([importance(record, i).data for i in record.layers])
                    epoch_imp = cur if epoch_imp is None else epoch_imp + cur
        except NumericError as e:
            log.warning("training diverged in epoch %d (%s); restoring epoch %d", epoch, e, last_good)
            model.load_state(snapshot)
            return TrainResult(history, imp_trace, diverged=True, last_good_epoch=last_good)
        task_avg, imp_avg = sums[0] / n, sums[1] / n
        acc, f1 = classification_metrics(np.concatenate(preds), np.concatenate(labels), model.cfg.data.num_classes)
        history.append(MetricsRow(epoch, "train", task_avg + cfg.imp_loss_weight * imp_avg, task_avg, imp_avg, acc, f1))
        imp_trace.append(epoch_imp.tolist() if epoch_imp is not None else [])
        if val_split is not None:
            row, _ = evaluate(model, val_split, epoch=epoch, name="val")
            history.append(row)
        snapshot = model.named_state()
        last_good = epoch
        if on_epoch is not None:
            on_epoch(epoch, model)
        log.info("epoch %d: %s", epoch, history[-1])
    return TrainResult(history, imp_trace, last_good_epoch=last_good)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in astuple(r)])
