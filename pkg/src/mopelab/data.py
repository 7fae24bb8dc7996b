"""Synthetic paired two-modality classification data.

Each instance belongs to a latent cluster ``c``. The complementary vector is
``y = mu_c + noise`` with orthonormal cluster means, the main modality is a
uniform token sequence ``x``, and the label is the sum of the tokens at the
cluster's fixed mask positions modulo the number of classes. Masks of
different clusters are disjoint, so which positions matter depends on ``y``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import SyntheticConfig
from .errors import ConfigError, DataError, ParameterError
from .tensor import make_rng, orthogonal_init


@dataclass(frozen=True)
class SyntheticInstance:
    x: tuple[int, ...]
    y: tuple[float, ...]
    label: int
    cluster: int


@dataclass
class Split:
    x: np.ndarray  # (n, s) int64
    y: np.ndarray  # (n, d_y) float64
    label: np.ndarray  # (n,) int64
    cluster: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.label)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split(self.x[idx], self.y[idx], self.label[idx], self.cluster[idx])

    def instance(self, i: int) -> SyntheticInstance:
        return SyntheticInstance(
            tuple(int(t) for t in self.x[i]), tuple(float(v) for v in self.y[i]), int(self.label[i]), int(self.cluster[i])
        )

    def __iter__(self):
        return (self.instance(i) for i in range(len(self)))

    def label_counts(self, num_classes: int) -> list[int]:
        return np.bincount(self.label, minlength=num_classes).tolist()


@dataclass
class Dataset:
    cfg: SyntheticConfig
    means: np.ndarray  # (C, d_y) orthonormal rows
    masks: np.ndarray  # (C, mask_size) positions
    train: Split
    val: Split
    test: Split

    def splits(self) -> dict[str, Split]:
        return {"train": self.train, "val": self.val, "test": self.test}


def label_rule(x: np.ndarray, cluster: np.ndarray, masks: np.ndarray, num_classes: int) -> np.ndarray:
    rows = np.arange(len(cluster))[:, None]
    return x[rows, masks[cluster]].sum(axis=1) % num_classes


def generate(cfg: SyntheticConfig) -> Dataset:
    rng = make_rng(cfg.seed)
    means = orthogonal_init(cfg.num_clusters, cfg.d_y, rng).data
    perm = rng.permutation(cfg.seq_len)
    masks = np.sort(perm[: cfg.num_clusters * cfg.mask_size].reshape(cfg.num_clusters, cfg.mask_size), axis=1)

    def draw(n: int) -> Split:
        cluster = rng.integers(0, cfg.num_clusters, n)
        x = rng.integers(0, cfg.vocab, (n, cfg.seq_len))
        y = means[cluster] + cfg.noise_std * rng.standard_normal((n, cfg.d_y))
        return Split(x, y, label_rule(x, cluster, masks, cfg.num_classes), cluster)

    return Dataset(cfg, means, masks, draw(cfg.train_size), draw(cfg.val_size), draw(cfg.test_size))


def subsample_shots(split: Split, n: int, seed: int) -> Split:
    """Uniform sample of ``n`` instances without replacement (original order kept)."""
    if not 1 <= n <= len(split):
        raise ParameterError(f"cannot draw {n} shots from a split of {len(split)}")
    idx = np.sort(make_rng(seed).permutation(len(split))[:n])
    return split.subset(idx)


# files -------------------------------------------------------------------------


def write_jsonl(split: Split, path) -> None:
    with open(path, "w") as f:
        for i in range(len(split)):
            rec = {
                "x": split.x[i].tolist(),
                "y": split.y[i].tolist(),
                "label": int(split.label[i]),
                "cluster": int(split.cluster[i]),
            }
            f.write(json.dumps(rec) + "\n")


def read_jsonl(path) -> Split:
    xs, ys, labels, clusters = [], [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                xs.append(rec["x"])
                ys.append(rec["y"])
                labels.append(rec["label"])
                clusters.append(rec["cluster"])
            except (json.JSONDecodeError, KeyError) as e:
                raise DataError(f"{path}:{lineno}: bad record ({e})") from None
    if not labels:
        raise DataError(f"{path}: empty dataset file")
    return Split(
        np.asarray(xs, dtype=np.int64), np.asarray(ys, dtype=np.float64),
        np.asarray(labels, dtype=np.int64), np.asarray(clusters, dtype=np.int64),
    )


def save_dataset(ds: Dataset, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, split in ds.splits().items():
        p = out / f"{name}.jsonl"
        write_jsonl(split, p)
        paths.append(p)
    side = out / "data_config.json"
    side.write_text(json.dumps({"config": asdict(ds.cfg), "masks": ds.masks.tolist()}, indent=2, sort_keys=True) + "\n")
    paths.append(side)
    return paths


def load_dataset(out_dir) -> Dataset:
    out = Path(out_dir)
    try:
        side = json.loads((out / "data_config.json").read_text())
    except FileNotFoundError:
        raise ConfigError(f"no data_config.json in {out}") from None
    cfg = SyntheticConfig(**side["config"])
    ref = generate(cfg)
    return Dataset(cfg, ref.means, np.asarray(side["masks"]), *(read_jsonl(out / f"{n}.jsonl") for n in ("train", "val", "test")))
