"""Mixture-of-prompt-experts routing: query, scores, mixing, importance loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .tensor import Tensor


@dataclass
class PromptExpert:
    """One expert prompt (l x d_x) with its frozen routing key (d_r)."""

    prompt: Tensor
    key: Tensor


@dataclass
class RouterWeights:
    wx: Tensor  # (d_x, d_i) inter-modal projection of the previous class token
    wy: Tensor  # (d_y, d_c) cross-modal projection of psi_y

    @property
    def d_r(self) -> int:
        return self.wx.shape[1] + self.wy.shape[1]


def _as_batch(t) -> Tensor:
    t = T.as_tensor(t)
    return T.reshape(t, (1, -1)) if t.ndim == 1 else t


def routing_query(x_cls_prev, psi_y, router: RouterWeights) -> Tensor:
    """q = [psi_y W_y || x_cls_prev W_x], shape (B, d_c + d_i)."""
    x, y = _as_batch(x_cls_prev), _as_batch(psi_y)
    if x.shape[-1] != router.wx.shape[0] or y.shape[-1] != router.wy.shape[0]:
        raise DimensionError(
            f"router expects d_x={router.wx.shape[0]}, d_y={router.wy.shape[0]}; "
            f"got {x.shape[-1]}, {y.shape[-1]}"
        )
    return T.concat([y @ router.wy, x @ router.wx], axis=-1)


def noise_std(num_experts: int) -> float:
    return 1.0 / num_experts


def route(q, keys, tau: float, rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
    """Routing scores softmax(q.k_j / tau + eps_j), shape (B, k).

    Gaussian noise with std 1/k is added to the scaled logits in training
    mode only (and never for a single expert, where it cannot change the
    output). Eval mode is a pure function of ``(q, keys, tau)``.
    """
    keys = T.as_tensor(keys)
    q = _as_batch(q)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ConfigError("routing needs at least one expert key")
    k = keys.shape[0]
    logits = T.matmul(q, T.transpose(keys, (1, 0))) / tau
    if train and rng is not None and k > 1:
        logits = logits + rng.normal(0.0, noise_std(k), size=logits.shape)
    return T.softmax_rows(logits)


def mix(r, experts) -> Tensor:
    """Convex combination sum_j r_j E_j per instance: (B, k) x (k, l, d) -> (B, l, d)."""
    r = _as_batch(r)
    if isinstance(experts, (list, tuple)):
        mats = [e.prompt if isinstance(e, PromptExpert) else T.as_tensor(e) for e in experts]
        experts = T.concat([T.reshape(m, (1,) + m.shape) for m in mats], axis=0)
    if r.shape[-1] != experts.shape[0]:
        raise ContractError(f"{r.shape[-1]} routing scores for {experts.shape[0]} experts")
    b, k = r.shape
    return T.tsum(T.reshape(r, (b, k, 1, 1)) * experts, axis=1)


class RoutingRecord:
    """Routing scores of one step, keyed by prompted layer.

    Single-writer: owned by the forward pass that fills it.
    """

    def __init__(self):
        self._layers: dict[int, list[Tensor]] = {}

    def add(self, layer: int, scores: Tensor) -> None:
        self._layers.setdefault(layer, []).append(scores)

    @property
    def layers(self) -> list[int]:
        return sorted(self._layers)

    def scores(self, layer: int) -> Tensor:
        chunks = self._layers.get(layer)
        if not chunks:
            raise ContractError(f"no routing scores recorded for layer {layer}")
        return chunks[0] if len(chunks) == 1 else T.concat(chunks, axis=0)

    def numpy(self) -> np.ndarray:
        """Scores as an array of shape (layers, B, k)."""
        return np.stack([self.scores(i).data for i in self.layers])

    def __len__(self) -> int:
        return sum(s.shape[0] for c in self._layers.values() for s in c)


def importance(record: RoutingRecord, layer: int) -> Tensor:
    """Imp_j: routing score of expert j summed over the batch."""
    return T.tsum(record.scores(layer), axis=0)


def cv_squared(imp: Tensor) -> Tensor:
    """(std/mean)^2 with population std."""
    m = T.mean(imp)
    if m.item() <= 0:
        raise NumericError("mean expert importance is zero")
    centered = imp - m
    return T.mean(centered * centered) / (m * m)


def importance_loss(record: RoutingRecord, gamma: float) -> Tensor:
    """Mean over layers of the squared CV of expert importance.

    Layers whose CV^2 is below ``gamma`` keep their value but pass no gradient.
    """
    layers = record.layers
    if not layers:
        raise ContractError("importance loss needs at least one routed layer")
    terms = []
    for i in layers:
        v = cv_squared(importance(record, i))
        terms.append(T.stop_gradient(v) if v.item() < gamma else v)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))
