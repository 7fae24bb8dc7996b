"""Generic pretraining for the frozen main encoder.

A randomly initialised transformer is a poor stand-in for a pretrained
backbone: prompts barely move its attention. Before freezing, the encoder is
therefore trained on a task-agnostic positional lookup: uniform random token
sequences, a learned cue prompt per position ``j`` injected at every layer, and
a throwaway head that must output the token at ``j``. This gives the backbone
a promptable "read position j" skill. The cue prompts and the head are then
discarded; nothing about clusters, labels or the complementary modality is
seen.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, EncoderWeights, encode_main
from .errors import ConfigError
from .optim import OptimState, adamw_step, advance
from .tensor import Tensor

log = logging.getLogger(__name__)

_CACHE: dict[str, tuple[dict[str, np.ndarray], "PretrainReport"]] = {}


@dataclass
class PretrainReport:
    steps: int
    final_accuracy: float  # lookup accuracy over the last 50 steps


def _stream(seed: int) -> np.random.Generator:
    # independent of the stream that drew the initial weights
    return np.random.Generator(np.random.PCG64([int(seed), 0x5EED]))


def pretrain_lookup(weights: EncoderWeights, cfg: EncoderConfig, seed: int) -> PretrainReport:
    """Train ``weights`` in place on positional lookup; result memoised per (cfg, seed)."""
    if cfg.pretrain_steps <= 0:
        return PretrainReport(0, float("nan"))
    if not cfg.is_token_encoder:
        raise ConfigError("lookup pretraining needs a token encoder")
    digest = hashlib.sha1()
    for name, t in sorted(weights.named_tensors().items()):
        digest.update(name.encode() + t.data.tobytes())
    key = json.dumps([asdict(cfg), seed, digest.hexdigest()], sort_keys=True)
    if key in _CACHE:
        state, report = _CACHE[key]
        for name, t in weights.named_tensors().items():
            t.data = state[name].copy()
        return report

    rng = _stream(seed)
    s, d, b, cl = cfg.seq_len, cfg.d_model, cfg.pretrain_batch, cfg.pretrain_cue_len
    tensors = weights.named_tensors()
    for t in tensors.values():
        t.requires_grad = True
    cues = Tensor(rng.uniform(-0.3, 0.3, (cfg.num_layers, s, cl * d)), requires_grad=True)
    head = Tensor(rng.standard_normal((d, cfg.vocab)) / np.sqrt(d), requires_grad=True)
    params = list(tensors.values()) + [cues, head]
    state = OptimState()
    hits = []
    try:
        for _ in range(cfg.pretrain_steps):
            x = rng.integers(0, cfg.vocab, (b, s))
            j = rng.integers(0, s, b)
            target = x[np.arange(b), j]
            with T.Tape() as tape:
                def provider(i, _cls):
                    return T.reshape(T.take_rows(cues[i], j), (b, cl, d))

                logits = encode_main(x, provider, cfg, weights) @ head
                loss = T.cross_entropy(logits, target)
            grads = T.backward(loss, tape)
            advance(state)
            adamw_step(params, [grads[p] for p in params], state, cfg.pretrain_lr, 0.0)
            hits.append(float(np.mean(logits.data.argmax(axis=1) == target)))
    finally:
        for t in tensors.values():
            t.requires_grad = False
    report = PretrainReport(cfg.pretrain_steps, float(np.mean(hits[-50:])))
    log.info("backbone lookup pretraining: %d steps, accuracy %.3f", report.steps, report.final_accuracy)
    _CACHE[key] = ({k: v.data.copy() for k, v in tensors.items()}, report)
    return report
