"""Small pre-LN transformer encoders with per-layer prompt injection.

Layer input is the sequence ``[cls, prompts, tokens]``. Prompts act only as
extra keys/values: their outputs are discarded after every layer and fresh
prompts are supplied to the next one, so queries are computed for the class
token and the input tokens only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, DimensionError
from .tensor import Tensor


@dataclass
class EncoderConfig:
    num_layers: int = 2
    d_model: int = 32
    num_heads: int = 4
    d_ff: int = 64
    seq_len: int = 16
    vocab: int = 16
    # vector encoders: raw input of ``input_dim`` reals split into ``seq_len`` chunks
    input_dim: int = 0
    # std of the positional table and class token at init
    pos_init_std: float = 1.0
    # generic positional-lookup pretraining before freezing (token encoders only)
    pretrain_steps: int = 0
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 64
    pretrain_cue_len: int = 2

    def __post_init__(self):
        for name in ("num_layers", "d_model", "num_heads", "d_ff", "seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"encoder {name} must be positive")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.vocab <= 0 and self.input_dim <= 0:
            raise ConfigError("encoder needs either a vocab (token input) or an input_dim (vector input)")
        if self.vocab <= 0 and self.input_dim % self.seq_len:
            raise ConfigError(f"input_dim={self.input_dim} not divisible into seq_len={self.seq_len} chunks")
        if self.pos_init_std < 0:
            raise ConfigError("pos_init_std must be >= 0")
        if self.pretrain_steps < 0:
            raise ConfigError("pretrain_steps must be >= 0")
        if self.pretrain_steps > 0:
            if self.vocab <= 0:
                raise ConfigError("lookup pretraining needs a token encoder (vocab > 0)")
            if not (self.pretrain_lr > 0 and self.pretrain_batch > 0 and self.pretrain_cue_len > 0):
                raise ConfigError("pretrain_lr, pretrain_batch and pretrain_cue_len must be positive")

    @property
    def is_token_encoder(self) -> bool:
        return self.vocab > 0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class LayerWeights:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self):
        return self.__dict__.items()


@dataclass
class EncoderWeights:
    layers: list[LayerWeights]
    embed: Tensor  # (vocab, d) table or (chunk, d) projection
    pos: Tensor
    cls: Tensor
    lnf_g: Tensor
    lnf_b: Tensor
    frozen: bool = True

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"embed": self.embed, "pos": self.pos, "cls": self.cls, "lnf_g": self.lnf_g, "lnf_b": self.lnf_b}
        for i, lw in enumerate(self.layers):
            for k, v in lw.named():
                out[f"layers.{i}.{k}"] = v
        return out

    def parameters(self) -> list[Tensor]:
        return [] if self.frozen else list(self.named_tensors().values())


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, frozen: bool = True) -> EncoderWeights:
    """Seeded random weights (see :mod:`mopelab.backbone` for the pretraining step)."""
    d, f = cfg.d_model, cfg.d_ff
    track = not frozen

    def w(shape, fan_in):
        return Tensor(rng.standard_normal(shape) / np.sqrt(fan_in), requires_grad=track)

    def const(shape, v):
        return Tensor(np.full(shape, v), requires_grad=track)

    layers = []
    for _ in range(cfg.num_layers):
        layers.append(
            LayerWeights(
                ln1_g=const(d, 1.0), ln1_b=const(d, 0.0),
                wq=w((d, d), d), wk=w((d, d), d), wv=w((d, d), d), wo=w((d, d), d), bo=const(d, 0.0),
                ln2_g=const(d, 1.0), ln2_b=const(d, 0.0),
                w1=w((d, f), d), b1=const(f, 0.0), w2=w((f, d), f), b2=const(d, 0.0),
            )
        )
    if cfg.is_token_encoder:
        embed = Tensor(rng.standard_normal((cfg.vocab, d)), requires_grad=track)
    else:
        chunk = cfg.input_dim // cfg.seq_len
        embed = w((chunk, d), chunk)
    pos = Tensor(cfg.pos_init_std * rng.standard_normal((cfg.seq_len, d)), requires_grad=track)
    cls = Tensor(cfg.pos_init_std * rng.standard_normal(d), requires_grad=track)
    return EncoderWeights(layers, embed, pos, cls, const(d, 1.0), const(d, 0.0), frozen=frozen)


# ---------------------------------------------------------------------------


def embed(tokens, cfg: EncoderConfig, weights: EncoderWeights) -> tuple[Tensor, Tensor]:
    """Token ids (s,) or (B, s) -> class token (B, d) and token states (B, s, d)."""
    ids = np.asarray(tokens)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.shape[-1] != cfg.seq_len:
        raise DimensionError(f"expected {cfg.seq_len} tokens, got {ids.shape[-1]}")
    if ids.min() < 0 or ids.max() >= cfg.vocab:
        raise DataError(f"token id outside vocab [0, {cfg.vocab})")
    toks = T.take_rows(weights.embed, ids) + weights.pos
    cls = T.broadcast_to(weights.cls, (ids.shape[0], cfg.d_model))
    return cls, toks


def embed_vector(y, cfg: EncoderConfig, weights: EncoderWeights) -> tuple[Tensor, Tensor]:
    """Raw vectors (B, input_dim) -> class token and linearly tokenized chunks."""
    y = T.as_tensor(y)
    if y.ndim == 1:
        y = T.reshape(y, (1, -1))
    if y.shape[-1] != cfg.input_dim:
        raise DimensionError(f"expected input dim {cfg.input_dim}, got {y.shape[-1]}")
    b = y.shape[0]
    chunks = T.reshape(y, (b, cfg.seq_len, cfg.input_dim // cfg.seq_len))
    toks = chunks @ weights.embed + weights.pos
    cls = T.broadcast_to(weights.cls, (b, cfg.d_model))
    return cls, toks


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def attention_probs(q_in: Tensor, kv_in: Tensor, wq: Tensor, wk: Tensor, num_heads: int) -> Tensor:
    """softmax(Q K^T / sqrt(d_head)) per head: (B, H, n_q, n_kv)."""
    q = _split_heads(q_in @ wq, num_heads)
    k = _split_heads(kv_in @ wk, num_heads)
    scale = 1.0 / np.sqrt(q_in.shape[-1] // num_heads)
    return T.softmax_rows(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale)


def layer_forward(
    cls: Tensor,
    prompts: Tensor | None,
    tokens: Tensor,
    lw: LayerWeights,
    cfg: EncoderConfig,
    return_probs: bool = False,
):
    """One prompted block; returns ``(cls', tokens')`` (and attention probs)."""
    b, s, d = tokens.shape
    if cls.shape != (b, d):
        raise DimensionError(f"class token shape {cls.shape} does not match tokens {tokens.shape}")
    parts = [T.reshape(cls, (b, 1, d))]
    p = 0
    if prompts is not None and prompts.shape[-2] > 0:
        if prompts.shape[-1] != d:
            raise DimensionError(f"prompt dim {prompts.shape[-1]} != model dim {d}")
        if prompts.ndim == 2:
            prompts = T.broadcast_to(prompts, (b,) + prompts.shape)
        p = prompts.shape[1]
        parts.append(prompts)
    parts.append(tokens)
    seq = T.concat(parts, axis=1)
    hn = T.layer_norm(seq, lw.ln1_g, lw.ln1_b)
    rows = seq if p == 0 else T.concat([seq[:, :1], seq[:, 1 + p :]], axis=1)
    q_in = hn if p == 0 else T.concat([hn[:, :1], hn[:, 1 + p :]], axis=1)

    h = cfg.num_heads
    probs = attention_probs(q_in, hn, lw.wq, lw.wk, h)
    v = _split_heads(hn @ lw.wv, h)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, 1 + s, d))
    x = rows + (ctx @ lw.wo + lw.bo)
    ff = T.gelu(T.layer_norm(x, lw.ln2_g, lw.ln2_b) @ lw.w1 + lw.b1) @ lw.w2 + lw.b2
    x = x + ff
    out = (x[:, 0], x[:, 1:])
    return out + (probs,) if return_probs else out


PromptProvider = Union[Sequence, Callable[[int, Tensor], "Tensor | None"]]


def run_layers(cls, tokens, provider: PromptProvider | None, cfg: EncoderConfig, weights: EncoderWeights):
    if provider is not None and not callable(provider):
        if len(provider) != cfg.num_layers:
            raise ContractError(f"prompt provider yields {len(provider)} assemblies for {cfg.num_layers} layers")
        seq = provider
        provider = lambda i, _cls: seq[i]  # noqa: E731
    for i, lw in enumerate(weights.layers):
        prompts = provider(i, cls) if provider is not None else None
        cls, tokens = layer_forward(cls, prompts, tokens, lw, cfg)
    return cls, tokens


def encode_main(tokens, provider: PromptProvider | None, cfg: EncoderConfig, weights: EncoderWeights) -> Tensor:
    """Final (normed) class token of the prompted main encoder, shape (B, d)."""
    cls, toks = embed(tokens, cfg, weights)
    cls, _ = run_layers(cls, toks, provider, cfg, weights)
    return T.layer_norm(cls, weights.lnf_g, weights.lnf_b)


def encode_complementary(y, cfg: EncoderConfig, weights: EncoderWeights, prompts: Tensor | None = None) -> Tensor:
    """psi_y: final class token of the complementary encoder, shape (B, d).

    The same ``prompts`` (l' x d) are injected at every layer.
    """
    cls, toks = embed_vector(y, cfg, weights)
    provider = None if prompts is None else (lambda i, _c: prompts)
    cls, _ = run_layers(cls, toks, provider, cfg, weights)
    return T.layer_norm(cls, weights.lnf_g, weights.lnf_b)
