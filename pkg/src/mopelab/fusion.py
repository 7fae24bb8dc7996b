"""Instance-wise prompt decomposition and the full sequential fusion model.

Each prompted layer of the main encoder receives ``[P_s, P_d, P_m]``:
a shared static prompt, a dynamic prompt mixed from experts by the router,
and a single mapped prompt projected from the complementary feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import pretrain_lookup
from .config import RunConfig
from .encoder import EncoderWeights, encode_complementary, encode_main, init_encoder
from .errors import ConfigError
from .router import RouterWeights, RoutingRecord, mix, route, routing_query
from .tensor import Tensor


@dataclass
class MapperWeights:
    """down -> batch norm -> GELU -> one up-projection per target dim."""

    down: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    up: dict[int, Tensor]
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @property
    def d_bot(self) -> int:
        return self.down.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.down, self.bn_gamma, self.bn_beta] + [self.up[k] for k in sorted(self.up)]


def bottleneck_dim(d_y: int) -> int:
    return math.ceil(d_y / 2)


def init_mapper(d_y: int, target_dims, rng: np.random.Generator) -> MapperWeights:
    d_bot = bottleneck_dim(d_y)
    down = Tensor(rng.standard_normal((d_y, d_bot)) / np.sqrt(d_y), requires_grad=True, name="mapper.down")
    up = {
        int(t): Tensor(rng.standard_normal((d_bot, t)) / np.sqrt(d_bot), requires_grad=True, name=f"mapper.up.{t}")
        for t in sorted(set(target_dims))
    }
    return MapperWeights(
        down=down,
        bn_gamma=Tensor(np.ones(d_bot), requires_grad=True, name="mapper.bn_gamma"),
        bn_beta=Tensor(np.zeros(d_bot), requires_grad=True, name="mapper.bn_beta"),
        up=up,
        running_mean=np.zeros(d_bot),
        running_var=np.ones(d_bot),
    )


def map_feature(psi_y, mapper: MapperWeights, target_dim: int, train: bool = False) -> Tensor:
    """P_m = up(gelu(norm(psi_y @ down))), shape (B, 1, target_dim).

    Batch statistics are used in training mode when the batch has more than
    one row (running statistics are then updated); otherwise running
    statistics.
    """
    if target_dim not in mapper.up:
        raise ConfigError(f"mapper has no up-projection for dim {target_dim}")
    psi_y = T.as_tensor(psi_y)
    if psi_y.ndim == 1:
        psi_y = T.reshape(psi_y, (1, -1))
    h = psi_y @ mapper.down
    b = h.shape[0]
    if train and b > 1:
        mu = T.mean(h, axis=0, keepdims=True)
        c = h - mu
        var = T.mean(c * c, axis=0, keepdims=True)
        hn = c * T.power(var + mapper.eps, -0.5)
        m = mapper.momentum
        mapper.running_mean = (1 - m) * mapper.running_mean + m * mu.data[0]
        mapper.running_var = (1 - m) * mapper.running_var + m * var.data[0] * (b / (b - 1))
    else:
        hn = (h - mapper.running_mean) * (1.0 / np.sqrt(mapper.running_var + mapper.eps))
    z = T.gelu(hn * mapper.bn_gamma + mapper.bn_beta)
    return T.reshape(z @ mapper.up[target_dim], (b, 1, target_dim))


@dataclass
class PromptAssembly:
    """The decomposed prompts for one layer; disabled parts are ``None``."""

    static: Tensor | None
    dynamic: Tensor | None
    mapped: Tensor | None
    scores: Tensor | None = None

    def parts(self) -> list[Tensor]:
        return [p for p in (self.static, self.dynamic, self.mapped) if p is not None]

    @property
    def num_rows(self) -> int:
        return sum(p.shape[-2] for p in self.parts())

    def stacked(self, batch: int) -> Tensor | None:
        parts = self.parts()
        if not parts:
            return None
        d = parts[0].shape[-1]
        full = [p if p.ndim == 3 else T.broadcast_to(p, (batch,) + p.shape) for p in parts]
        out = T.concat(full, axis=1)
        assert out.shape[:2] == (batch, self.num_rows) and out.shape[2] == d
        return out


def prompt_init_eta(d_x: int, prompt_len: int) -> float:
    return math.sqrt(6.0 / (d_x + prompt_len))


@dataclass
class LayerPrompts:
    static: Tensor | None
    experts: Tensor | None  # (k, l, d_x)
    keys: Tensor | None  # (k, d_r)
    router: RouterWeights | None
    single: Tensor | None  # (l, d_x) when MoPE is replaced by one dynamic prompt


@dataclass
class FusionModel:
    cfg: RunConfig
    main: EncoderWeights
    comp: EncoderWeights
    comp_prompts: Tensor | None
    layers: list[LayerPrompts]
    mapper: MapperWeights
    head_w: Tensor
    head_b: Tensor
    history: list = field(default_factory=list)

    # parameter bookkeeping --------------------------------------------------
    def param_groups(self) -> dict[str, list[Tensor]]:
        flags = self.cfg.prompts
        main: list[Tensor] = []
        for lp in self.layers:
            if flags.static:
                main.append(lp.static)
            if flags.dynamic:
                if self.cfg.mope.single_dynamic:
                    main.append(lp.single)
                else:
                    main += [lp.experts, lp.router.wy, lp.router.wx]
                    if self.cfg.mope.learned_keys:
                        main.append(lp.keys)
        if flags.mapped:
            main += self.mapper.parameters()
        main += [self.head_w, self.head_b]
        comp = [self.comp_prompts] if self.comp_prompts is not None else []
        return {"main": main, "comp": comp}

    def parameters(self) -> list[Tensor]:
        g = self.param_groups()
        return g["main"] + g["comp"]

    def num_trainable(self) -> int:
        return sum(p.size for p in self.parameters())

    def named_state(self) -> dict[str, np.ndarray]:
        """Every tensor and buffer by name (checkpoint payload)."""
        out = {f"main.{k}": v.data for k, v in self.main.named_tensors().items()}
        out.update({f"comp.{k}": v.data for k, v in self.comp.named_tensors().items()})
        if self.comp_prompts is not None:
            out["comp_prompts"] = self.comp_prompts.data
        for i, lp in enumerate(self.layers):
            for name in ("static", "experts", "keys", "single"):
                t = getattr(lp, name)
                if t is not None:
                    out[f"layers.{i}.{name}"] = t.data
            out[f"layers.{i}.router.wx"] = lp.router.wx.data
            out[f"layers.{i}.router.wy"] = lp.router.wy.data
        m = self.mapper
        out["mapper.down"] = m.down.data
        out["mapper.bn_gamma"] = m.bn_gamma.data
        out["mapper.bn_beta"] = m.bn_beta.data
        for dim, u in m.up.items():
            out[f"mapper.up.{dim}"] = u.data
        out["mapper.running_mean"] = m.running_mean
        out["mapper.running_var"] = m.running_var
        out["head.w"] = self.head_w.data
        out["head.b"] = self.head_b.data
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        mine = self.named_state()
        missing = sorted(set(mine) - set(state))
        if missing:
            raise ConfigError(f"checkpoint lacks tensors: {missing[:5]}")
        for k, arr in mine.items():
            if arr.shape != state[k].shape:
                raise ConfigError(f"checkpoint tensor {k} has shape {state[k].shape}, expected {arr.shape}")
        tensors = self._tensor_index()
        for k, t in tensors.items():
            t.data = np.array(state[k], dtype=np.float64)
        self.mapper.running_mean = np.array(state["mapper.running_mean"])
        self.mapper.running_var = np.array(state["mapper.running_var"])

    def _tensor_index(self) -> dict[str, Tensor]:
        out = {f"main.{k}": v for k, v in self.main.named_tensors().items()}
        out.update({f"comp.{k}": v for k, v in self.comp.named_tensors().items()})
        if self.comp_prompts is not None:
            out["comp_prompts"] = self.comp_prompts
        for i, lp in enumerate(self.layers):
            for name in ("static", "experts", "keys", "single"):
                t = getattr(lp, name)
                if t is not None:
                    out[f"layers.{i}.{name}"] = t
            out[f"layers.{i}.router.wx"] = lp.router.wx
            out[f"layers.{i}.router.wy"] = lp.router.wy
        m = self.mapper
        out.update({"mapper.down": m.down, "mapper.bn_gamma": m.bn_gamma, "mapper.bn_beta": m.bn_beta})
        out.update({f"mapper.up.{d}": u for d, u in m.up.items()})
        out.update({"head.w": self.head_w, "head.b": self.head_b})
        return out

    # forward -----------------------------------------------------------------
    def assemble(
        self,
        x_cls_prev: Tensor,
        psi_y: Tensor,
        layer_idx: int,
        train: bool = False,
        rng: np.random.Generator | None = None,
        mapped: Tensor | None = None,
    ) -> PromptAssembly:
        if not 0 <= layer_idx < len(self.layers):
            raise ConfigError(f"layer {layer_idx} is not a prompted layer")
        flags, mc = self.cfg.prompts, self.cfg.mope
        lp = self.layers[layer_idx]
        b = x_cls_prev.shape[0]
        static = lp.static if flags.static else None
        dynamic = scores = None
        if flags.dynamic:
            if mc.single_dynamic:
                dynamic = T.broadcast_to(lp.single, (b,) + lp.single.shape)
            else:
                q = routing_query(x_cls_prev, psi_y, lp.router)
                scores = route(q, lp.keys, mc.tau, rng if mc.noise else None, train)
                dynamic = mix(scores, lp.experts)
        if flags.mapped and mapped is None:
            mapped = map_feature(psi_y, self.mapper, self.cfg.encoder.d_model, train)
        return PromptAssembly(static, dynamic, mapped if flags.mapped else None, scores)

    def forward(self, x_ids, y, train: bool = False, rng: np.random.Generator | None = None):
        """Logits (B, C) and the routing record of this pass."""
        x_ids = np.asarray(x_ids)
        y = T.as_tensor(y)
        if x_ids.ndim == 1:
            x_ids = x_ids[None]
            y = T.reshape(y, (1, -1))
        b = x_ids.shape[0]
        record = RoutingRecord()
        flags = self.cfg.prompts
        psi = encode_complementary(y, self.cfg.complementary, self.comp, self.comp_prompts)
        mapped = None
        if flags.mapped:
            mapped = map_feature(psi, self.mapper, self.cfg.encoder.d_model, train)
        drop = self.cfg.mope.dropout if train else 0.0

        def provider(i: int, cls_prev: Tensor):
            asm = self.assemble(cls_prev, psi, i, train, rng, mapped)
            if asm.scores is not None:
                record.add(i, asm.scores)
            prompts = asm.stacked(b)
            if prompts is not None and drop > 0 and rng is not None:
                keep = (rng.random((b, prompts.shape[1], 1)) >= drop) / (1.0 - drop)
                prompts = prompts * keep
            return prompts

        cls = encode_main(x_ids, provider, self.cfg.encoder, self.main)
        return cls @ self.head_w + self.head_b, record


def build_model(cfg: RunConfig, seed: int | None = None, pretrain: bool = True) -> FusionModel:
    """Seeded construction; every random draw happens in a fixed order.

    ``pretrain=False`` skips the backbone pretraining step (use it when the
    weights are about to be overwritten from a checkpoint).
    """
    rng = T.make_rng(cfg.model_seed if seed is None else seed)
    enc, cc, mc = cfg.encoder, cfg.complementary, cfg.mope
    d_x, d_y = enc.d_model, cc.d_model
    main = init_encoder(enc, rng, frozen=True)
    if pretrain:
        pretrain_lookup(main, enc, cfg.model_seed if seed is None else seed)
    comp = init_encoder(cc, rng, frozen=True)
    eta_c = prompt_init_eta(d_y, max(cc.num_prompts, 1))
    comp_prompts = None
    if cc.num_prompts > 0:
        comp_prompts = Tensor(rng.uniform(-eta_c, eta_c, (cc.num_prompts, d_y)), requires_grad=True, name="comp_prompts")
    l, k = mc.prompt_len, mc.experts
    static_len = cfg.prompts.static_len or l
    eta = mc.init_eta if mc.init_eta is not None else prompt_init_eta(d_x, l)
    eta_s = mc.init_eta if mc.init_eta is not None else prompt_init_eta(d_x, static_len)
    g = mc.router_init_gain
    layers = []
    for i in range(enc.num_layers):
        static = Tensor(rng.uniform(-eta_s, eta_s, (static_len, d_x)), requires_grad=True, name=f"layers.{i}.static")
        experts = Tensor(rng.uniform(-eta, eta, (k, l, d_x)), requires_grad=True, name=f"layers.{i}.experts")
        keys = T.orthogonal_init(k, mc.d_r, rng)
        keys.requires_grad = mc.learned_keys
        keys.name = f"layers.{i}.keys"
        router = RouterWeights(
            wx=Tensor(g * rng.standard_normal((d_x, mc.d_i)) / np.sqrt(d_x), requires_grad=True, name=f"layers.{i}.router.wx"),
            wy=Tensor(g * rng.standard_normal((d_y, mc.d_c)) / np.sqrt(d_y), requires_grad=True, name=f"layers.{i}.router.wy"),
        )
        single = None
        if mc.single_dynamic:
            # same initial values as expert 0 so k=1 runs are directly comparable
            single = Tensor(experts.data[0].copy(), requires_grad=True, name=f"layers.{i}.single")
        layers.append(LayerPrompts(static, experts, keys, router, single))
    mapper = init_mapper(d_y, [d_x], rng)
    c = cfg.data.num_classes
    head_w = Tensor(rng.standard_normal((d_x, c)) / np.sqrt(d_x), requires_grad=True, name="head.w")
    head_b = Tensor(np.zeros(c), requires_grad=True, name="head.b")
    return FusionModel(cfg, main, comp, comp_prompts, layers, mapper, head_w, head_b)


def analytic_param_count(cfg: RunConfig) -> int:
    """Trainable parameter count implied by the config alone."""
    enc, cc, mc, flags = cfg.encoder, cfg.complementary, cfg.mope, cfg.prompts
    d_x, d_y = enc.d_model, cc.d_model
    l, k = mc.prompt_len, mc.experts
    per_layer = 0
    if flags.static:
        per_layer += (flags.static_len or l) * d_x
    if flags.dynamic:
        if mc.single_dynamic:
            per_layer += l * d_x
        else:
            per_layer += k * l * d_x + d_x * mc.d_i + d_y * mc.d_c
            if mc.learned_keys:
                per_layer += k * mc.d_r
    total = enc.num_layers * per_layer
    if flags.mapped:
        d_bot = bottleneck_dim(d_y)
        total += d_y * d_bot + 2 * d_bot + d_bot * d_x
    total += d_x * cfg.data.num_classes + cfg.data.num_classes
    total += cc.num_prompts * d_y
    return total


def prompt_rows_per_layer(cfg: RunConfig) -> int:
    """Tunable prompt rows per layer under the (k+1)*l+1 accounting."""
    flags, mc = cfg.prompts, cfg.mope
    rows = 0
    if flags.static:
        rows += flags.static_len or mc.prompt_len
    if flags.dynamic:
        rows += mc.prompt_len * (1 if mc.single_dynamic else mc.experts)
    if flags.mapped:
        rows += 1
    return rows
