import itertools

import numpy as np
import pytest

from mopelab import fusion
from mopelab import tensor as T
from mopelab.config import RunConfig
from mopelab.errors import ConfigError
from mopelab.experiments import dataset_for
from mopelab.fusion import (
    analytic_param_count,
    bottleneck_dim,
    build_model,
    init_mapper,
    map_feature,
    prompt_rows_per_layer,
)
from mopelab.tensor import Tensor

FLAG_SETS = [dict(zip(("static", "dynamic", "mapped"), bits)) for bits in itertools.product([True, False], repeat=3)]


def _batch(cfg, n=4, seed=0):
    r = np.random.default_rng(seed)
    return r.integers(0, cfg.encoder.vocab, (n, cfg.encoder.seq_len)), r.normal(size=(n, cfg.data.d_y))


def _capture(monkeypatch):
    """Record the prompt tensor handed to each main-encoder layer."""
    seen = []
    real = fusion.encode_main

    def spy(tokens, provider, cfg, weights):
        def wrapped(i, cls):
            out = provider(i, cls)
            seen.append(None if out is None else out.data.copy())
            return out

        return real(tokens, wrapped, cfg, weights)

    monkeypatch.setattr(fusion, "encode_main", spy)
    return seen


# row accounting ---------------------------------------------------------------------


def test_default_layer_has_thirteen_rows():
    cfg = RunConfig()
    assert prompt_rows_per_layer(cfg) - cfg.mope.prompt_len * (cfg.mope.experts - 1) == 13


def test_two_experts_give_nineteen_tunable_rows():
    assert prompt_rows_per_layer(RunConfig().replace(mope={"experts": 2, "prompt_len": 6})) == 19


@pytest.mark.parametrize("flags", FLAG_SETS)
def test_assembly_length_follows_flags(tiny_cfg, flags):
    cfg = tiny_cfg.replace(prompts=flags)
    m = build_model(cfg)
    x, y = _batch(cfg)
    psi = fusion.encode_complementary(y, cfg.complementary, m.comp, m.comp_prompts)
    cls = Tensor(np.zeros((4, cfg.encoder.d_model)))
    asm = m.assemble(cls, psi, 0)
    l = cfg.mope.prompt_len
    assert asm.num_rows == l * flags["static"] + l * flags["dynamic"] + flags["mapped"]
    stacked = asm.stacked(4)
    assert (stacked is None) == (asm.num_rows == 0)
    logits, _ = m.forward(x, y)  # every subset runs
    assert logits.shape == (4, cfg.data.num_classes)


def test_bad_layer_index(tiny_cfg):
    m = build_model(tiny_cfg)
    with pytest.raises(ConfigError):
        m.assemble(Tensor(np.zeros((1, 8))), Tensor(np.zeros((1, 8))), 5)


def test_static_only_is_plain_prompt_tuning(tiny_cfg, monkeypatch):
    cfg = tiny_cfg.replace(prompts={"dynamic": False, "mapped": False})
    m = build_model(cfg)
    seen = _capture(monkeypatch)
    m.forward(*_batch(cfg))
    for i, p in enumerate(seen):
        assert all(np.array_equal(row, m.layers[i].static.data) for row in p)


# parameters ------------------------------------------------------------------------


@pytest.mark.parametrize("flags", FLAG_SETS)
@pytest.mark.parametrize("extra", [{}, {"single_dynamic": True}, {"learned_keys": True}])
def test_param_count_matches_analytic(tiny_cfg, flags, extra):
    cfg = tiny_cfg.replace(prompts=flags, mope=extra)
    assert build_model(cfg).num_trainable() == analytic_param_count(cfg)


def test_param_count_closed_form(tiny_cfg):
    cfg = tiny_cfg
    L, d_x, d_y, k, l = 2, 8, 8, 4, 2
    d_i, d_c, c = cfg.mope.d_i, cfg.mope.d_c, cfg.data.num_classes
    d_bot = 4
    want = L * (l * d_x + k * l * d_x + d_x * d_i + d_y * d_c)
    want += d_y * d_bot + 2 * d_bot + d_bot * d_x + d_x * c + c + cfg.complementary.num_prompts * d_y
    assert build_model(cfg).num_trainable() == want


def test_dropping_a_component_drops_its_parameters(tiny_cfg):
    full = build_model(tiny_cfg).num_trainable()
    no_dyn = build_model(tiny_cfg.replace(prompts={"dynamic": False})).num_trainable()
    no_map = build_model(tiny_cfg.replace(prompts={"mapped": False})).num_trainable()
    mc, d_x, d_y = tiny_cfg.mope, 8, 8
    assert full - no_dyn == tiny_cfg.encoder.num_layers * (mc.experts * mc.prompt_len * d_x + d_x * mc.d_i + d_y * mc.d_c)
    assert full - no_map == d_y * 4 + 2 * 4 + 4 * d_x


def test_trainable_set_excludes_encoders_and_keys(tiny_cfg):
    m = build_model(tiny_cfg)
    params = {id(p) for p in m.parameters()}
    frozen = list(m.main.named_tensors().values()) + list(m.comp.named_tensors().values())
    assert not any(id(t) in params for t in frozen)
    assert not any(id(lp.keys) in params for lp in m.layers)
    assert all(p.requires_grad for p in m.parameters())
    assert not any(lp.keys.requires_grad for lp in m.layers)


def test_keys_orthonormal_at_init(tiny_cfg):
    for lp in build_model(tiny_cfg).layers:
        k = lp.keys.data
        assert np.abs(k @ k.T - np.eye(k.shape[0])).max() <= 1e-9


def test_build_is_seeded(tiny_cfg):
    a, b = build_model(tiny_cfg).named_state(), build_model(tiny_cfg).named_state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = build_model(tiny_cfg, seed=1).named_state()
    assert not np.array_equal(a["layers.0.experts"], c["layers.0.experts"])


# mapper ------------------------------------------------------------------------------


@pytest.mark.parametrize("d_y, want", [(16, 8), (15, 8), (1, 1), (8, 4)])
def test_bottleneck_dim(d_y, want):
    assert bottleneck_dim(d_y) == want


def test_mapper_zero_propagation():
    m = init_mapper(16, [8], np.random.default_rng(0))
    out = map_feature(np.zeros(16), m, 8, train=False)
    assert out.shape == (1, 1, 8)
    assert np.all(out.data == 0.0)


def test_mapper_several_target_dims():
    m = init_mapper(16, [8, 12, 8], np.random.default_rng(0))
    assert sorted(m.up) == [8, 12] and m.d_bot == 8
    assert map_feature(np.ones((3, 16)), m, 12).shape == (3, 1, 12)
    with pytest.raises(ConfigError):
        map_feature(np.ones(16), m, 5)


def test_mapper_batch_stats_in_train_running_in_eval():
    r = np.random.default_rng(1)
    m = init_mapper(6, [4], r)
    y = r.normal(size=(5, 6)) * 3 + 1
    h = y @ m.down.data
    out = map_feature(y, m, 4, train=True).data
    hn = (h - h.mean(0)) / np.sqrt(h.var(0) + m.eps)
    from scipy.special import erf

    z = hn * m.bn_gamma.data + m.bn_beta.data
    want = (0.5 * z * (1 + erf(z / np.sqrt(2)))) @ m.up[4].data
    assert np.allclose(out[:, 0], want, atol=1e-12)
    assert np.allclose(m.running_mean, 0.1 * h.mean(0))
    assert np.allclose(m.running_var, 0.9 + 0.1 * h.var(0, ddof=1))
    snap = (m.running_mean.copy(), m.running_var.copy())
    map_feature(y, m, 4, train=False)
    assert np.array_equal(snap[0], m.running_mean) and np.array_equal(snap[1], m.running_var)


def test_mapper_gradients():
    r = np.random.default_rng(2)
    m = init_mapper(6, [4], r)
    y = Tensor(r.normal(size=(5, 6)), requires_grad=True)
    w = r.normal(size=(5, 1, 4))
    state = (m.running_mean.copy(), m.running_var.copy())

    def f():
        m.running_mean, m.running_var = state[0].copy(), state[1].copy()
        return T.tsum(map_feature(y, m, 4, train=True) * w)

    assert T.grad_check(f, m.parameters() + [y]) <= 1e-4


# forward ------------------------------------------------------------------------------


def test_all_flags_off_equals_frozen_baseline(tiny_cfg):
    cfg = tiny_cfg.replace(prompts={"static": False, "dynamic": False, "mapped": False})
    m = build_model(cfg)
    x, y = _batch(cfg)
    logits, rec = m.forward(x, y)
    ref = fusion.encode_main(x, None, cfg.encoder, m.main) @ m.head_w + m.head_b
    assert np.array_equal(logits.data, ref.data) and rec.layers == []


def test_eval_forward_is_deterministic(tiny_cfg):
    m = build_model(tiny_cfg)
    x, y = _batch(tiny_cfg)
    a, ra = m.forward(x, y, rng=T.make_rng(0))
    b, rb = m.forward(x, y, rng=T.make_rng(1))
    assert np.array_equal(a.data, b.data) and np.array_equal(ra.numpy(), rb.numpy())


def test_record_has_one_score_per_instance_and_layer(tiny_cfg):
    m = build_model(tiny_cfg)
    _, rec = m.forward(*_batch(tiny_cfg, n=5))
    assert rec.layers == [0, 1]
    assert rec.numpy().shape == (2, 5, tiny_cfg.mope.experts)


@pytest.mark.parametrize("flags, adapts", [
    ({"dynamic": False, "mapped": False}, False),
    ({"static": False, "mapped": False}, True),
    ({"static": False, "dynamic": False}, True),
    ({}, True),
])
def test_per_instance_adaptivity(tiny_cfg, monkeypatch, flags, adapts):
    cfg = tiny_cfg.replace(prompts=flags)
    m = build_model(cfg)
    x, y = _batch(cfg, n=2)
    x[1] = x[0]
    y2 = y.copy()
    y2[1] = y[1] + 1.0
    seen = _capture(monkeypatch)
    out_a, _ = m.forward(x, y)
    out_b, _ = m.forward(x, y2)
    first_layer_a, first_layer_b = seen[0], seen[cfg.encoder.num_layers]
    assert np.array_equal(first_layer_a[0], first_layer_b[0])  # untouched instance
    assert (not np.array_equal(first_layer_a[1], first_layer_b[1])) == adapts
    assert (not np.array_equal(out_a.data[1], out_b.data[1])) == adapts


def test_identical_x_different_y_gives_different_logits(tiny_cfg):
    m = build_model(tiny_cfg)
    x, y = _batch(tiny_cfg, n=2)
    x[1] = x[0]
    logits, _ = m.forward(x, y)
    assert not np.array_equal(logits.data[0], logits.data[1])


def test_prompt_dropout_train_only(tiny_cfg, monkeypatch):
    # noise and the mapped prompt off so the first layer's assembly is fixed
    cfg = tiny_cfg.replace(mope={"dropout": 0.5, "noise": False}, prompts={"mapped": False})
    m = build_model(cfg)
    x, y = _batch(cfg, n=16)
    psi = fusion.encode_complementary(y, cfg.complementary, m.comp, m.comp_prompts)
    cls0 = T.broadcast_to(m.main.cls, (16, cfg.encoder.d_model))
    clean = m.assemble(cls0, psi, 0).stacked(16).data
    seen = _capture(monkeypatch)
    m.forward(x, y, train=True, rng=T.make_rng(3))
    dropped = seen[0]
    zero = np.all(dropped == 0, axis=-1)
    kept = ~zero
    assert 0.25 < zero.mean() < 0.75
    assert np.allclose(dropped[kept], 2.0 * clean[kept], atol=1e-15)
    seen.clear()
    m.forward(x, y, train=False, rng=T.make_rng(3))
    assert np.array_equal(seen[0], clean)


def test_dropout_off_without_rng(tiny_cfg, monkeypatch):
    cfg = tiny_cfg.replace(mope={"dropout": 0.5, "noise": False}, prompts={"mapped": False})
    m = build_model(cfg)
    seen = _capture(monkeypatch)
    m.forward(*_batch(cfg), train=True)
    assert not np.any(np.all(seen[0] == 0, axis=-1))


@pytest.mark.slow
def test_routing_specializes_by_cluster():
    """After desk training, swapping only y's cluster moves the routing argmax."""
    from mopelab import config as config_mod
    from mopelab.experiments import run

    cfg = config_mod.load("configs/desk.json")
    res = run(cfg)
    ds = dataset_for(cfg)
    te = ds.test.subset(np.arange(64))
    other = (te.cluster + 1) % cfg.data.num_clusters
    y_swap = te.y - ds.means[te.cluster] + ds.means[other]
    _, ra = res.model.forward(te.x, te.y)
    _, rb = res.model.forward(te.x, y_swap)
    moved = np.any(ra.numpy().argmax(-1) != rb.numpy().argmax(-1), axis=0)
    assert moved.mean() > 0.5
