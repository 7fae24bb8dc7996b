from math import erf, sqrt

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mopelab import tensor as T
from mopelab import backbone
from mopelab.backbone import pretrain_lookup
from mopelab.encoder import (
    EncoderConfig,
    attention_probs,
    embed,
    encode_complementary,
    encode_main,
    init_encoder,
    layer_forward,
    run_layers,
)
from mopelab.errors import ConfigError, ContractError, DataError, DimensionError
from mopelab.tensor import Tensor

CFG = EncoderConfig(num_layers=2, d_model=8, num_heads=2, d_ff=12, seq_len=5, vocab=7)
VEC = EncoderConfig(num_layers=1, d_model=8, num_heads=2, d_ff=12, seq_len=4, vocab=0, input_dim=8)


def _weights(cfg=CFG, seed=0, jitter=True):
    """Encoder weights with non-trivial norm gains and biases."""
    w = init_encoder(cfg, np.random.default_rng(seed))
    if jitter:
        r = np.random.default_rng(seed + 100)
        for lw in w.layers:
            for name in ("ln1_g", "ln2_g"):
                getattr(lw, name).data = 1 + 0.3 * r.normal(size=cfg.d_model)
            for name in ("ln1_b", "ln2_b", "bo", "b2"):
                getattr(lw, name).data = 0.2 * r.normal(size=cfg.d_model)
            lw.b1.data = 0.2 * r.normal(size=cfg.d_ff)
    return w


def naive_block(cls, prompts, toks, lw, h):
    """Straight-line pre-LN block over [cls, prompts, tokens], one instance."""

    def ln(z, g, b):
        out = np.empty_like(z)
        for i, row in enumerate(z):
            mu = sum(row) / len(row)
            var = sum((v - mu) ** 2 for v in row) / len(row)
            out[i] = [(v - mu) / sqrt(var + 1e-5) * gg + bb for v, gg, bb in zip(row, g, b)]
        return out

    seq = np.vstack([cls[None], prompts, toks])
    p, n, d = len(prompts), len(seq), seq.shape[1]
    hd = d // h
    hn = ln(seq, lw.ln1_g.data, lw.ln1_b.data)
    q, k, v = hn @ lw.wq.data, hn @ lw.wk.data, hn @ lw.wv.data
    ctx = np.zeros((n, d))
    for head in range(h):
        cols = range(head * hd, (head + 1) * hd)
        for i in range(n):
            logits = [sum(q[i, c] * k[j, c] for c in cols) / sqrt(hd) for j in range(n)]
            m = max(logits)
            w = [np.exp(z - m) for z in logits]
            tot = sum(w)
            for c in cols:
                ctx[i, c] = sum(w[j] / tot * v[j, c] for j in range(n))
    x = seq + ctx @ lw.wo.data + lw.bo.data
    hid = ln(x, lw.ln2_g.data, lw.ln2_b.data) @ lw.w1.data + lw.b1.data
    hid = np.vectorize(lambda z: 0.5 * z * (1 + erf(z / sqrt(2))))(hid)
    x = x + hid @ lw.w2.data + lw.b2.data
    keep = [0] + list(range(1 + p, n))
    return x[keep][0], x[keep][1:]


@pytest.mark.parametrize("p", [0, 1, 3])
def test_layer_matches_naive_oracle(p):
    r = np.random.default_rng(p)
    w = _weights()
    b = 2
    cls = r.normal(size=(b, CFG.d_model))
    toks = r.normal(size=(b, CFG.seq_len, CFG.d_model))
    prompts = r.normal(size=(b, p, CFG.d_model))
    got_c, got_t = layer_forward(Tensor(cls), Tensor(prompts), Tensor(toks), w.layers[0], CFG)
    for i in range(b):
        want_c, want_t = naive_block(cls[i], prompts[i], toks[i], w.layers[0], CFG.num_heads)
        assert np.abs(got_c.data[i] - want_c).max() <= 1e-10
        assert np.abs(got_t.data[i] - want_t).max() <= 1e-10


def test_empty_prompts_equal_no_prompts():
    r = np.random.default_rng(1)
    w = _weights()
    cls, toks = Tensor(r.normal(size=(3, 8))), Tensor(r.normal(size=(3, 5, 8)))
    a = layer_forward(cls, None, toks, w.layers[0], CFG)
    b = layer_forward(cls, Tensor(np.zeros((0, 8))), toks, w.layers[0], CFG)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_shared_prompt_broadcasts_over_batch():
    r = np.random.default_rng(2)
    w = _weights()
    cls, toks = Tensor(r.normal(size=(3, 8))), Tensor(r.normal(size=(3, 5, 8)))
    pr = r.normal(size=(2, 8))
    a = layer_forward(cls, Tensor(pr), toks, w.layers[0], CFG)
    b = layer_forward(cls, Tensor(np.broadcast_to(pr, (3, 2, 8)).copy()), toks, w.layers[0], CFG)
    assert np.array_equal(a[1].data, b[1].data)


@given(st.integers(0, 6), st.integers(0, 10_000))
def test_attention_rows_on_simplex_and_lengths(p, seed):
    r = np.random.default_rng(seed)
    w = _weights(seed=seed % 5, jitter=False)
    cls, toks = Tensor(r.normal(size=(2, 8))), Tensor(r.normal(size=(2, 5, 8)))
    prompts = Tensor(3 * r.normal(size=(2, p, 8)))
    c, t, probs = layer_forward(cls, prompts, toks, w.layers[0], CFG, return_probs=True)
    assert probs.shape == (2, CFG.num_heads, 1 + 5, 1 + p + 5)  # attends over 1+p+s keys
    assert t.shape == (2, 5, 8) and c.shape == (2, 8)  # returns 1+s rows
    assert np.all(probs.data >= 0)
    assert np.abs(probs.data.sum(-1) - 1).max() <= 1e-12


def test_duplicated_prompt_row_stays_normalized():
    r = np.random.default_rng(3)
    w = _weights()
    cls, toks = Tensor(r.normal(size=(1, 8))), Tensor(r.normal(size=(1, 5, 8)))
    row = r.normal(size=(1, 1, 8))
    once = layer_forward(cls, Tensor(row), toks, w.layers[0], CFG, return_probs=True)[2].data
    twice = layer_forward(cls, Tensor(np.concatenate([row, row], 1)), toks, w.layers[0], CFG, return_probs=True)[2].data
    assert np.allclose(twice[..., 1], twice[..., 2])
    assert np.abs(twice.sum(-1) - 1).max() <= 1e-12
    # the duplicated key carries twice the unnormalized weight
    ratio_once = once[..., 1] / once[..., 0]
    ratio_twice = (twice[..., 1] + twice[..., 2]) / twice[..., 0]
    assert np.allclose(ratio_twice, 2 * ratio_once)


def test_prompt_dim_mismatch():
    w = _weights()
    with pytest.raises(DimensionError):
        layer_forward(Tensor(np.zeros((1, 8))), Tensor(np.zeros((1, 2, 6))), Tensor(np.zeros((1, 5, 8))), w.layers[0], CFG)


def test_attention_probs_matches_layer_probs():
    r = np.random.default_rng(4)
    w = _weights()
    x = Tensor(r.normal(size=(2, 6, 8)))
    lw = w.layers[0]
    probs = attention_probs(x, x, lw.wq, lw.wk, 2).data
    assert probs.shape == (2, 2, 6, 6)
    assert np.abs(probs.sum(-1) - 1).max() <= 1e-12


# embedding ----------------------------------------------------------------------


def test_embed_shapes_and_determinism():
    w = _weights()
    z = np.zeros(CFG.seq_len, dtype=int)
    c1, t1 = embed(z, CFG, w)
    c2, t2 = embed(z, CFG, w)
    assert c1.shape == (1, 8) and t1.shape == (1, 5, 8)
    assert np.array_equal(t1.data, t2.data) and np.array_equal(c1.data, c2.data)


def test_embed_is_local():
    w = _weights()
    a = np.array([1, 2, 3, 4, 5])
    b = a.copy()
    b[2] = 0
    _, ta = embed(a, CFG, w)
    _, tb = embed(b, CFG, w)
    changed = np.abs(ta.data - tb.data).max(axis=-1)[0]
    assert changed[2] > 0 and np.all(np.delete(changed, 2) == 0)


def test_embed_errors():
    w = _weights()
    with pytest.raises(DataError):
        embed(np.array([0, 1, 2, 3, 7]), CFG, w)
    with pytest.raises(DimensionError):
        embed(np.array([0, 1]), CFG, w)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(d_model=10, num_heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(vocab=0, input_dim=0)
    with pytest.raises(ConfigError):
        EncoderConfig(vocab=0, input_dim=10, seq_len=4)


# full encoders ------------------------------------------------------------------


def test_encode_main_empty_provider_equals_unprompted():
    w = _weights()
    x = np.random.default_rng(5).integers(0, 7, (3, 5))
    empty = [Tensor(np.zeros((0, 8)))] * CFG.num_layers
    assert np.array_equal(encode_main(x, empty, CFG, w).data, encode_main(x, None, CFG, w).data)


def test_provider_count_error():
    w = _weights()
    with pytest.raises(ContractError):
        encode_main(np.zeros((1, 5), dtype=int), [None], CFG, w)


def test_prompts_do_not_leak_to_next_layer():
    r = np.random.default_rng(6)
    w = _weights()
    x = r.integers(0, 7, (2, 5))
    pr = Tensor(r.normal(size=(2, 3, 8)))
    seen = []

    def provider(i, cls):
        seen.append(i)
        return pr if i == 0 else None

    c, t = embed(x, CFG, w)
    got_c, got_t = run_layers(c, t, provider, CFG, w)
    c1, t1 = layer_forward(c, pr, t, w.layers[0], CFG)
    want_c, want_t = layer_forward(c1, None, t1, w.layers[1], CFG)
    assert seen == [0, 1]
    assert np.array_equal(got_c.data, want_c.data) and np.array_equal(got_t.data, want_t.data)


def test_complementary_encoder_shapes_and_prompt_gradients():
    w = init_encoder(VEC, np.random.default_rng(0))
    y = np.random.default_rng(1).normal(size=(3, 8))
    assert encode_complementary(y, VEC, w).shape == (3, 8)
    prompts = Tensor(np.random.default_rng(2).normal(size=(4, 8)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(encode_complementary(y, VEC, w, prompts))
    g = T.backward(loss, tape)
    assert np.abs(g[prompts]).max() > 0
    assert not any(t.requires_grad for t in w.named_tensors().values())


def test_frozen_weights_never_enter_parameter_set():
    w = init_encoder(CFG, np.random.default_rng(0), frozen=True)
    assert w.parameters() == []
    assert not any(t.requires_grad for t in w.named_tensors().values())
    live = init_encoder(CFG, np.random.default_rng(0), frozen=False)
    assert len(live.parameters()) == len(live.named_tensors())


def test_lookup_pretraining_is_seeded_and_refreezes():
    cfg = EncoderConfig(num_layers=1, d_model=8, num_heads=2, d_ff=12, seq_len=5, vocab=7, pretrain_steps=5, pretrain_batch=8)
    a = init_encoder(cfg, np.random.default_rng(0))
    b = init_encoder(cfg, np.random.default_rng(0))
    before = a.layers[0].wq.data.copy()
    pretrain_lookup(a, cfg, seed=3)
    backbone._CACHE.clear()  # force a second, independent run
    pretrain_lookup(b, cfg, seed=3)
    assert not np.array_equal(before, a.layers[0].wq.data)
    for (n, ta), tb in zip(a.named_tensors().items(), b.named_tensors().values()):
        assert np.array_equal(ta.data, tb.data), n
        assert not ta.requires_grad
