import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mopelab import tensor as T
from mopelab.config import MopeConfig
from mopelab.errors import ConfigError, ContractError, DimensionError, NumericError
from mopelab.router import (
    PromptExpert,
    RouterWeights,
    RoutingRecord,
    cv_squared,
    importance,
    importance_loss,
    mix,
    noise_std,
    route,
    routing_query,
)
from mopelab.tensor import Tensor


def _router(d_x=6, d_y=5, d_i=2, d_c=8, seed=0):
    r = np.random.default_rng(seed)
    return RouterWeights(Tensor(r.normal(size=(d_x, d_i)), requires_grad=True), Tensor(r.normal(size=(d_y, d_c)), requires_grad=True))


def _record(*layers):
    rec = RoutingRecord()
    for i, s in enumerate(layers):
        rec.add(i, s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=float)))
    return rec


# query ---------------------------------------------------------------------------


def test_default_routing_dim():
    assert MopeConfig().d_r == 10


def test_query_layout_and_linearity():
    router = _router()
    assert routing_query(np.zeros(6), np.zeros(5), router).data.tolist() == [[0.0] * 10]
    x, y = np.random.default_rng(1).normal(size=6), np.random.default_rng(2).normal(size=5)
    q = routing_query(x, y, router).data[0]
    q2 = routing_query(x, y + 1.0, router).data[0]
    assert np.any(q2[:8] != q[:8]) and np.array_equal(q2[8:], q[8:])  # cross-modal block first
    assert np.allclose(q[:8], y @ router.wy.data) and np.allclose(q[8:], x @ router.wx.data)


def test_query_dim_mismatch():
    with pytest.raises(DimensionError):
        routing_query(np.zeros(4), np.zeros(5), _router())


# route --------------------------------------------------------------------------


def test_orthogonal_query_gives_uniform_scores():
    keys = T.orthogonal_init(3, 5, T.make_rng(0)).data
    q = np.linalg.svd(keys)[2][-1]  # null-space direction of the keys
    r = route(q, keys, 0.1).data[0]
    assert np.allclose(r, 1 / 3, atol=1e-12)


@given(hnp.arrays(np.float64, 7, elements=st.floats(-100, 100)))
def test_single_expert_scores_one(q):
    keys = T.orthogonal_init(1, 7, T.make_rng(0))
    assert route(q, keys, 0.1, T.make_rng(1), train=True).data.tolist() == [[1.0]]


def test_hand_evaluated_scores():
    # q.k = [0.01, 0.00] at tau 0.1 -> softmax([0.1, 0])
    keys = np.eye(2)
    r = route(np.array([0.01, 0.0]), keys, 0.1).data[0]
    want = np.array([math.exp(0.1), 1.0]) / (math.exp(0.1) + 1)
    assert np.allclose(r, want, atol=1e-12)
    assert np.allclose(r, [0.52498, 0.47502], atol=1e-5)


def test_no_experts_is_config_error():
    with pytest.raises(ConfigError):
        route(np.zeros(3), np.zeros((0, 3)), 0.1)


def test_noise_only_in_train_mode():
    keys = T.orthogonal_init(4, 6, T.make_rng(0))
    q = np.random.default_rng(0).normal(size=(3, 6))
    rng_state = T.make_rng(5)
    ev = route(q, keys, 0.1, rng_state, train=False).data
    assert np.array_equal(ev, route(q, keys, 0.1).data)
    tr = route(q, keys, 0.1, T.make_rng(5), train=True).data
    assert not np.array_equal(ev, tr)
    assert noise_std(4) == 0.25


def test_noise_statistics():
    # logits are zero, so log-ratios of scores expose the raw noise
    keys = np.eye(4)
    r = route(np.zeros((20_000, 4)), keys, 0.1, T.make_rng(9), train=True).data
    z = np.log(r[:, 1:] / r[:, :1])  # eps_j - eps_0 has variance 2/k^2
    assert abs(z.std() - math.sqrt(2) / 4) < 0.01
    assert abs(z.mean()) < 0.01


@given(st.integers(1, 9), st.integers(0, 10_000), st.floats(0.01, 5.0), st.booleans())
def test_scores_on_simplex(k, seed, tau, train):
    r_ = np.random.default_rng(seed)
    keys = T.orthogonal_init(k, k + 3, r_)
    q = r_.normal(scale=5.0, size=(4, k + 3))
    r = route(q, keys, tau, r_, train).data
    assert np.all(r >= 0) and np.abs(r.sum(1) - 1).max() <= 1e-9


@given(st.floats(0.01, 100.0), st.integers(0, 10_000))
def test_argmax_invariant_to_query_scale(scale, seed):
    r_ = np.random.default_rng(seed)
    keys = T.orthogonal_init(5, 8, r_)
    q = r_.normal(size=8)
    a = route(q, keys, 0.1).data[0]
    b = route(scale * q, keys, 0.1).data[0]
    # near-ties may flip; only compare when the top two logits are separated
    logits = np.sort(keys.data @ q)
    if logits[-1] - logits[-2] > 1e-9:
        assert a.argmax() == b.argmax()


# mix ------------------------------------------------------------------------------


def test_one_hot_returns_expert():
    ex = np.random.default_rng(0).normal(size=(3, 2, 4))
    assert np.array_equal(mix(np.array([0.0, 1.0, 0.0]), ex).data[0], ex[1])


def test_uniform_two_experts_is_midpoint():
    ex = np.random.default_rng(0).normal(size=(2, 2, 4))
    assert np.allclose(mix(np.array([0.5, 0.5]), ex).data[0], ex.mean(0), atol=1e-15)


def test_single_expert_is_identity():
    ex = np.random.default_rng(0).normal(size=(1, 3, 4))
    out = mix(np.ones((5, 1)), ex).data
    assert all(np.array_equal(o, ex[0]) for o in out)


def test_mix_accepts_expert_objects():
    ex = [PromptExpert(Tensor(np.full((2, 3), float(i))), Tensor(np.eye(3)[i])) for i in range(3)]
    assert np.allclose(mix(np.array([0.2, 0.3, 0.5]), ex).data[0], 1.3)


def test_mix_length_mismatch():
    with pytest.raises(ContractError):
        mix(np.array([0.5, 0.5]), np.zeros((3, 2, 4)))


@given(st.integers(1, 6), st.integers(0, 10_000))
def test_mix_shift_equivariance(k, seed):
    r_ = np.random.default_rng(seed)
    ex = r_.normal(size=(k, 2, 3))
    c = r_.normal(size=3)
    r = r_.dirichlet(np.ones(k), size=2)
    assert np.allclose(mix(r, ex + c).data, mix(r, ex).data + c, atol=1e-12)


def test_mix_gradient_reaches_scores_and_experts():
    r_ = np.random.default_rng(0)
    logits = Tensor(r_.normal(size=(2, 3)), requires_grad=True)
    ex = Tensor(r_.normal(size=(3, 2, 4)), requires_grad=True)
    w = r_.normal(size=(2, 2, 4))
    assert T.grad_check(lambda: T.tsum(mix(T.softmax_rows(logits, 0.5), ex) * w), [logits, ex]) <= 1e-6


# importance & loss -------------------------------------------------------------------


def test_importance_sums():
    assert importance(_record([[1, 0], [1, 0]]), 0).data.tolist() == [2.0, 0.0]
    uni = np.full((6, 3), 1 / 3)
    assert np.allclose(importance(_record(uni), 0).data, 2.0)


@given(st.integers(1, 8), st.integers(1, 30), st.integers(0, 10_000))
def test_importance_conserves_batch_size(k, b, seed):
    r = np.random.default_rng(seed).dirichlet(np.ones(k), size=b)
    assert abs(importance(_record(r), 0).data.sum() - b) <= 1e-9


def test_importance_empty_layer():
    with pytest.raises(ContractError):
        importance(RoutingRecord(), 0)
    with pytest.raises(ContractError):
        importance_loss(RoutingRecord(), 0.1)


def test_record_concatenates_chunks():
    rec = RoutingRecord()
    rec.add(0, Tensor(np.ones((2, 3)) / 3))
    rec.add(0, Tensor(np.ones((1, 3)) / 3))
    assert rec.scores(0).shape == (3, 3) and len(rec) == 3


@pytest.mark.parametrize("imp, want", [([2.0, 0.0], 1.0), ([3.0, 1.0], 0.25), ([4.0, 4.0, 4.0], 0.0)])
def test_cv_squared_hand_values(imp, want):
    assert abs(importance_loss(_record([imp]), 0.1).item() - want) <= 1e-12


def test_cv_squared_population_std():
    imp = np.array([1.0, 2.0, 6.0])
    assert abs(cv_squared(Tensor(imp)).item() - (imp.std() / imp.mean()) ** 2) <= 1e-15


def test_zero_importance_guard():
    with pytest.raises(NumericError):
        cv_squared(Tensor(np.zeros(3)))


def test_loss_is_mean_over_layers():
    rec = _record([[2.0, 0.0]], [[3.0, 1.0]])
    assert abs(importance_loss(rec, 0.0).item() - 0.625) <= 1e-12


def test_uniform_layer_has_zero_gradient():
    s = Tensor(np.full((4, 3), 1 / 3), requires_grad=True)
    with T.Tape() as tape:
        loss = importance_loss(_record(s), 0.1)
    g = T.backward(loss, tape)
    assert loss.item() == 0.0 and np.all(g[s] == 0.0)


@given(st.integers(0, 10_000))
def test_gate_blocks_or_matches_finite_differences(seed):
    r_ = np.random.default_rng(seed)
    gamma = 0.1
    logits = [Tensor(r_.normal(scale=s, size=(5, 4)), requires_grad=True) for s in (0.05, 3.0)]

    def loss():
        return importance_loss(_record(*[T.softmax_rows(z) for z in logits]), gamma)

    with T.Tape() as tape:
        out = loss()
    g = T.backward(out, tape)
    for z in logits:
        v = cv_squared(T.tsum(T.softmax_rows(z), axis=0)).item()
        if v < gamma:
            assert np.all(g[z] == 0.0)
        else:
            assert T.grad_check(loss, [z]) <= 1e-4


def test_gated_term_keeps_its_value():
    flat = [[0.26, 0.24, 0.25, 0.25]]
    v = cv_squared(Tensor(np.array(flat[0]))).item()
    assert 0 < v < 0.1
    assert importance_loss(_record(flat), 0.1).item() == v
