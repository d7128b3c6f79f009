"""Stage 1: time embedding, attention, encoder-decoder reconstruction."""

import math

import numpy as np
import pytest

from aero import nn
from aero.data import WindowInstance
from aero.nn import Tensor
from aero.temporal import (TemporalModule, TimeEmbeddingParams, decode, encode,
                           forward_window_batch, frequency_vector, reconstruct,
                           time_embedding)


def _instance(rng, n=3, w=16, omega=6):
    values = rng.normal(size=(n, w))
    return WindowInstance(long=values, short=values[:, -omega:],
                          positions=np.arange(w), deltas=np.ones(w),
                          end_index=w - 1)


# ---------------------------------------------------------------------------
# time embedding
# ---------------------------------------------------------------------------

def test_frequency_vector_values():
    f = frequency_vector(4)
    np.testing.assert_allclose(f, [1.0, 1e-1, 1e-2, 1e-3], rtol=1e-12)


def test_time_embedding_reduces_to_positional_at_zero_alpha():
    d_m = 8
    params = TimeEmbeddingParams(alpha=nn.zeros_param((d_m,)), d_m=d_m)
    pos = np.arange(5.0)
    deltas = np.linspace(0.5, 2.0, 5)  # must be ignored when alpha = 0
    te = time_embedding(pos, deltas, params).data
    f = frequency_vector(d_m)
    expected = np.sin(pos[:, None] * f) + np.cos(pos[:, None] * f)
    np.testing.assert_allclose(te, expected, rtol=1e-12)


def test_time_embedding_alpha_shifts_phase():
    d_m = 4
    alpha = Tensor(np.full(d_m, 0.3), requires_grad=True)
    params = TimeEmbeddingParams(alpha=alpha, d_m=d_m)
    pos = np.zeros(3)
    deltas = np.array([0.0, 1.0, 2.0])
    te = time_embedding(pos, deltas, params).data
    expected = np.sin(0.3 * deltas)[:, None] + np.cos(0.3 * deltas)[:, None]
    np.testing.assert_allclose(te, np.broadcast_to(expected, (3, d_m)), rtol=1e-12)


def test_time_embedding_gradient_flows_to_alpha():
    d_m = 4
    alpha = Tensor(np.full(d_m, 0.1), requires_grad=True)
    params = TimeEmbeddingParams(alpha=alpha, d_m=d_m)

    def f():
        return (time_embedding(np.arange(3.0), np.ones(3), params) ** 2.0).sum()

    assert nn.grad_check(f, [alpha]) < 1e-7


# ---------------------------------------------------------------------------
# numpy twin of the full forward pass
# ---------------------------------------------------------------------------

def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return g * (x - mu) / np.sqrt(var + eps) + b


def _np_mha(q_in, kv_in, wq, wk, wv, wo, heads, d_m):
    b, lq, d = q_in.shape
    lk = kv_in.shape[1]
    dh = d // heads
    q = (q_in @ wq).reshape(b, lq, heads, dh).transpose(0, 2, 1, 3) / math.sqrt(d_m)
    k = (kv_in @ wk).reshape(b, lk, heads, dh).transpose(0, 2, 1, 3)
    v = (kv_in @ wv).reshape(b, lk, heads, dh).transpose(0, 2, 1, 3)
    attn = _np_softmax(q @ k.transpose(0, 1, 3, 2))
    return (attn @ v).transpose(0, 2, 1, 3).reshape(b, lq, d) @ wo


def _np_forward(module, long, short, pos, deltas):
    p = {k: t.data.astype(np.float64) for k, t in module.p.items()}
    f = frequency_vector(module.d_m)

    def te(ps, ds):
        phase = ps[..., None] * f + p["alpha"] * ds[..., None]
        return np.sin(phase) + np.cos(phase)

    omega = short.shape[-1]
    ie = long[..., None] @ p["enc_in_w"] + te(pos, deltas)
    m_e = _np_layer_norm(ie + _np_mha(ie, ie, p["enc_wq"], p["enc_wk"], p["enc_wv"],
                                      p["enc_wo"], module.heads, module.d_m),
                         p["enc_ln1_g"], p["enc_ln1_b"])
    ffn = np.maximum(m_e @ p["enc_ffn_w1"] + p["enc_ffn_b1"], 0.0) \
        @ p["enc_ffn_w2"] + p["enc_ffn_b2"]
    o_e = _np_layer_norm(m_e + ffn, p["enc_ln2_g"], p["enc_ln2_b"])

    id_ = short[..., None] @ p["dec_in_w"] + te(pos[..., -omega:], deltas[..., -omega:])
    m_d = _np_layer_norm(id_ + _np_mha(id_, id_, p["dec_wq"], p["dec_wk"],
                                       p["dec_wv"], p["dec_wo"],
                                       module.heads, module.d_m),
                         p["dec_ln1_g"], p["dec_ln1_b"])
    o_d = _np_layer_norm(m_d + _np_mha(m_d, o_e, p["crs_wq"], p["crs_wk"],
                                       p["crs_wv"], p["crs_wo"],
                                       module.heads, module.d_m),
                         p["dec_ln2_g"], p["dec_ln2_b"])
    head = np.maximum(o_d @ p["out_w1"] + p["out_b1"], 0.0) @ p["out_w2"] + p["out_b2"]
    return (1.0 / (1.0 + np.exp(-head)))[..., 0]


def test_forward_matches_plain_numpy_twin():
    rng = np.random.default_rng(0)
    module = TemporalModule(d_m=8, heads=2, seed=1)
    module.p["alpha"].data = rng.normal(0, 0.1, 8)  # exercise the delta path
    b, w, omega = 3, 12, 5
    long = rng.normal(size=(b, w))
    short = long[:, -omega:]
    pos = np.tile(np.arange(w, dtype=float), (b, 1))
    deltas = rng.uniform(0.5, 2.0, size=(b, w))
    got = forward_window_batch(module, long, short, pos, deltas).data
    want = _np_forward(module, long, short, pos, deltas)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_attention_uniform_when_keys_identical():
    # identical key/value rows make softmax uniform: context = mean of values
    module = TemporalModule(d_m=4, heads=1, seed=0)
    long = np.full((1, 6), 0.37)
    pos = np.zeros((1, 6))
    deltas = np.zeros((1, 6))
    te = time_embedding(pos, deltas, module.time_params)
    with nn.no_grad():
        _, attn = encode(long[0], te.reshape(6, 4), module, return_attention=True)
    np.testing.assert_allclose(attn.data, 1.0 / 6.0, rtol=1e-12)


def test_output_in_unit_interval():
    rng = np.random.default_rng(2)
    module = TemporalModule(d_m=8, heads=2, seed=3)
    inst = _instance(rng)
    y1, err = reconstruct(inst, module)
    assert (y1 > 0).all() and (y1 < 1).all()
    np.testing.assert_allclose(err, inst.short - y1)


def test_variate_independence_under_permutation():
    rng = np.random.default_rng(4)
    module = TemporalModule(d_m=8, heads=2, seed=5)
    inst = _instance(rng, n=5)
    perm = np.array([3, 0, 4, 1, 2])
    inst_p = WindowInstance(long=inst.long[perm], short=inst.short[perm],
                            positions=inst.positions, deltas=inst.deltas,
                            end_index=inst.end_index)
    y1, _ = reconstruct(inst, module)
    y1p, _ = reconstruct(inst_p, module)
    np.testing.assert_allclose(y1p, y1[perm], rtol=1e-12)


def test_single_variate_contracts_match_batch():
    rng = np.random.default_rng(6)
    module = TemporalModule(d_m=8, heads=2, seed=7)
    w, omega = 10, 4
    long = rng.normal(size=(2, w))
    short = long[:, -omega:]
    pos = np.tile(np.arange(w, dtype=float), (2, 1))
    deltas = np.ones((2, w))
    with nn.no_grad():
        batch = forward_window_batch(module, long, short, pos, deltas).data
        te_l = time_embedding(pos[0], deltas[0], module.time_params)
        te_s = time_embedding(pos[0, -omega:], deltas[0, -omega:], module.time_params)
        o_e = encode(long[0], te_l, module)
        single = decode(short[0], te_s, o_e, module).data
    np.testing.assert_allclose(single, batch[0], rtol=1e-12)


def test_state_roundtrip():
    module = TemporalModule(d_m=8, heads=2, seed=8)
    clone = TemporalModule.from_state(module.state_arrays())
    for k in module.p:
        np.testing.assert_array_equal(clone.p[k].data, module.p[k].data)
    assert clone.d_m == module.d_m and clone.heads == module.heads


def test_dimension_validation():
    with pytest.raises(ValueError, match="divisible"):
        TemporalModule(d_m=10, heads=4)
