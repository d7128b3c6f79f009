"""Stage 1: per-variate Transformer encoder-decoder reconstruction.

One shared network reconstructs the trailing short window of each variate
from the long-window context. The encoder self-attends over the long
segment; the decoder self-attends over the short segment and cross-attends
into the encoder output; a feed-forward head with a sigmoid emits the
normalized reconstruction. Positions enter through a trigonometric embedding
whose time intervals act as learnable phase shifts.

Internally sequences are laid out as (batch, length, d_m) so a whole batch of
windows-times-variates goes through each BLAS call at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import WindowInstance
from .nn import Tensor


@dataclass
class TimeEmbeddingParams:
    """Learnable phase-shift coefficients, one per hidden dimension."""

    alpha: Tensor
    d_m: int

    def __post_init__(self):
        if self.alpha.data.shape != (self.d_m,):
            raise ValueError("alpha length must equal d_m")


def frequency_vector(d_m: int, dtype=np.float64) -> np.ndarray:
    """Pre-defined angle frequencies f_j = (1/10000)^(j/d_m), j = 0..d_m-1."""
    j = np.arange(d_m, dtype=np.float64)
    return ((1.0 / 10000.0) ** (j / d_m)).astype(dtype)


def time_embedding(positions: np.ndarray, deltas: np.ndarray,
                   params: TimeEmbeddingParams) -> Tensor:
    """Trigonometric embedding sin(f_j*pos + alpha_j*delta) + cos(same).

    ``positions``/``deltas`` may carry any leading batch shape; the result
    appends a trailing d_m axis (one row per position).
    """
    positions = np.asarray(positions)
    deltas = np.asarray(deltas)
    if positions.shape != deltas.shape:
        raise ValueError("positions and deltas must have the same shape")
    dtype = params.alpha.data.dtype
    freqs = frequency_vector(params.d_m, dtype)
    base = (positions[..., None].astype(np.float64) * freqs).astype(dtype)
    phase = Tensor(base) + params.alpha * Tensor(deltas[..., None].astype(dtype))
    return nn.sin(phase) + nn.cos(phase)


class TemporalModule:
    """All stage-1 parameters: input projections, attention, FFNs, head."""

    def __init__(self, d_m: int = 32, heads: int = 4, d_ff: int | None = None,
                 seed: int = 0, dtype=np.float64):
        if d_m % heads != 0:
            raise ValueError("d_m must be divisible by the number of heads")
        self.d_m = d_m
        self.heads = heads
        self.d_ff = 4 * d_m if d_ff is None else d_ff
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)

        def w(name, shape):
            return nn.glorot_uniform(rng, shape, dtype=self.dtype, name=name)

        def z(name, shape):
            return nn.zeros_param(shape, dtype=self.dtype, name=name)

        def g(name, shape):
            return nn.ones_param(shape, dtype=self.dtype, name=name)

        d, f = d_m, self.d_ff
        self.p: dict[str, Tensor] = {
            "alpha": z("alpha", (d,)),  # time embedding starts as pure positional
            "enc_in_w": w("enc_in_w", (1, d)),
            "dec_in_w": w("dec_in_w", (1, d)),
            "enc_wq": w("enc_wq", (d, d)), "enc_wk": w("enc_wk", (d, d)),
            "enc_wv": w("enc_wv", (d, d)), "enc_wo": w("enc_wo", (d, d)),
            "enc_ln1_g": g("enc_ln1_g", (d,)), "enc_ln1_b": z("enc_ln1_b", (d,)),
            "enc_ffn_w1": w("enc_ffn_w1", (d, f)), "enc_ffn_b1": z("enc_ffn_b1", (f,)),
            "enc_ffn_w2": w("enc_ffn_w2", (f, d)), "enc_ffn_b2": z("enc_ffn_b2", (d,)),
            "enc_ln2_g": g("enc_ln2_g", (d,)), "enc_ln2_b": z("enc_ln2_b", (d,)),
            "dec_wq": w("dec_wq", (d, d)), "dec_wk": w("dec_wk", (d, d)),
            "dec_wv": w("dec_wv", (d, d)), "dec_wo": w("dec_wo", (d, d)),
            "dec_ln1_g": g("dec_ln1_g", (d,)), "dec_ln1_b": z("dec_ln1_b", (d,)),
            "crs_wq": w("crs_wq", (d, d)), "crs_wk": w("crs_wk", (d, d)),
            "crs_wv": w("crs_wv", (d, d)), "crs_wo": w("crs_wo", (d, d)),
            "dec_ln2_g": g("dec_ln2_g", (d,)), "dec_ln2_b": z("dec_ln2_b", (d,)),
            "out_w1": w("out_w1", (d, f)), "out_b1": z("out_b1", (f,)),
            "out_w2": w("out_w2", (f, 1)), "out_b2": z("out_b2", (1,)),
        }
        self.time_params = TimeEmbeddingParams(alpha=self.p["alpha"], d_m=d)

    def parameters(self) -> list[Tensor]:
        return list(self.p.values())

    # -- persistence --------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"temporal/{k}": v.data for k, v in self.p.items()}
        out["temporal/__dims__"] = np.array([self.d_m, self.heads, self.d_ff])
        return out

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray], dtype=np.float64
                   ) -> "TemporalModule":
        d_m, heads, d_ff = (int(x) for x in arrays["temporal/__dims__"])
        mod = cls(d_m=d_m, heads=heads, d_ff=d_ff, dtype=dtype)
        for k, t in mod.p.items():
            t.data = np.asarray(arrays[f"temporal/{k}"], dtype=mod.dtype)
        return mod

    def copy_weights_from(self, other: "TemporalModule") -> None:
        for k, t in self.p.items():
            t.data = other.p[k].data.astype(self.dtype).copy()


def _mha(q_in: Tensor, kv_in: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
         wo: Tensor, heads: int, d_m: int, return_attention: bool = False):
    """Multi-head attention; scores scaled by 1/sqrt(d_m)."""
    b, lq, d = q_in.shape
    lk = kv_in.shape[-2]
    dh = d // heads
    scale = 1.0 / math.sqrt(d_m)
    q = (q_in @ wq).reshape(b, lq, heads, dh).transpose((0, 2, 1, 3)) * scale
    k = (kv_in @ wk).reshape(b, lk, heads, dh).transpose((0, 2, 1, 3))
    v = (kv_in @ wv).reshape(b, lk, heads, dh).transpose((0, 2, 1, 3))
    attn = nn.softmax_rows(q @ k.transpose((0, 1, 3, 2)))
    ctx = (attn @ v).transpose((0, 2, 1, 3)).reshape(b, lq, d) @ wo
    if return_attention:
        return ctx, attn
    return ctx


def _ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return nn.relu(x @ w1 + b1) @ w2 + b2


def _embed_input(values: np.ndarray, in_w: Tensor, te: Tensor, dtype) -> Tensor:
    x = Tensor(np.ascontiguousarray(values, dtype=dtype)[..., None])
    return x @ in_w + te


def encode_batch(module: TemporalModule, long_values: np.ndarray,
                 te_long: Tensor, return_attention: bool = False):
    """Encoder over a (B, W) batch of long segments -> (B, W, d_m)."""
    p = module.p
    ie = _embed_input(long_values, p["enc_in_w"], te_long, module.dtype)
    res = _mha(ie, ie, p["enc_wq"], p["enc_wk"], p["enc_wv"], p["enc_wo"],
               module.heads, module.d_m, return_attention)
    mha_out, attn = res if return_attention else (res, None)
    m_e = nn.layer_norm(ie + mha_out, p["enc_ln1_g"], p["enc_ln1_b"])
    o_e = nn.layer_norm(
        m_e + _ffn(m_e, p["enc_ffn_w1"], p["enc_ffn_b1"],
                   p["enc_ffn_w2"], p["enc_ffn_b2"]),
        p["enc_ln2_g"], p["enc_ln2_b"])
    if return_attention:
        return o_e, attn
    return o_e


def decode_batch(module: TemporalModule, short_values: np.ndarray,
                 te_short: Tensor, o_e: Tensor) -> Tensor:
    """Decoder over (B, omega) short segments -> reconstructions in (0, 1)."""
    p = module.p
    id_ = _embed_input(short_values, p["dec_in_w"], te_short, module.dtype)
    m_d = nn.layer_norm(
        id_ + _mha(id_, id_, p["dec_wq"], p["dec_wk"], p["dec_wv"], p["dec_wo"],
                   module.heads, module.d_m),
        p["dec_ln1_g"], p["dec_ln1_b"])
    o_d1 = nn.layer_norm(
        m_d + _mha(m_d, o_e, p["crs_wq"], p["crs_wk"], p["crs_wv"], p["crs_wo"],
                   module.heads, module.d_m),
        p["dec_ln2_g"], p["dec_ln2_b"])
    out = nn.sigmoid(_ffn(o_d1, p["out_w1"], p["out_b1"], p["out_w2"], p["out_b2"]))
    b, omega = short_values.shape
    return out.reshape(b, omega)


def encode(long_row: np.ndarray, te_long: Tensor, module: TemporalModule,
           return_attention: bool = False):
    """Single-variate encoder contract; ``long_row`` is (W,) or (1, W)."""
    row = np.atleast_2d(np.asarray(long_row))
    te = te_long if te_long.data.ndim == 3 else te_long.reshape(1, *te_long.shape)
    res = encode_batch(module, row, te, return_attention)
    if return_attention:
        o_e, attn = res
        return o_e[0], attn[0]
    return res[0]


def decode(short_row: np.ndarray, te_short: Tensor, o_e: Tensor,
           module: TemporalModule) -> Tensor:
    """Single-variate decoder contract; returns a (omega,) reconstruction."""
    row = np.atleast_2d(np.asarray(short_row))
    te = te_short if te_short.data.ndim == 3 else te_short.reshape(1, *te_short.shape)
    oe = o_e if o_e.data.ndim == 3 else o_e.reshape(1, *o_e.shape)
    return decode_batch(module, row, te, oe)[0]


def forward_window_batch(module: TemporalModule, long_values: np.ndarray,
                         short_values: np.ndarray, positions: np.ndarray,
                         deltas: np.ndarray) -> Tensor:
    """Full stage-1 forward for a (B, W)/(B, omega) batch of sequences."""
    omega = short_values.shape[-1]
    te_long = time_embedding(positions, deltas, module.time_params)
    te_short = time_embedding(positions[..., -omega:], deltas[..., -omega:],
                              module.time_params)
    o_e = encode_batch(module, long_values, te_long)
    return decode_batch(module, short_values, te_short, o_e)


def _instance_batch(instance: WindowInstance
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    n = instance.long.shape[0]
    pos = np.broadcast_to(instance.positions, (n, instance.positions.size))
    del_ = np.broadcast_to(instance.deltas, (n, instance.deltas.size))
    return instance.long, instance.short, pos, del_


def reconstruct(instance: WindowInstance, module: TemporalModule
                ) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct all variates of one window with shared weights.

    Returns (Y1_hat, E) where E = Y - Y1_hat, both N x omega. Variates are
    processed independently; permuting input rows permutes outputs identically.
    """
    long, short, pos, del_ = _instance_batch(instance)
    with nn.no_grad():
        y1 = forward_window_batch(module, long, short, pos, del_).data
    y1 = y1.astype(np.float64)
    return y1, instance.short - y1
