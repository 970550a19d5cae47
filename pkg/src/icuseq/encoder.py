"""Sparse-attention transformer encoder.

Attention is restricted to a sliding window of ``w`` neighbors per side
plus a small set of global rows (the specials) that attend to, and are
attended by, every non-pad row. Work per banded token is O(2w+1+|G|)
regardless of sequence length; a module-level FLOP counter instruments
the attention ops so the scaling contract is measurable.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    custom_op,
    dropout,
    gelu,
    layer_norm,
    matmul,
    parameter,
    reshape,
    scale as t_scale,
    softmax,
    tanh,
    transpose,
)
from .config import ModelConfig
from .embedding import ComposedSequence, _ParamBlock, trunc_normal

__all__ = [
    "FlopCounter",
    "flop_counter",
    "count_flops",
    "AttentionPattern",
    "sparse_attention",
    "LayerParams",
    "EncoderParams",
    "init_encoder_params",
    "transformer_layer",
    "encode",
    "PoolParams",
    "init_pool_params",
    "attention_pool",
]

_NEG = -1e30


class FlopCounter:
    """Counts multiply-accumulate work (2 flops per MAC) in attention ops."""

    def __init__(self) -> None:
        self.enabled = False
        self.flops = 0

    def reset(self) -> None:
        self.flops = 0

    def add(self, n: int) -> None:
        if self.enabled:
            self.flops += int(n)


flop_counter = FlopCounter()


@contextmanager
def count_flops():
    """Enable the global attention FLOP counter within the block."""
    prev_enabled = flop_counter.enabled
    flop_counter.enabled = True
    flop_counter.reset()
    try:
        yield flop_counter
    finally:
        flop_counter.enabled = prev_enabled


class AttentionPattern:
    """Precomputed neighbor indices and validity for one sequence shape.

    ``nbr[t, k]`` lists the key rows token ``t`` may attend: its window
    band followed by the global rows (deduplicated when a global already
    falls inside the band). ``kvalid`` masks out-of-range and pad keys.
    """

    def __init__(self, T: int, window: int, global_rows: np.ndarray, valid: np.ndarray):
        if window < 0:
            raise ValueError(f"window must be non-negative, got {window}")
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (T,):
            raise ValueError(f"valid mask shape {valid.shape} != ({T},)")
        G = np.asarray(global_rows, dtype=np.int64)
        if G.size and (G.min() < 0 or G.max() >= T):
            raise ValueError("global row index out of range")
        if G.size and not valid[G].all():
            raise ValueError("global rows must be valid (non-pad)")
        offs = np.arange(-window, window + 1)
        band = np.arange(T)[:, None] + offs[None, :]
        in_range = (band >= 0) & (band < T)
        band_c = np.clip(band, 0, T - 1)
        band_ok = in_range & valid[band_c]
        if G.size:
            glob = np.broadcast_to(G, (T, G.size)).copy()
            inside_band = np.abs(glob - np.arange(T)[:, None]) <= window
            glob_ok = ~inside_band
            self.nbr = np.concatenate([band_c, glob], axis=1)
            self.kvalid = np.concatenate([band_ok, glob_ok], axis=1)
        else:
            self.nbr = band_c
            self.kvalid = band_ok
        self.T = T
        self.window = window
        self.global_rows = G
        self.valid = valid
        is_global = np.zeros(T, dtype=bool)
        if G.size:
            is_global[G] = True
        self.is_global = is_global


def sparse_attention(q: Tensor, k: Tensor, v: Tensor, pattern: AttentionPattern) -> Tensor:
    """Windowed multi-head attention with dense global rows.

    Inputs are (H, T, d_head). Pad rows neither emit nor receive
    attention; their output rows are exactly zero.
    """
    qd, kd, vd = q.data, k.data, v.data
    if qd.shape != kd.shape or qd.shape != vd.shape:
        raise ValueError(f"q/k/v shapes differ: {qd.shape}, {kd.shape}, {vd.shape}")
    if qd.ndim != 3:
        raise ValueError(f"expected (heads, tokens, d_head), got {qd.shape}")
    H, T, Dh = qd.shape
    if T != pattern.T:
        raise ValueError(f"pattern built for T={pattern.T}, inputs have T={T}")
    inv_sqrt = 1.0 / math.sqrt(Dh)
    nbr, kvalid, valid = pattern.nbr, pattern.kvalid, pattern.valid
    G = pattern.global_rows
    K = nbr.shape[1]

    Kg = kd[:, nbr]  # (H, T, K, Dh)
    Vg = vd[:, nbr]
    scores = np.einsum("htd,htkd->htk", qd, Kg, optimize=True) * inv_sqrt
    scores = np.where(kvalid[None], scores, _NEG)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m) * kvalid[None]
    s = e.sum(axis=-1, keepdims=True)
    w_band = e / np.where(s > 0.0, s, 1.0)
    ctx = np.einsum("htk,htkd->htd", w_band, Vg, optimize=True)

    n_banded = int((valid & ~pattern.is_global).sum())
    flop_counter.add(H * n_banded * 4 * K * Dh)

    if G.size:
        qg = qd[:, G]  # (H, g, Dh)
        sg = np.einsum("hgd,htd->hgt", qg, kd, optimize=True) * inv_sqrt
        sg = np.where(valid[None, None, :], sg, _NEG)
        mg = sg.max(axis=-1, keepdims=True)
        eg = np.exp(sg - mg) * valid[None, None, :]
        wg = eg / eg.sum(axis=-1, keepdims=True)
        ctx[:, G] = np.einsum("hgt,htd->hgd", wg, vd, optimize=True)
        flop_counter.add(H * G.size * 4 * T * Dh)
    else:
        wg = None

    ctx[:, ~valid] = 0.0

    def backward(g_out):
        g = np.where(valid[None, :, None], g_out, 0.0)
        gb = g.copy()
        if G.size:
            gb[:, G] = 0.0
        wb = w_band.copy()
        if G.size:
            wb[:, G] = 0.0
        h_idx = np.arange(H)[:, None, None]
        nbr_b = nbr[None]
        dW = np.einsum("htd,htkd->htk", gb, Vg, optimize=True)
        dVg = np.einsum("htk,htd->htkd", wb, gb, optimize=True)
        dv = np.zeros_like(vd)
        np.add.at(dv, (h_idx, nbr_b), dVg)
        dS = wb * (dW - (dW * wb).sum(axis=-1, keepdims=True))
        dq = np.einsum("htk,htkd->htd", dS, Kg, optimize=True) * inv_sqrt
        dKg = np.einsum("htk,htd->htkd", dS, qd, optimize=True) * inv_sqrt
        dk = np.zeros_like(kd)
        np.add.at(dk, (h_idx, nbr_b), dKg)
        if G.size:
            gg = g[:, G]
            dWg = np.einsum("hgd,htd->hgt", gg, vd, optimize=True)
            dv += np.einsum("hgt,hgd->htd", wg, gg, optimize=True)
            dSg = wg * (dWg - (dWg * wg).sum(axis=-1, keepdims=True))
            dq[:, G] += np.einsum("hgt,htd->hgd", dSg, kd, optimize=True) * inv_sqrt
            dk += np.einsum("hgt,hgd->htd", dSg, qd[:, G], optimize=True) * inv_sqrt
        return [(q, dq), (k, dk), (v, dv)]

    return custom_op(ctx, (q, k, v), backward, "sparse_attention")


@dataclass
class LayerParams(_ParamBlock):
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor


class EncoderParams:
    def __init__(self, layers: list[LayerParams], ln_f_gain: Tensor, ln_f_bias: Tensor):
        self.layers = layers
        self.ln_f_gain = ln_f_gain
        self.ln_f_bias = ln_f_bias

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}layer{i}.")
        self.ln_f_gain.name = f"{prefix}ln_f_gain"
        self.ln_f_bias.name = f"{prefix}ln_f_bias"
        yield f"{prefix}ln_f_gain", self.ln_f_gain
        yield f"{prefix}ln_f_bias", self.ln_f_bias


def _linear_init(rng: np.random.Generator, n_in: int, n_out: int, std: float) -> tuple[Tensor, Tensor]:
    return parameter(trunc_normal(rng, (n_in, n_out), std)), parameter(np.zeros(n_out))


def init_encoder_params(rng: np.random.Generator, cfg: ModelConfig) -> EncoderParams:
    d, ff, std = cfg.d_model, cfg.d_ff, cfg.init_std
    layers = []
    for _ in range(cfg.n_layers):
        wq, bq = _linear_init(rng, d, d, std)
        wk, bk = _linear_init(rng, d, d, std)
        wv, bv = _linear_init(rng, d, d, std)
        wo, bo = _linear_init(rng, d, d, std)
        w1, b1 = _linear_init(rng, d, ff, std)
        w2, b2 = _linear_init(rng, ff, d, std)
        layers.append(
            LayerParams(
                ln1_gain=parameter(np.ones(d)),
                ln1_bias=parameter(np.zeros(d)),
                wq=wq, bq=bq, wk=wk, bk=bk, wv=wv, bv=bv, wo=wo, bo=bo,
                ln2_gain=parameter(np.ones(d)),
                ln2_bias=parameter(np.zeros(d)),
                w_ff1=w1, b_ff1=b1, w_ff2=w2, b_ff2=b2,
            )
        )
    return EncoderParams(layers, parameter(np.ones(d)), parameter(np.zeros(d)))


def _split_heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    T = x.data.shape[0]
    return transpose(reshape(x, (T, n_heads, d_head)), (1, 0, 2))


def transformer_layer(
    x: Tensor,
    p: LayerParams,
    pattern: AttentionPattern,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm residual block: sparse attention then a GELU feed-forward."""
    T = x.data.shape[0]
    h = layer_norm(x, p.ln1_gain, p.ln1_bias, cfg.ln_eps)
    qh = _split_heads(add(matmul(h, p.wq), p.bq), cfg.n_heads, cfg.d_head)
    kh = _split_heads(add(matmul(h, p.wk), p.bk), cfg.n_heads, cfg.d_head)
    vh = _split_heads(add(matmul(h, p.wv), p.bv), cfg.n_heads, cfg.d_head)
    att = sparse_attention(qh, kh, vh, pattern)
    merged = reshape(transpose(att, (1, 0, 2)), (T, cfg.d_model))
    proj = add(matmul(merged, p.wo), p.bo)
    if training and cfg.dropout > 0:
        proj = dropout(proj, cfg.dropout, rng, training)
    x = add(x, proj)
    h2 = layer_norm(x, p.ln2_gain, p.ln2_bias, cfg.ln_eps)
    ff = add(matmul(gelu(add(matmul(h2, p.w_ff1), p.b_ff1), cfg.gelu_form), p.w_ff2), p.b_ff2)
    if training and cfg.dropout > 0:
        ff = dropout(ff, cfg.dropout, rng, training)
    return add(x, ff)


def encode(
    seq: ComposedSequence,
    p: EncoderParams,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the full encoder stack; returns (T, d_model) hidden states."""
    T = seq.embedded.data.shape[0]
    pattern = AttentionPattern(T, cfg.window, seq.global_rows, seq.valid)
    x = seq.embedded
    for layer in p.layers:
        x = transformer_layer(x, layer, pattern, cfg, training=training, rng=rng)
    return layer_norm(x, p.ln_f_gain, p.ln_f_bias, cfg.ln_eps)


@dataclass
class PoolParams(_ParamBlock):
    proj: Tensor  # (d, d)
    query: Tensor  # (d, 1)


def init_pool_params(rng: np.random.Generator, cfg: ModelConfig) -> PoolParams:
    return PoolParams(
        proj=parameter(trunc_normal(rng, (cfg.d_model, cfg.d_model), cfg.init_std)),
        query=parameter(trunc_normal(rng, (cfg.d_model, 1), cfg.init_std)),
    )


def attention_pool(hidden: Tensor, p: PoolParams, valid: np.ndarray) -> Tensor:
    """Learned attention pooling over valid rows -> (1, d_model)."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("attention_pool requires at least one valid row")
    d = hidden.data.shape[1]
    scores = t_scale(matmul(tanh(matmul(hidden, p.proj)), p.query), 1.0 / math.sqrt(d))
    mask = np.where(valid, 0.0, _NEG).reshape(-1, 1)
    alpha = softmax(add(scores, Tensor(mask)), axis=0)
    return matmul(transpose(alpha, (1, 0)), hidden)
