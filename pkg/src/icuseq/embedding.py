"""Attribute-specific event embeddings.

Each event row is the sum of seven component embeddings (identity, value,
unit, time, position, order name, order description); absent attributes
contribute exact zero vectors. Three special rows ([CLS], [AGE], [GENDER])
are prepended and receive no time/position/value components. Masked
attributes are replaced by per-attribute learned mask vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    constant,
    gelu,
    layer_norm,
    matmul,
    mul,
    parameter,
    sigmoid,
    signed_log1p,
    sine,
    take_rows,
)
from .config import ModelConfig
from .data import Vocabulary
from .pipeline import EncodedStay

__all__ = [
    "MASKABLE_ATTRIBUTES",
    "ABLATABLE_COMPONENTS",
    "trunc_normal",
    "Time2VecParams",
    "ValueEmbedParams",
    "EmbeddingParams",
    "init_embedding_params",
    "embed_time",
    "embed_value",
    "ComposedSequence",
    "assemble_sequence",
]

# attributes whose embeddings are replaced by mask vectors during pretraining
MASKABLE_ATTRIBUTES = ("event", "value", "unit", "time", "order_name", "order_desc")

# components that the ablation harness can zero out (identity is never ablated)
ABLATABLE_COMPONENTS = ("value", "unit", "time", "position", "order_name", "order_desc")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) clipped to +/- 2 std (truncated-normal init)."""
    return np.clip(rng.normal(0.0, std, shape), -2.0 * std, 2.0 * std)


class _ParamBlock:
    """Mixin: iterate dataclass fields holding Tensors (or nested blocks)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            val = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(val, Tensor):
                val.name = name
                yield name, val
            elif isinstance(val, _ParamBlock):
                yield from val.named_parameters(f"{name}.")


@dataclass
class Time2VecParams(_ParamBlock):
    """One linear term plus F sinusoidal terms, projected to d_model."""

    w0: Tensor
    b0: Tensor
    freq: Tensor
    phase: Tensor
    proj: Tensor
    bias: Tensor


def init_time2vec(rng: np.random.Generator, n_freqs: int, d_model: int, std: float) -> Time2VecParams:
    return Time2VecParams(
        w0=parameter(trunc_normal(rng, (1, 1), std)),
        b0=parameter(np.zeros(1)),
        freq=parameter(trunc_normal(rng, (1, n_freqs), std)),
        phase=parameter(np.zeros(n_freqs)),
        proj=parameter(trunc_normal(rng, (n_freqs + 1, d_model), std)),
        bias=parameter(np.zeros(d_model)),
    )


def embed_time(offsets_days: np.ndarray, p: Time2VecParams) -> Tensor:
    """Time2Vec-style embedding of (L,) offsets -> (L, d_model)."""
    t = constant(np.asarray(offsets_days, dtype=np.float64).reshape(-1, 1))
    linear = add(mul(t, p.w0), p.b0)
    periodic = sine(add(matmul(t, p.freq), p.phase))
    feats = concat([linear, periodic], axis=1)
    return add(matmul(feats, p.proj), p.bias)


@dataclass
class ValueEmbedParams(_ParamBlock):
    """Three value views (nonlinear, raw-linear, signed-log) fused by gates."""

    w_nl1: Tensor
    b_nl1: Tensor
    w_nl2: Tensor
    b_nl2: Tensor
    w_raw: Tensor
    b_raw: Tensor
    log_scale: Tensor
    w_log: Tensor
    b_log: Tensor
    w_gate: Tensor
    b_gate: Tensor
    w_out: Tensor
    b_out: Tensor
    ln_gain: Tensor
    ln_bias: Tensor


def init_value_embed(rng: np.random.Generator, d_model: int, std: float) -> ValueEmbedParams:
    dv = d_model
    return ValueEmbedParams(
        w_nl1=parameter(trunc_normal(rng, (1, dv), std)),
        b_nl1=parameter(np.zeros(dv)),
        w_nl2=parameter(trunc_normal(rng, (dv, dv), std)),
        b_nl2=parameter(np.zeros(dv)),
        w_raw=parameter(trunc_normal(rng, (1, dv), std)),
        b_raw=parameter(np.zeros(dv)),
        log_scale=parameter(np.ones((1, 1))),
        w_log=parameter(trunc_normal(rng, (1, dv), std)),
        b_log=parameter(np.zeros(dv)),
        w_gate=parameter(trunc_normal(rng, (3 * dv, 3), std)),
        b_gate=parameter(np.zeros(3)),
        w_out=parameter(trunc_normal(rng, (dv, d_model), std)),
        b_out=parameter(np.zeros(d_model)),
        ln_gain=parameter(np.ones(d_model)),
        ln_bias=parameter(np.zeros(d_model)),
    )


# constant column selectors for the three gate scalars
_GATE_COLS = [constant(np.eye(3)[:, i : i + 1]) for i in range(3)]


def embed_value(
    values: np.ndarray,
    p: ValueEmbedParams,
    gelu_form: str = "erf",
    log_eps: float = 1e-6,
    ln_eps: float = 1e-5,
) -> Tensor:
    """Gated mixture of value views for (L,) raw values -> (L, d_model)."""
    v = constant(np.asarray(values, dtype=np.float64).reshape(-1, 1))
    e_nl = add(matmul(gelu(add(matmul(v, p.w_nl1), p.b_nl1), gelu_form), p.w_nl2), p.b_nl2)
    e_raw = add(matmul(v, p.w_raw), p.b_raw)
    v_log = mul(signed_log1p(v, log_eps), p.log_scale)
    e_log = add(matmul(v_log, p.w_log), p.b_log)
    gates = sigmoid(add(matmul(concat([e_nl, e_raw, e_log], axis=1), p.w_gate), p.b_gate))
    g1 = matmul(gates, _GATE_COLS[0])
    g2 = matmul(gates, _GATE_COLS[1])
    g3 = matmul(gates, _GATE_COLS[2])
    mixed = add(add(mul(e_nl, g1), mul(e_raw, g2)), mul(e_log, g3))
    return layer_norm(add(matmul(mixed, p.w_out), p.b_out), p.ln_gain, p.ln_bias, ln_eps)


@dataclass
class EmbeddingParams(_ParamBlock):
    event_table: Tensor
    unit_table: Tensor
    order_name_table: Tensor
    order_desc_table: Tensor
    age_table: Tensor
    gender_table: Tensor
    position_table: Tensor
    t2v: Time2VecParams
    value: ValueEmbedParams
    mask_event: Tensor
    mask_value: Tensor
    mask_unit: Tensor
    mask_time: Tensor
    mask_order_name: Tensor
    mask_order_desc: Tensor


def init_embedding_params(rng: np.random.Generator, vocab: Vocabulary, cfg: ModelConfig) -> EmbeddingParams:
    std = cfg.init_std
    d = cfg.d_model

    def table(attr: str) -> Tensor:
        return parameter(trunc_normal(rng, (vocab.size(attr), d), std))

    return EmbeddingParams(
        event_table=table("event_name"),
        unit_table=table("unit"),
        order_name_table=table("order_name"),
        order_desc_table=table("order_desc"),
        age_table=table("age"),
        gender_table=table("gender"),
        position_table=parameter(trunc_normal(rng, (cfg.max_tokens, d), std)),
        t2v=init_time2vec(rng, cfg.t2v_freqs, d, std),
        value=init_value_embed(rng, d, std),
        mask_event=parameter(trunc_normal(rng, (1, d), std)),
        mask_value=parameter(trunc_normal(rng, (1, d), std)),
        mask_unit=parameter(trunc_normal(rng, (1, d), std)),
        mask_time=parameter(trunc_normal(rng, (1, d), std)),
        mask_order_name=parameter(trunc_normal(rng, (1, d), std)),
        mask_order_desc=parameter(trunc_normal(rng, (1, d), std)),
    )


@dataclass
class ComposedSequence:
    """Embedded rows plus the masks the encoder needs."""

    embedded: Tensor  # (T, d)
    valid: np.ndarray  # (T,) bool; False marks padding rows
    global_rows: np.ndarray  # indices with global attention (the specials)
    n_events: int
    event_rows: np.ndarray  # row index of each event (offset by the specials)


def _presence(comp: Tensor, present: np.ndarray) -> Tensor:
    if present.all():
        return comp
    return mul(comp, constant(present.astype(np.float64).reshape(-1, 1)))


def _substitute(comp: Tensor, mask: np.ndarray | None, vec: Tensor) -> Tensor:
    """Replace rows flagged in ``mask`` by the learned mask vector."""
    if mask is None or not mask.any():
        return comp
    m = mask.astype(np.float64).reshape(-1, 1)
    kept = mul(comp, constant(1.0 - m))
    subbed = mul(vec, constant(m))
    return add(kept, subbed)


def assemble_sequence(
    enc: EncodedStay,
    p: EmbeddingParams,
    cfg: ModelConfig,
    mep_mask: np.ndarray | None = None,
    vp_mask: np.ndarray | None = None,
    ablate: Sequence[str] = (),
    pad_to: int | None = None,
) -> ComposedSequence:
    """Compose per-event embeddings and prepend the special rows.

    ``mep_mask``/``vp_mask`` are (L,) booleans over events. Ablated
    components are omitted from the sum entirely (exact zero contribution).
    """
    ablate = frozenset(ablate)
    unknown = ablate - set(ABLATABLE_COMPONENTS)
    if unknown:
        raise ValueError(f"unknown ablation components {sorted(unknown)}")
    L = enc.length
    total = 3 + L
    if total > cfg.max_tokens:
        raise ValueError(
            f"sequence length {total} exceeds max_tokens {cfg.max_tokens}; truncate first"
        )
    if L and enc.positions.max() >= cfg.max_tokens:
        raise ValueError(
            f"position {int(enc.positions.max())} exceeds the position table "
            f"({cfg.max_tokens} rows)"
        )

    value_mask = None
    if mep_mask is not None or vp_mask is not None:
        value_mask = np.zeros(L, dtype=bool)
        if mep_mask is not None:
            value_mask |= mep_mask
        if vp_mask is not None:
            value_mask |= vp_mask

    comp_event = _substitute(take_rows(p.event_table, enc.event_ids), mep_mask, p.mask_event)
    parts = [comp_event]
    if "value" not in ablate:
        comp = _presence(embed_value(enc.values, p.value, cfg.gelu_form, cfg.log_eps, cfg.ln_eps), enc.has_value)
        parts.append(_substitute(comp, value_mask, p.mask_value))
    if "unit" not in ablate:
        comp = _presence(take_rows(p.unit_table, enc.unit_ids), enc.has_unit)
        parts.append(_substitute(comp, mep_mask, p.mask_unit))
    if "time" not in ablate:
        comp = embed_time(enc.offsets_days, p.t2v)
        parts.append(_substitute(comp, mep_mask, p.mask_time))
    if "position" not in ablate:
        parts.append(take_rows(p.position_table, enc.positions))
    if "order_name" not in ablate:
        comp = _presence(take_rows(p.order_name_table, enc.order_name_ids), enc.has_order_name)
        parts.append(_substitute(comp, mep_mask, p.mask_order_name))
    if "order_desc" not in ablate:
        comp = _presence(take_rows(p.order_desc_table, enc.order_desc_ids), enc.has_order_desc)
        parts.append(_substitute(comp, mep_mask, p.mask_order_desc))

    events = parts[0]
    for part in parts[1:]:
        events = add(events, part)

    cls_row = take_rows(p.event_table, np.array([Vocabulary.CLS_ID]))
    age_row = take_rows(p.age_table, np.array([enc.age_id]))
    gender_row = take_rows(p.gender_table, np.array([enc.gender_id]))
    rows = [cls_row, age_row, gender_row]
    if L:
        rows.append(events)

    if pad_to is not None:
        if pad_to < total:
            raise ValueError(f"pad_to {pad_to} < sequence length {total}")
        if pad_to > total:
            rows.append(constant(np.zeros((pad_to - total, cfg.d_model))))
        T = pad_to
    else:
        T = total
    embedded = concat(rows, axis=0) if len(rows) > 1 else rows[0]
    valid = np.zeros(T, dtype=bool)
    valid[:total] = True
    return ComposedSequence(
        embedded=embedded,
        valid=valid,
        global_rows=np.arange(3),
        n_events=L,
        event_rows=3 + np.arange(L),
    )
