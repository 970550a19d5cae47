"""Self-supervised pretraining: masked-event prediction (all attributes of
selected events are hidden) plus value prediction on a small set of
continuous variables. The two losses combine as total = event + lambda * value,
each normalized by its own masked count across the batch.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, add, constant, cross_entropy_loss, mse_loss, mul, no_grad, scale, sub, tensor_sum
from .config import MaskingConfig, PretrainConfig
from .data import Vocabulary
from .model import PretrainHeads, SequenceModel
from .optim import AdamW, clip_grad_norm, cosine_lr
from .pipeline import EncodedStay, stay_seed

__all__ = [
    "MaskPlan",
    "round_half_up",
    "select_masks",
    "vp_event_id_array",
    "masked_event_loss",
    "value_prediction_loss",
    "combined_pretrain_loss",
    "PretrainResult",
    "run_pretraining",
]

log = logging.getLogger(__name__)

SOURCE_TYPE_OF_RATIO = {"chart": 0, "medication": 1, "procedure": 2}


def round_half_up(x: float) -> int:
    """Half-up rounding for mask counts (0.5 rounds toward +inf)."""
    return int(math.floor(x + 0.5))


@dataclass
class MaskPlan:
    """Boolean event masks: ``mep`` hides whole events, ``vp`` only values."""

    mep: np.ndarray
    vp: np.ndarray

    @property
    def n_mep(self) -> int:
        return int(self.mep.sum())

    @property
    def n_vp(self) -> int:
        return int(self.vp.sum())


def vp_event_id_array(vocab: Vocabulary, cfg: MaskingConfig) -> np.ndarray:
    """Event-vocabulary ids of the value-maskable variables."""
    ids = [vocab.encode("event_name", name) for name in cfg.vp_variables]
    return np.asarray([i for i in ids if i != Vocabulary.UNK_ID], dtype=np.int64)


def select_masks(
    enc: EncodedStay,
    cfg: MaskingConfig,
    rng: np.random.Generator,
    vp_ids: np.ndarray,
) -> MaskPlan:
    """Draw the per-sequence masking plan.

    Per source type, round_half_up(ratio * count) events are hidden
    uniformly without replacement. Value masking then samples from events
    that are not already hidden, carry a value, and belong to the
    value-variable list; the two sets are disjoint by construction.
    """
    L = enc.length
    mep = np.zeros(L, dtype=bool)
    ratios = {
        SOURCE_TYPE_OF_RATIO["chart"]: cfg.ratio_chart,
        SOURCE_TYPE_OF_RATIO["medication"]: cfg.ratio_medication,
        SOURCE_TYPE_OF_RATIO["procedure"]: cfg.ratio_procedure,
    }
    for type_id in sorted(ratios):
        ratio = ratios[type_id]
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
        idx = np.flatnonzero(enc.type_ids == type_id)
        k = min(round_half_up(ratio * len(idx)), len(idx))
        if k > 0:
            mep[rng.choice(idx, size=k, replace=False)] = True
    vp = np.zeros(L, dtype=bool)
    if cfg.vp_ratio > 0.0 and vp_ids.size:
        candidates = (~mep) & enc.has_value & np.isin(enc.event_ids, vp_ids)
        vp = candidates & (rng.random(L) < cfg.vp_ratio)
    return MaskPlan(mep=mep, vp=vp)


def masked_event_loss(logits: Tensor | None, target_ids: np.ndarray) -> Tensor:
    """Mean NLL of the true event identity over masked events (0 when empty)."""
    if logits is None or len(target_ids) == 0:
        return constant(0.0)
    return cross_entropy_loss(logits, target_ids, reduction="mean")


def value_prediction_loss(preds: Tensor | None, targets: np.ndarray) -> Tensor:
    """Mean squared error over value-masked events (0 when empty)."""
    if preds is None or np.size(targets) == 0:
        return constant(0.0)
    return mse_loss(preds, np.asarray(targets, dtype=np.float64).reshape(preds.shape))


def combined_pretrain_loss(event_loss: Tensor, value_loss: Tensor, vp_weight: float) -> Tensor:
    return add(event_loss, scale(value_loss, vp_weight))


@dataclass
class PretrainResult:
    history: list[dict]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    stopped_early: bool


class _EpochStats:
    def __init__(self) -> None:
        self.ce_sum = 0.0
        self.se_sum = 0.0
        self.n_mep = 0
        self.n_vp = 0
        self.hits = {0: 0, 1: 0, 2: 0}
        self.totals = {0: 0, 1: 0, 2: 0}

    def add_mep(self, ce_sum: float, logits: np.ndarray, targets: np.ndarray, types: np.ndarray) -> None:
        self.ce_sum += ce_sum
        self.n_mep += len(targets)
        pred = logits.argmax(axis=1)
        for t in (0, 1, 2):
            sel = types == t
            self.totals[t] += int(sel.sum())
            self.hits[t] += int((pred[sel] == targets[sel]).sum())

    def add_vp(self, se_sum: float, n: int) -> None:
        self.se_sum += se_sum
        self.n_vp += n

    def precision(self, type_id: int | None = None) -> float | None:
        if type_id is None:
            total = sum(self.totals.values())
            hits = sum(self.hits.values())
        else:
            total = self.totals[type_id]
            hits = self.hits[type_id]
        return hits / total if total else None

    def losses(self, vp_weight: float) -> tuple[float, float, float]:
        mep = self.ce_sum / self.n_mep if self.n_mep else 0.0
        vp = self.se_sum / self.n_vp if self.n_vp else 0.0
        return mep + vp_weight * vp, mep, vp


def _squared_error_sum(preds: Tensor, targets: np.ndarray) -> Tensor:
    diff = sub(preds, constant(targets.reshape(preds.shape)))
    return tensor_sum(mul(diff, diff))


def _plan_rng(seed: int, sid: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, stay_seed(sid), epoch])


def _forward_batch(
    model: SequenceModel,
    heads: PretrainHeads,
    encs: Sequence[EncodedStay],
    plans: Sequence[MaskPlan],
    vp_weight: float,
    stats: _EpochStats,
    training: bool,
    drop_rng: np.random.Generator | None,
) -> tuple[Tensor, int, int]:
    """Pooled batch loss: sum CE / total K + lambda * sum SE / total K_v."""
    ce_terms: list[Tensor] = []
    se_terms: list[Tensor] = []
    n_mep = 0
    n_vp = 0
    for enc, plan in zip(encs, plans):
        seq, hidden = model.forward_stay(
            enc, mep_mask=plan.mep, vp_mask=plan.vp, training=training, rng=drop_rng
        )
        if plan.n_mep:
            rows = seq.event_rows[plan.mep]
            targets = enc.event_ids[plan.mep]
            logits = heads.event_logits(hidden, rows)
            ce = cross_entropy_loss(logits, targets, reduction="sum")
            ce_terms.append(ce)
            n_mep += plan.n_mep
            stats.add_mep(float(ce.data), logits.data, targets, enc.type_ids[plan.mep])
        if plan.n_vp:
            rows = seq.event_rows[plan.vp]
            targets = enc.values[plan.vp]
            preds = heads.value_preds(hidden, rows)
            se = _squared_error_sum(preds, targets)
            se_terms.append(se)
            n_vp += plan.n_vp
            stats.add_vp(float(se.data), plan.n_vp)
    loss = constant(0.0)
    if ce_terms:
        total_ce = ce_terms[0]
        for t in ce_terms[1:]:
            total_ce = add(total_ce, t)
        loss = add(loss, scale(total_ce, 1.0 / n_mep))
    if se_terms:
        total_se = se_terms[0]
        for t in se_terms[1:]:
            total_se = add(total_se, t)
        loss = add(loss, scale(total_se, vp_weight / n_vp))
    return loss, n_mep, n_vp


def _evaluate(
    model: SequenceModel,
    heads: PretrainHeads,
    encs: Sequence[EncodedStay],
    mask_cfg: MaskingConfig,
    seed: int,
    vp_ids: np.ndarray,
    vp_weight: float,
) -> _EpochStats:
    stats = _EpochStats()
    with no_grad():
        for enc in encs:
            plan = select_masks(enc, mask_cfg, _plan_rng(seed, enc.stay_id, 2**31), vp_ids)
            _forward_batch(model, heads, [enc], [plan], vp_weight, stats, False, None)
    return stats


def run_pretraining(
    train: Sequence[EncodedStay],
    val: Sequence[EncodedStay],
    model: SequenceModel,
    heads: PretrainHeads,
    mask_cfg: MaskingConfig,
    cfg: PretrainConfig,
) -> PretrainResult:
    """AdamW + cosine decay over ``cfg.epochs``; best checkpoint by val loss."""
    vp_ids = vp_event_id_array(model.vocab, mask_cfg)
    params = list(model.parameters()) + heads.parameters()
    opt = AdamW(
        [{"params": params, "lr": cfg.lr}],
        betas=tuple(cfg.betas),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    order_rng = np.random.default_rng([cfg.seed, 1])
    steps_per_epoch = max(1, math.ceil(len(train) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    min_ratio = cfg.min_lr / cfg.lr if cfg.lr > 0 else 0.0

    history: list[dict] = []
    best_state: dict[str, np.ndarray] = {}
    best_val = math.inf
    best_epoch = -1
    stopped = False
    step = 0
    named = dict(model.named_parameters())
    named.update(dict(heads.named_parameters()))

    for epoch in range(cfg.epochs):
        stats = _EpochStats()
        perm = order_rng.permutation(len(train))
        drop_rng = np.random.default_rng([cfg.seed, 2, epoch])
        for lo in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in perm[lo : lo + cfg.batch_size]]
            plans = [
                select_masks(enc, mask_cfg, _plan_rng(cfg.seed, enc.stay_id, epoch), vp_ids)
                for enc in batch
            ]
            opt.set_lr_factor(cosine_lr(step, total_steps, 1.0, min_ratio))
            opt.zero_grad()
            loss, n_mep, _ = _forward_batch(
                model, heads, batch, plans, cfg.vp_weight, stats, True, drop_rng
            )
            if n_mep == 0 and float(loss.data) == 0.0:
                log.warning("batch with no masked events at step %d (loss flagged 0)", step)
            if loss._backward is not None or loss.requires_grad:
                loss.backward()
                if cfg.clip_norm > 0:
                    clip_grad_norm(params, cfg.clip_norm)
                opt.step()
            step += 1
        val_stats = _evaluate(model, heads, val, mask_cfg, cfg.seed, vp_ids, cfg.vp_weight)
        train_total, train_mep, train_vp = stats.losses(cfg.vp_weight)
        val_total, val_mep, val_vp = val_stats.losses(cfg.vp_weight)
        row = {
            "epoch": epoch,
            "lr": opt.groups[0]["lr"],
            "train_loss": train_total,
            "train_event_loss": train_mep,
            "train_value_loss": train_vp,
            "val_loss": val_total,
            "val_event_loss": val_mep,
            "val_value_loss": val_vp,
            "train_masked_events": stats.n_mep,
            "train_masked_values": stats.n_vp,
            "empty_mask_flag": int(stats.n_mep == 0),
        }
        for label, tid in (("chart", 0), ("medication", 1), ("procedure", 2)):
            row[f"train_precision_{label}"] = stats.precision(tid)
            row[f"val_precision_{label}"] = val_stats.precision(tid)
        row["train_precision_all"] = stats.precision()
        row["val_precision_all"] = val_stats.precision()
        history.append(row)
        log.info(
            "epoch %d loss %.4f val %.4f precision %.3f",
            epoch, train_total, val_total, row["train_precision_all"] or 0.0,
        )
        if val and val_total < best_val:
            best_val = val_total
            best_epoch = epoch
            best_state = {k: v.data.copy() for k, v in named.items()}
        prec = row["train_precision_all"]
        if cfg.stop_at_precision > 0 and prec is not None and prec >= cfg.stop_at_precision:
            stopped = True
            break
    if not best_state:
        best_epoch = len(history) - 1
        best_state = {k: v.data.copy() for k, v in named.items()}
    return PretrainResult(history, best_state, best_epoch, stopped)
