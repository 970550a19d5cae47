"""Multi-task fine-tuning on pooled sequence representations.

Every active task gets a linear head over the pooled vector. The batch
loss sums, per task, the mean BCE (binary), mean CE (multiclass), or
element-mean BCE (multilabel) over the stays whose label is available;
unavailable labels contribute zero loss and are skipped in metrics.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy import special as _special

from .autodiff import (
    Tensor,
    add,
    bce_with_logits_loss,
    concat,
    constant,
    cross_entropy_loss,
    dropout,
    no_grad,
    scale,
)
from .config import FinetuneConfig, ModelConfig
from .labels import TASK_SPECS, TaskSpec
from .metrics import auprc, auroc, multilabel_metrics, one_vs_rest_metrics, softmax_probs
from .model import LinearHead, SequenceModel
from .optim import AdamW, clip_grad_norm, cosine_lr
from .pipeline import EncodedStay

__all__ = [
    "LabeledStay",
    "TaskHeadSet",
    "multitask_loss",
    "FinetuneResult",
    "run_finetune",
    "evaluate_tasks",
    "zero_shot_eval",
    "subsample_labels",
]

log = logging.getLogger(__name__)


@dataclass
class LabeledStay:
    enc: EncodedStay
    labels: dict[str, object] = field(default_factory=dict)

    def label(self, task: str):
        return self.labels.get(task)


class TaskHeadSet:
    """One linear readout per active task."""

    def __init__(
        self,
        rng: np.random.Generator,
        model_cfg: ModelConfig,
        tasks: Sequence[str],
        head_dropout: float = 0.0,
    ):
        self.tasks = tuple(tasks)
        self.head_dropout = head_dropout
        self.heads: dict[str, LinearHead] = {}
        for task in self.tasks:
            spec = TASK_SPECS[task]
            self.heads[task] = LinearHead(rng, model_cfg.d_model, spec.n_outputs, model_cfg.init_std)

    def logits(
        self,
        pooled: Tensor,
        task: str,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        x = pooled
        if training and self.head_dropout > 0:
            x = dropout(x, self.head_dropout, rng, training)
        return self.heads[task](x)

    def named_parameters(self, prefix: str = "task_heads.") -> Iterator[tuple[str, Tensor]]:
        for task in self.tasks:
            yield from self.heads[task].named_parameters(f"{prefix}{task}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def load_state(self, params: Mapping[str, np.ndarray], prefix: str = "task_heads.") -> None:
        own = dict(self.named_parameters(prefix))
        for name, tensor in own.items():
            if name not in params:
                raise ValueError(f"missing head parameter {name}")
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            tensor.data = arr.copy()
            tensor.grad = None


def multitask_loss(
    per_task_logits: Mapping[str, list[Tensor]],
    per_task_labels: Mapping[str, list],
) -> tuple[Tensor, dict[str, float]]:
    """Sum of per-task losses over available labels.

    Binary tasks use mean BCE over stays; multiclass tasks mean CE;
    the multilabel task averages BCE over all N*C elements.
    """
    total = constant(0.0)
    parts: dict[str, float] = {}
    for task, logit_list in per_task_logits.items():
        labels = per_task_labels[task]
        if not logit_list:
            continue
        spec: TaskSpec = TASK_SPECS[task]
        stacked = concat(logit_list, axis=0) if len(logit_list) > 1 else logit_list[0]
        if spec.kind == "binary":
            y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
            term = bce_with_logits_loss(stacked, y, reduction="mean")
        elif spec.kind == "multiclass":
            term = cross_entropy_loss(stacked, np.asarray(labels, dtype=np.int64), reduction="mean")
        elif spec.kind == "multilabel":
            y = np.stack([np.asarray(b, dtype=np.float64) for b in labels])
            term = bce_with_logits_loss(stacked, y, reduction="mean")
        else:
            raise ValueError(f"unknown task kind {spec.kind!r}")
        parts[task] = float(term.data)
        total = add(total, term)
    return total, parts


def subsample_labels(
    stays: Sequence[LabeledStay], fraction: float, seed: int
) -> list[LabeledStay]:
    """Keep labels on a ``fraction`` of stays (the supervision-ratio knob)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"label fraction must be in [0, 1], got {fraction}")
    n_keep = int(round(len(stays) * fraction))
    perm = np.random.default_rng([seed, 77]).permutation(len(stays))
    keep = set(perm[:n_keep].tolist())
    return [s for i, s in enumerate(stays) if i in keep]


def _forward_pooled(
    model: SequenceModel,
    stay: LabeledStay,
    training: bool,
    rng: np.random.Generator | None,
    ablate: tuple[str, ...] = (),
) -> Tensor:
    seq, hidden = model.forward_stay(stay.enc, training=training, rng=rng, ablate=ablate)
    return model.pool_hidden(seq, hidden)


def _batch_loss(
    model: SequenceModel,
    heads: TaskHeadSet,
    batch: Sequence[LabeledStay],
    training: bool,
    rng: np.random.Generator | None,
    ablate: tuple[str, ...] = (),
) -> tuple[Tensor, dict[str, float]]:
    per_logits: dict[str, list[Tensor]] = {t: [] for t in heads.tasks}
    per_labels: dict[str, list] = {t: [] for t in heads.tasks}
    for stay in batch:
        avail = [t for t in heads.tasks if stay.label(t) is not None]
        if not avail:
            continue
        pooled = _forward_pooled(model, stay, training, rng, ablate)
        for task in avail:
            per_logits[task].append(heads.logits(pooled, task, training, rng))
            per_labels[task].append(stay.label(task))
    return multitask_loss(per_logits, per_labels)


def evaluate_tasks(
    model: SequenceModel,
    heads: TaskHeadSet,
    stays: Sequence[LabeledStay],
    ablate: tuple[str, ...] = (),
) -> dict[str, dict]:
    """Per-task ranking metrics over stays with available labels."""
    scores: dict[str, list[np.ndarray]] = {t: [] for t in heads.tasks}
    labels: dict[str, list] = {t: [] for t in heads.tasks}
    with no_grad():
        for stay in stays:
            avail = [t for t in heads.tasks if stay.label(t) is not None]
            if not avail:
                continue
            pooled = _forward_pooled(model, stay, False, None, ablate)
            for task in avail:
                scores[task].append(heads.logits(pooled, task).data[0])
                labels[task].append(stay.label(task))
    out: dict[str, dict] = {}
    for task in heads.tasks:
        spec = TASK_SPECS[task]
        n = len(labels[task])
        entry: dict = {"task": task, "kind": spec.kind, "n": n}
        if n == 0:
            out[task] = entry
            continue
        raw = np.stack(scores[task])
        y = labels[task]
        if spec.kind == "binary":
            probs = _special.expit(raw[:, 0])
            entry["auroc"] = auroc(probs, np.asarray(y))
            entry["auprc"] = auprc(probs, np.asarray(y))
        elif spec.kind == "multiclass":
            probs = softmax_probs(raw)
            entry.update(one_vs_rest_metrics(probs, np.asarray(y), spec.n_outputs))
        else:
            probs = _special.expit(raw)
            entry.update(multilabel_metrics(probs, np.stack(y)))
        out[task] = entry
    return out


def zero_shot_eval(
    model: SequenceModel,
    heads: TaskHeadSet,
    stays: Sequence[LabeledStay],
) -> dict[str, dict]:
    """Deterministic evaluation without any finetuning (dropout disabled)."""
    return evaluate_tasks(model, heads, stays)


def _selection_score(metrics: dict[str, dict]) -> float | None:
    vals = [
        m["auroc"]
        for m in metrics.values()
        if m.get("kind") == "binary" and m.get("auroc") is not None
    ]
    return float(np.mean(vals)) if vals else None


@dataclass
class FinetuneResult:
    history: list[dict]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    val_metrics: dict[str, dict]
    test_metrics: dict[str, dict]


def run_finetune(
    train: Sequence[LabeledStay],
    val: Sequence[LabeledStay],
    test: Sequence[LabeledStay],
    model: SequenceModel,
    heads: TaskHeadSet,
    cfg: FinetuneConfig,
    ablate: tuple[str, ...] = (),
) -> FinetuneResult:
    """Two LR groups (encoder vs heads), cosine decay, best epoch by the
    mean validation AUROC over binary tasks (val loss as fallback)."""
    labeled = subsample_labels(train, cfg.label_fraction, cfg.seed)
    encoder_params = list(model.parameters())
    head_params = heads.parameters()
    opt = AdamW(
        [
            {"params": encoder_params, "lr": cfg.encoder_lr},
            {"params": head_params, "lr": cfg.head_lr},
        ],
        weight_decay=cfg.weight_decay,
    )
    named = dict(model.named_parameters())
    named.update(dict(heads.named_parameters()))

    steps_per_epoch = max(1, math.ceil(len(labeled) / cfg.batch_size)) if labeled else 1
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    min_ratio = cfg.min_lr / cfg.encoder_lr if cfg.encoder_lr > 0 else 0.0
    order_rng = np.random.default_rng([cfg.seed, 3])

    history: list[dict] = []
    best_state = {k: v.data.copy() for k, v in named.items()}
    best_score = -math.inf
    best_epoch = -1
    step = 0

    n_epochs = cfg.epochs if labeled else 0
    for epoch in range(n_epochs):
        perm = order_rng.permutation(len(labeled))
        drop_rng = np.random.default_rng([cfg.seed, 4, epoch])
        train_losses = []
        for lo in range(0, len(labeled), cfg.batch_size):
            batch = [labeled[i] for i in perm[lo : lo + cfg.batch_size]]
            opt.set_lr_factor(cosine_lr(step, total_steps, 1.0, min_ratio))
            opt.zero_grad()
            loss, _ = _batch_loss(model, heads, batch, True, drop_rng, ablate)
            train_losses.append(float(loss.data))
            if loss._backward is not None or loss.requires_grad:
                loss.backward()
                if cfg.clip_norm > 0:
                    clip_grad_norm(encoder_params + head_params, cfg.clip_norm)
                opt.step()
            step += 1
        with no_grad():
            val_loss, _ = _batch_loss(model, heads, val, False, None, ablate) if val else (constant(0.0), {})
        val_metrics = evaluate_tasks(model, heads, val, ablate)
        score = _selection_score(val_metrics)
        effective = score if score is not None else -float(val_loss.data)
        history.append(
            {
                "epoch": epoch,
                "lr_encoder": opt.groups[0]["lr"],
                "lr_heads": opt.groups[1]["lr"],
                "train_loss": float(np.mean(train_losses)) if train_losses else 0.0,
                "val_loss": float(val_loss.data),
                "val_score": score,
            }
        )
        if effective > best_score:
            best_score = effective
            best_epoch = epoch
            best_state = {k: v.data.copy() for k, v in named.items()}
        log.info("finetune epoch %d loss %.4f val score %s", epoch, history[-1]["train_loss"], score)

    # restore the selected checkpoint before final evaluation
    for k, tensor in named.items():
        tensor.data = best_state[k].copy()
        tensor.grad = None
    val_metrics = evaluate_tasks(model, heads, val, ablate)
    test_metrics = evaluate_tasks(model, heads, test, ablate)
    return FinetuneResult(history, best_state, best_epoch, val_metrics, test_metrics)
