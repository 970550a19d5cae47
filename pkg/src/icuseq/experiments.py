"""End-to-end experiment drivers and their delimited outputs.

Every run writes CSV artifacts plus a ``run_manifest.yaml`` recording the
command, config hash, seed, and artifact version; reruns with identical
inputs reproduce the CSV bytes exactly (no timestamps, canonical float
formatting).
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import ExperimentConfig, MaskingConfig, config_hash, masking_from_identifier
from .data import StayRecord, Vocabulary, build_vocabulary
from .finetune import (
    FinetuneResult,
    LabeledStay,
    TaskHeadSet,
    run_finetune,
    zero_shot_eval,
)
from .labels import TASK_NAMES, TASK_SPECS, TaskRules, derive_window_labels
from .model import PretrainHeads, SequenceModel, load_model_checkpoint, save_model_checkpoint
from .pipeline import (
    clean_events,
    encode_stay,
    filter_min_events,
    segment_stay,
    split_stays,
    truncate_stay,
    window_events,
)
from .pretrain import run_pretraining
from .synth import load_manifest, write_cohort

__all__ = [
    "fmt_cell",
    "write_csv",
    "write_run_manifest",
    "Cohort",
    "load_cohort",
    "prepare_pretrain_sets",
    "prepare_finetune_sets",
    "run_pretrain_experiment",
    "run_finetune_experiment",
    "run_eval_experiment",
    "run_masking_sweep",
    "run_ratio_sweep",
    "run_ablation",
    "export_representations",
]

log = logging.getLogger(__name__)


def fmt_cell(v) -> str:
    """Canonical CSV cell text (repr floats, empty for missing)."""
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_cell(v) for v in row])


def write_run_manifest(out_dir: Path, command: str, cfg: ExperimentConfig, inputs: dict) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": {"pretrain": cfg.pretrain.seed, "finetune": cfg.finetune.seed, "synth": cfg.synth.seed},
        "artifact_version": __version__,
        "inputs": {k: str(v) for k, v in inputs.items()},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_manifest.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=True)


class Cohort:
    """A loaded data directory: cleaned stays, vocabulary, rules."""

    def __init__(self, stays: list[StayRecord], bounds: dict, rules: TaskRules, vocab: Vocabulary):
        self.stays = stays
        self.bounds = bounds
        self.rules = rules
        self.vocab = vocab


def load_cohort(data_dir: str | Path, cfg: ExperimentConfig) -> Cohort:
    stays, bounds, rules, _ = load_manifest(data_dir)
    cleaned = [clean_events(s, bounds) for s in stays]
    kept = filter_min_events(cleaned, cfg.window.min_events)
    vocab = build_vocabulary(kept)
    return Cohort(kept, bounds, rules, vocab)


def prepare_pretrain_sets(cohort: Cohort, cfg: ExperimentConfig):
    """Whole-stay sequences; long train stays are segmented, val is truncated."""
    max_events = cfg.model.max_events
    train, val, _ = split_stays(
        cohort.stays,
        cfg.pretrain.val_fraction,
        cfg.pretrain.test_fraction,
        cfg.pretrain.seed,
        max_events=max_events,
    )
    train_seqs = [seg for stay in train for seg in segment_stay(stay, max_events)]
    val_seqs = [truncate_stay(stay, max_events, "last") for stay in val]
    train_encs = [encode_stay(s, cohort.vocab) for s in train_seqs]
    val_encs = [encode_stay(s, cohort.vocab) for s in val_seqs]
    return train_encs, val_encs


def prepare_finetune_sets(cohort: Cohort, cfg: ExperimentConfig):
    """Observation-window inputs with labels derived from the full stay."""
    labeled: list[tuple[StayRecord, dict]] = []
    for stay in cohort.stays:
        labels = derive_window_labels(stay, cfg.window, cohort.rules)
        windowed = window_events(stay, cfg.window.observation_hours)
        truncated = truncate_stay(windowed, cfg.model.max_events, cfg.window.truncation_mode)
        if truncated is None or not truncated.events:
            continue
        labeled.append((truncated, labels))
    by_id = {s.stay_id: (s, lb) for s, lb in labeled}
    train_s, val_s, test_s = split_stays(
        [s for s, _ in labeled],
        cfg.finetune.val_fraction,
        cfg.finetune.test_fraction,
        cfg.finetune.seed,
    )

    def to_labeled(stays):
        return [
            LabeledStay(encode_stay(s, cohort.vocab), by_id[s.stay_id][1]) for s in stays
        ]

    return to_labeled(train_s), to_labeled(val_s), to_labeled(test_s)


def _history_csv(path: Path, history: list[dict]) -> None:
    if not history:
        write_csv(path, ["epoch"], [])
        return
    header = list(history[0].keys())
    write_csv(path, header, [[row.get(k) for k in header] for row in history])


def run_pretrain_experiment(
    data_dir: Path,
    cfg: ExperimentConfig,
    out_dir: Path,
    mask_cfg: MaskingConfig | None = None,
    tag: str = "",
):
    """Pretrain on a cohort; writes history.csv and the best checkpoint."""
    out_dir = Path(out_dir)
    cohort = load_cohort(data_dir, cfg)
    train_encs, val_encs = prepare_pretrain_sets(cohort, cfg)
    mask_cfg = mask_cfg or cfg.masking
    model = SequenceModel(cfg.model, cohort.vocab, seed=cfg.pretrain.seed)
    heads = PretrainHeads(np.random.default_rng([cfg.pretrain.seed, 5]), cfg.model, cohort.vocab)
    result = run_pretraining(train_encs, val_encs, model, heads, mask_cfg, cfg.pretrain)
    model.load_state(
        {k: v for k, v in result.best_state.items() if not k.startswith("pretrain_heads.")}
    )
    suffix = f"_{tag}" if tag else ""
    head_named = {}
    for name, tensor in heads.named_parameters():
        tensor.data = result.best_state[name].copy()
        head_named[name] = tensor
    save_model_checkpoint(
        out_dir / f"pretrained{suffix}.ckpt",
        model,
        head_named,
        extra={"kind": "pretrain", "masking": mask_cfg.identifier(), "best_epoch": result.best_epoch},
    )
    _history_csv(out_dir / f"pretrain_history{suffix}.csv", result.history)
    write_run_manifest(out_dir, "pretrain", cfg, {"data": data_dir})
    return result


def _metric_rows(metrics: dict[str, dict]) -> list[list]:
    rows = []
    for task in TASK_NAMES:
        if task not in metrics:
            continue
        m = metrics[task]
        rows.append([
            task,
            m.get("kind"),
            m.get("n"),
            m.get("auroc"),
            m.get("auprc"),
            m.get("auroc_macro"),
            m.get("auroc_micro"),
            m.get("auprc_macro"),
            m.get("auprc_micro"),
        ])
    return rows


_METRIC_HEADER = [
    "task", "kind", "n", "auroc", "auprc",
    "auroc_macro", "auroc_micro", "auprc_macro", "auprc_micro",
]


def _model_from_checkpoint_or_fresh(
    checkpoint: Path | None, cfg: ExperimentConfig, cohort: Cohort, seed: int
) -> SequenceModel:
    if checkpoint is not None:
        model, _, _ = load_model_checkpoint(checkpoint)
        return model
    return SequenceModel(cfg.model, cohort.vocab, seed=seed)


def run_finetune_experiment(
    data_dir: Path,
    cfg: ExperimentConfig,
    out_dir: Path,
    checkpoint: Path | None = None,
    ablate: tuple[str, ...] = (),
    tag: str = "",
) -> FinetuneResult:
    """Fine-tune all 18 task heads; writes history + val/test metric CSVs."""
    out_dir = Path(out_dir)
    cohort = load_cohort(data_dir, cfg)
    train, val, test = prepare_finetune_sets(cohort, cfg)
    model = _model_from_checkpoint_or_fresh(checkpoint, cfg, cohort, cfg.finetune.seed)
    tasks = tuple(cfg.finetune.tasks) or TASK_NAMES
    heads = TaskHeadSet(
        np.random.default_rng([cfg.finetune.seed, 6]),
        model.cfg,
        tasks,
        cfg.finetune.head_dropout,
    )
    result = run_finetune(train, val, test, model, heads, cfg.finetune, ablate=ablate)
    suffix = f"_{tag}" if tag else ""
    head_named = dict(heads.named_parameters())
    save_model_checkpoint(
        out_dir / f"finetuned{suffix}.ckpt",
        model,
        head_named,
        extra={
            "kind": "finetune",
            "tasks": list(tasks),
            "ablate": list(ablate),
            "best_epoch": result.best_epoch,
        },
    )
    _history_csv(out_dir / f"finetune_history{suffix}.csv", result.history)
    write_csv(out_dir / f"metrics_val{suffix}.csv", _METRIC_HEADER, _metric_rows(result.val_metrics))
    write_csv(out_dir / f"metrics_test{suffix}.csv", _METRIC_HEADER, _metric_rows(result.test_metrics))
    write_run_manifest(out_dir, "finetune", cfg, {"data": data_dir, "checkpoint": checkpoint or "none"})
    return result


def run_eval_experiment(
    data_dir: Path,
    cfg: ExperimentConfig,
    out_dir: Path,
    checkpoint: Path,
) -> dict[str, dict]:
    """Zero-shot evaluation of a finetuned checkpoint on the test split."""
    out_dir = Path(out_dir)
    cohort = load_cohort(data_dir, cfg)
    _, _, test = prepare_finetune_sets(cohort, cfg)
    model, head_params, ckpt = load_model_checkpoint(checkpoint)
    tasks = tuple(ckpt.extra.get("tasks") or TASK_NAMES)
    heads = TaskHeadSet(np.random.default_rng(0), model.cfg, tasks, 0.0)
    heads.load_state(head_params)
    metrics = zero_shot_eval(model, heads, test)
    write_csv(out_dir / "metrics_eval.csv", _METRIC_HEADER, _metric_rows(metrics))
    write_run_manifest(out_dir, "eval", cfg, {"data": data_dir, "checkpoint": checkpoint})
    return metrics


def run_masking_sweep(
    data_dir: Path,
    cfg: ExperimentConfig,
    out_dir: Path,
    identifiers: tuple[str, ...] | None = None,
) -> Path:
    """Pretrain once per masking configuration; one CSV row per config."""
    out_dir = Path(out_dir)
    identifiers = identifiers or tuple(cfg.sweep.masking_configs)
    rows = []
    for ident in identifiers:
        mask_cfg = masking_from_identifier(ident, cfg.masking)
        tag = ident.replace("/", "-")
        result = run_pretrain_experiment(data_dir, cfg, out_dir, mask_cfg, tag=tag)
        last = result.history[-1]
        rows.append([
            ident,
            len(result.history),
            result.best_epoch,
            last["val_loss"],
            last["val_event_loss"],
            last["val_value_loss"],
            last["val_precision_chart"],
            last["val_precision_medication"],
            last["val_precision_procedure"],
            last["val_precision_all"],
        ])
    path = out_dir / "masking_sweep.csv"
    write_csv(
        path,
        [
            "masking", "epochs", "best_epoch", "val_loss", "val_event_loss", "val_value_loss",
            "precision_chart", "precision_medication", "precision_procedure", "precision_all",
        ],
        rows,
    )
    write_run_manifest(out_dir, "sweep-masking", cfg, {"data": data_dir})
    return path


def run_ratio_sweep(
    data_dir: Path,
    cfg: ExperimentConfig,
    out_dir: Path,
    checkpoint: Path | None,
    fractions: tuple[float, ...] | None = None,
    seeds: tuple[int, ...] | None = None,
    inits: tuple[str, ...] = ("pretrained", "random"),
) -> Path:
    """Label-fraction sweep; each row is (fraction, seed, init, task metrics)."""
    import copy

    out_dir = Path(out_dir)
    fractions = fractions or tuple(cfg.sweep.label_fractions)
    seeds = seeds or tuple(cfg.sweep.seeds)
    if checkpoint is None:
        inits = ("random",)
    rows = []
    for frac in fractions:
        for seed in seeds:
            for init in inits:
                run_cfg = copy.deepcopy(cfg)
                run_cfg.finetune.label_fraction = float(frac)
                run_cfg.finetune.seed = int(seed)
                ckpt = checkpoint if init == "pretrained" else None
                tag = f"r{int(round(frac * 100)):03d}_s{seed}_{init}"
                result = run_finetune_experiment(
                    data_dir, run_cfg, out_dir / "runs", checkpoint=ckpt, tag=tag
                )
                for task, m in result.test_metrics.items():
                    rows.append([
                        frac, seed, init, task, m.get("kind"), m.get("n"),
                        m.get("auroc"), m.get("auprc"),
                        m.get("auroc_macro"), m.get("auroc_micro"),
                        m.get("auprc_macro"), m.get("auprc_micro"),
                    ])
    path = out_dir / "ratio_sweep.csv"
    write_csv(
        path,
        ["label_fraction", "seed", "init", "task", "kind", "n",
         "auroc", "auprc", "auroc_macro", "auroc_micro", "auprc_macro", "auprc_micro"],
        rows,
    )
    write_run_manifest(out_dir, "sweep-ratio", cfg, {"data": data_dir, "checkpoint": checkpoint or "none"})
    return path


def run_ablation(
    data_dir: Path,
    cfg: ExperimentConfig,
    out_dir: Path,
    checkpoint: Path | None = None,
    components: tuple[str, ...] | None = None,
) -> Path:
    """Base run plus one run per ablated component; emits the delta table."""
    out_dir = Path(out_dir)
    components = components or tuple(cfg.sweep.ablate_components)
    base = run_finetune_experiment(data_dir, cfg, out_dir / "runs", checkpoint, tag="base")
    base_metrics = {t: m for t, m in base.test_metrics.items()}

    def metric_of(m: dict) -> float | None:
        if m.get("kind") == "binary":
            return m.get("auroc")
        return m.get("auroc_macro")

    rows = []
    for task, m in base_metrics.items():
        rows.append(["none", task, m.get("kind"), metric_of(m), None])
    for comp in components:
        result = run_finetune_experiment(
            data_dir, cfg, out_dir / "runs", checkpoint, ablate=(comp,), tag=f"no_{comp}"
        )
        for task, m in result.test_metrics.items():
            base_v = metric_of(base_metrics.get(task, {}))
            v = metric_of(m)
            delta = (v - base_v) if (v is not None and base_v is not None) else None
            rows.append([comp, task, m.get("kind"), v, delta])
    path = out_dir / "ablation.csv"
    write_csv(path, ["ablated", "task", "kind", "auroc", "delta_auroc"], rows)
    write_run_manifest(out_dir, "ablate", cfg, {"data": data_dir, "checkpoint": checkpoint or "none"})
    return path


def export_representations(
    data_dir: Path,
    cfg: ExperimentConfig,
    checkpoint: Path,
    out_file: Path,
) -> Path:
    """Pooled representation per stay with its available labels."""
    out_file = Path(out_file)
    cohort = load_cohort(data_dir, cfg)
    model, _, _ = load_model_checkpoint(checkpoint)
    train, val, test = prepare_finetune_sets(cohort, cfg)
    header = ["stay_id", "split"]
    header += [f"r_{i:03d}" for i in range(model.cfg.d_model)]
    header += [t for t in TASK_NAMES]
    rows = []
    from .autodiff import no_grad

    for split, stays in (("train", train), ("val", val), ("test", test)):
        with no_grad():
            for stay in stays:
                seq, hidden = model.forward_stay(stay.enc)
                pooled = model.pool_hidden(seq, hidden).data[0]
                row = [stay.enc.stay_id, split] + [float(v) for v in pooled]
                for task in TASK_NAMES:
                    val_label = stay.label(task)
                    if val_label is None:
                        row.append(None)
                    elif TASK_SPECS[task].kind == "multilabel":
                        row.append("".join(str(int(b)) for b in val_label))
                    else:
                        row.append(int(val_label))
                rows.append(row)
    write_csv(out_file, header, rows)
    return out_file


def generate_data(out_dir: Path, cfg: ExperimentConfig) -> Path:
    """gen-data entry: synthesize a cohort directory."""
    path = write_cohort(out_dir, cfg.synth, cfg)
    write_run_manifest(Path(out_dir), "gen-data", cfg, {})
    return path
