"""Command-line entry points.

Every experiment subcommand writes delimited CSV output plus a run
manifest under ``--out``; ``report`` renders PNG figures from those CSVs.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config, masking_from_identifier, save_config
from .experiments import (
    export_representations,
    generate_data,
    run_ablation,
    run_eval_experiment,
    run_finetune_experiment,
    run_masking_sweep,
    run_pretrain_experiment,
    run_ratio_sweep,
)

log = logging.getLogger(__name__)


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.pretrain.seed = args.seed
        cfg.finetune.seed = args.seed
        cfg.synth.seed = args.seed
    return cfg


def _add_common(p: argparse.ArgumentParser, data: bool = True, out: bool = True) -> None:
    p.add_argument("--config", type=Path, default=None, help="experiment config YAML")
    p.add_argument("--seed", type=int, default=None, help="override all run seeds")
    if data:
        p.add_argument("--data", type=Path, required=True, help="cohort directory")
    if out:
        p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icuseq")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a cohort directory")
    _add_common(p, data=False)
    p.add_argument("--stays", type=int, default=None, help="override cohort size")

    p = sub.add_parser("pretrain", help="masked-event/value pretraining")
    _add_common(p)
    p.add_argument("--masking", type=str, default=None, help="ratio identifier, e.g. 30/30/30/05")

    p = sub.add_parser("finetune", help="multi-task finetuning")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="pretrained checkpoint")
    p.add_argument("--tasks", type=str, default=None, help="comma-separated task subset")
    p.add_argument("--label-fraction", type=float, default=None)

    p = sub.add_parser("eval", help="evaluate a finetuned checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("sweep-masking", help="pretrain across masking ratios")
    _add_common(p)

    p = sub.add_parser("sweep-ratio", help="finetune across label fractions")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="pretrained checkpoint")
    p.add_argument("--fractions", type=str, default=None, help="comma-separated fractions")
    p.add_argument("--seeds", type=str, default=None, help="comma-separated seeds")

    p = sub.add_parser("ablate", help="embedding-component ablation")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--components", type=str, default=None, help="comma-separated components")

    p = sub.add_parser("export-repr", help="export pooled representations")
    _add_common(p, out=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out-file", type=Path, required=True)

    p = sub.add_parser("report", help="render figures from run CSVs")
    p.add_argument("--run", type=Path, required=True, help="run directory to scan")
    p.add_argument("--out", type=Path, default=None, help="figure directory (default: beside CSVs)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )

    if args.command == "gen-data":
        cfg = _load_cfg(args)
        if args.stays is not None:
            cfg.synth.n_stays = args.stays
        path = generate_data(args.out, cfg)
        save_config(cfg, Path(args.out) / "config.yaml")
        print(path)
        return 0

    if args.command == "pretrain":
        cfg = _load_cfg(args)
        mask_cfg = masking_from_identifier(args.masking, cfg.masking) if args.masking else None
        result = run_pretrain_experiment(args.data, cfg, args.out, mask_cfg)
        print(f"best epoch {result.best_epoch}; history rows {len(result.history)}")
        return 0

    if args.command == "finetune":
        cfg = _load_cfg(args)
        if args.tasks:
            cfg.finetune.tasks = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
        if args.label_fraction is not None:
            cfg.finetune.label_fraction = args.label_fraction
        result = run_finetune_experiment(args.data, cfg, args.out, args.checkpoint)
        print(f"best epoch {result.best_epoch}")
        return 0

    if args.command == "eval":
        cfg = _load_cfg(args)
        metrics = run_eval_experiment(args.data, cfg, args.out, args.checkpoint)
        for task in sorted(metrics):
            m = metrics[task]
            shown = m.get("auroc", m.get("auroc_macro"))
            print(f"{task}: n={m.get('n')} auroc={shown}")
        return 0

    if args.command == "sweep-masking":
        cfg = _load_cfg(args)
        print(run_masking_sweep(args.data, cfg, args.out))
        return 0

    if args.command == "sweep-ratio":
        cfg = _load_cfg(args)
        fracs = tuple(float(x) for x in args.fractions.split(",")) if args.fractions else None
        seeds = tuple(int(x) for x in args.seeds.split(",")) if args.seeds else None
        print(run_ratio_sweep(args.data, cfg, args.out, args.checkpoint, fracs, seeds))
        return 0

    if args.command == "ablate":
        cfg = _load_cfg(args)
        comps = tuple(c.strip() for c in args.components.split(",")) if args.components else None
        print(run_ablation(args.data, cfg, args.out, args.checkpoint, comps))
        return 0

    if args.command == "export-repr":
        cfg = _load_cfg(args)
        print(export_representations(args.data, cfg, args.checkpoint, args.out_file))
        return 0

    if args.command == "report":
        from .report import render_run_dir

        written = render_run_dir(args.run, args.out)
        for p in written:
            print(p)
        if not written:
            log.warning("no recognized CSV artifacts under %s", args.run)
        return 0

    raise AssertionError(f"unhandled command {args.command}")  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
