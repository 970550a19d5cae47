"""Experiment configuration: typed sections, YAML IO, stable hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

__all__ = [
    "ModelConfig",
    "WindowConfig",
    "MaskingConfig",
    "PretrainConfig",
    "FinetuneConfig",
    "SynthConfig",
    "SweepConfig",
    "ExperimentConfig",
    "load_config",
    "save_config",
    "config_hash",
    "DEFAULT_VP_VARIABLES",
]

# the eleven continuous variables eligible for value-prediction masking
DEFAULT_VP_VARIABLES = (
    "HR",
    "RR",
    "SaO2",
    "ABPs",
    "ABPd",
    "Temperature",
    "WBC",
    "Sodium",
    "Potassium",
    "HCO3",
    "Hemoglobin",
)


@dataclass
class ModelConfig:
    """Embedding + encoder sizes.

    Defaults are desk scale; the reference full-scale configuration is
    d_model=512, n_layers=6, n_heads=8, d_ff=1024, window=256 (one-sided),
    max_tokens=4096, t2v_freqs=63.
    """

    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    window: int = 16  # one-sided neighborhood half-width
    max_tokens: int = 256  # total sequence cap including the 3 special rows
    t2v_freqs: int = 15
    dropout: float = 0.1
    ln_eps: float = 1e-5
    gelu_form: str = "erf"  # "erf" (exact) or "tanh" (approximation)
    log_eps: float = 1e-6
    init_std: float = 0.02

    @property
    def max_events(self) -> int:
        # three rows are reserved for [CLS]/[AGE]/[GENDER]
        return self.max_tokens - 3

    @property
    def d_head(self) -> int:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        return self.d_model // self.n_heads


@dataclass
class WindowConfig:
    observation_hours: float = 24.0
    gap_hours: float = 12.0
    truncation_mode: str = "last"  # first | last | whole_only
    min_events: int = 10

    @property
    def prediction_hour(self) -> float:
        return self.observation_hours + self.gap_hours


@dataclass
class MaskingConfig:
    """Masked-event ratios per source type plus the value-mask ratio."""

    ratio_chart: float = 0.30
    ratio_medication: float = 0.30  # applied to source_type == "input"
    ratio_procedure: float = 0.30
    vp_ratio: float = 0.05
    vp_variables: tuple[str, ...] = DEFAULT_VP_VARIABLES

    def identifier(self) -> str:
        """Sweep label, e.g. ``30/30/30/05``."""
        return "/".join(
            f"{int(round(r * 100)):02d}"
            for r in (self.ratio_chart, self.ratio_medication, self.ratio_procedure, self.vp_ratio)
        )


def masking_from_identifier(ident: str, base: "MaskingConfig | None" = None) -> "MaskingConfig":
    """Inverse of :meth:`MaskingConfig.identifier` (percent fields / 100)."""
    parts = ident.split("/")
    if len(parts) != 4 or not all(p.isdigit() for p in parts):
        raise ValueError(f"bad masking identifier {ident!r} (want 'CC/MM/PP/VV')")
    chart, med, proc, vp = (int(p) / 100.0 for p in parts)
    vp_vars = base.vp_variables if base is not None else DEFAULT_VP_VARIABLES
    return MaskingConfig(
        ratio_chart=chart, ratio_medication=med, ratio_procedure=proc,
        vp_ratio=vp, vp_variables=vp_vars,
    )


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    vp_weight: float = 0.001  # lambda on the value-prediction term
    val_fraction: float = 0.10
    test_fraction: float = 0.0
    seed: int = 0
    clip_norm: float = 0.0  # 0 disables clipping
    stop_at_precision: float = 0.0  # early stop once train precision reaches this (0 = never)


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 8
    encoder_lr: float = 5e-5
    head_lr: float = 2e-4
    min_lr: float = 0.0
    weight_decay: float = 0.01
    head_dropout: float = 0.1
    label_fraction: float = 1.0  # rho: fraction of train stays keeping labels
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    seed: int = 0
    clip_norm: float = 0.0
    tasks: tuple[str, ...] = ()  # empty = all tasks


@dataclass
class SynthConfig:
    n_stays: int = 256
    seed: int = 7
    mean_events: int = 90
    type_mix: tuple[float, float, float] = (0.9255, 0.0696, 0.0049)
    n_extra_chart: int = 8  # background chart variables beyond the clinical core
    phenotype_bits: int = 25
    phenotype_rate: float = 0.12  # per-bit probability a stay carries the pattern
    n_dose_pairs: int = 6  # value-routed dose/flag pairs planted per stay
    shock_rate: float = 0.5
    mortality_rate: float = 0.2
    readmission_rate: float = 0.3
    min_los_days: float = 2.0
    max_los_days: float = 4.0
    burst_jitter_seconds: float = 30.0


@dataclass
class SweepConfig:
    masking_configs: tuple[str, ...] = (
        "30/30/30/00",
        "30/30/30/05",
        "30/30/30/10",
        "30/30/30/15",
        "30/15/30/05",
        "20/15/20/15",
    )
    label_fractions: tuple[float, ...] = (0.0, 0.01, 0.05, 0.1, 0.3, 0.5, 1.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    ablate_components: tuple[str, ...] = (
        "value",
        "unit",
        "time",
        "position",
        "order_name",
        "order_desc",
    )
    ablation_task: str = "shock_8h"


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    age_bin_years: int = 5

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls()
        for section_name, value in d.items():
            if not hasattr(cfg, section_name):
                raise ValueError(f"unknown config section {section_name!r}")
            current = getattr(cfg, section_name)
            if dataclasses.is_dataclass(current):
                fields = {f.name: f for f in dataclasses.fields(current)}
                for k, v in value.items():
                    if k not in fields:
                        raise ValueError(f"unknown key {k!r} in section {section_name!r}")
                    if isinstance(getattr(current, k), tuple) and isinstance(v, list):
                        v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
                    setattr(current, k, v)
            else:
                setattr(cfg, section_name, value)
        return cfg


def _plain(obj):
    """Recursively convert tuples to lists for YAML/JSON friendliness."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return ExperimentConfig.from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def config_hash(cfg: ExperimentConfig | dict) -> str:
    """Stable sha256 over the canonical JSON form."""
    d = cfg.to_dict() if isinstance(cfg, ExperimentConfig) else _plain(cfg)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
