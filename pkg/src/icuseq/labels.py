"""Task registry and label derivation for the downstream benchmark.

Eighteen tasks: eleven binary outcomes, six 4-class organ-severity scores
(classes 0, 1, 2, >=3), and one 25-bit multilabel phenotype. Labels are
derived relative to a prediction point (observation + gap hours). Windows
are half-open [start, end). A task whose trigger fires inside the gap, or
whose required inputs are absent, gets label ``None`` (unavailable): it
contributes zero loss and is excluded from metrics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .data import ClinicalEvent, StayRecord
from .pipeline import HOURS_PER_DAY
from .config import WindowConfig

__all__ = [
    "TaskSpec",
    "TASK_SPECS",
    "TASK_NAMES",
    "BINARY_TASKS",
    "MULTICLASS_TASKS",
    "MULTILABEL_TASKS",
    "SOFA_SYSTEMS",
    "N_SOFA_CLASSES",
    "TaskRules",
    "load_task_rules",
    "default_rules_path",
    "derive_sofa_class",
    "derive_shock_label",
    "derive_window_labels",
]

N_SOFA_CLASSES = 4
N_PHENOTYPE_BITS = 25

SOFA_SYSTEMS = ("respiratory", "coagulation", "liver", "cardiovascular", "cns", "renal")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str  # binary | multiclass | multilabel
    n_outputs: int


def _specs() -> dict[str, TaskSpec]:
    specs = [
        TaskSpec("mortality_30d", "binary", 1),
        TaskSpec("mortality_hospital", "binary", 1),
        TaskSpec("mortality_icu", "binary", 1),
        TaskSpec("mortality_48h", "binary", 1),
        TaskSpec("los_gt_3d", "binary", 1),
        TaskSpec("los_gt_7d", "binary", 1),
        TaskSpec("readmission_30d", "binary", 1),
        TaskSpec("transfusion_12h", "binary", 1),
        TaskSpec("vasopressor_12h", "binary", 1),
        TaskSpec("ventilation_12h", "binary", 1),
        TaskSpec("shock_8h", "binary", 1),
    ]
    specs += [TaskSpec(f"sofa_{s}", "multiclass", N_SOFA_CLASSES) for s in SOFA_SYSTEMS]
    specs.append(TaskSpec("phenotype", "multilabel", N_PHENOTYPE_BITS))
    return {s.name: s for s in specs}


TASK_SPECS: dict[str, TaskSpec] = _specs()
TASK_NAMES: tuple[str, ...] = tuple(TASK_SPECS)
BINARY_TASKS = tuple(n for n, s in TASK_SPECS.items() if s.kind == "binary")
MULTICLASS_TASKS = tuple(n for n, s in TASK_SPECS.items() if s.kind == "multiclass")
MULTILABEL_TASKS = tuple(n for n, s in TASK_SPECS.items() if s.kind == "multilabel")


@dataclass
class TaskRules:
    """Event-name sets and thresholds driving label derivation.

    ``sofa_rules`` maps each organ system to a rule list; a rule is
    ``{"variable": name, "direction": "high"|"low", "thresholds": [t1, t2, t3]}``.
    Crossing threshold k (inclusive) puts the stay in class >= k+1; the
    window label is the maximum class any event reaches.
    """

    vasopressor_names: tuple[str, ...] = ()
    transfusion_names: tuple[str, ...] = ()
    ventilation_names: tuple[str, ...] = ()
    lactate_name: str = "Lactate"
    map_name: str = "MAP"
    lactate_threshold: float = 2.0
    map_threshold: float = 65.0
    shock_bucket_hours: float = 1.0
    shock_horizon_hours: float = 8.0
    intervention_horizon_hours: float = 12.0
    sofa_window_hours: float = 24.0
    sofa_rules: dict[str, list[dict]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "vasopressor_names": list(self.vasopressor_names),
            "transfusion_names": list(self.transfusion_names),
            "ventilation_names": list(self.ventilation_names),
            "lactate_name": self.lactate_name,
            "map_name": self.map_name,
            "lactate_threshold": self.lactate_threshold,
            "map_threshold": self.map_threshold,
            "shock_bucket_hours": self.shock_bucket_hours,
            "shock_horizon_hours": self.shock_horizon_hours,
            "intervention_horizon_hours": self.intervention_horizon_hours,
            "sofa_window_hours": self.sofa_window_hours,
            "sofa_rules": self.sofa_rules,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskRules":
        kwargs = dict(d)
        for key in ("vasopressor_names", "transfusion_names", "ventilation_names"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def default_rules_path() -> Path:
    return Path(__file__).parent / "assets" / "task_rules.yaml"


def load_task_rules(path: str | Path | None = None) -> TaskRules:
    with open(path or default_rules_path(), "r", encoding="utf-8") as fh:
        return TaskRules.from_dict(yaml.safe_load(fh))


def _in_window(ev: ClinicalEvent, start_h: float, end_h: float) -> bool:
    h = ev.offset_days * HOURS_PER_DAY
    return start_h <= h < end_h


def derive_sofa_class(
    events: Iterable[ClinicalEvent],
    rules: Sequence[Mapping],
    start_hour: float,
    window_hours: float,
) -> int | None:
    """Worst severity class reached inside the window; None without any
    measurement of the system's variables."""
    end = start_hour + window_hours
    variables = {r["variable"] for r in rules}
    seen = False
    worst = 0
    for ev in events:
        if ev.name not in variables or ev.value is None:
            continue
        if not _in_window(ev, start_hour, end):
            continue
        seen = True
        for rule in rules:
            if rule["variable"] != ev.name:
                continue
            thresholds = rule["thresholds"]
            if len(thresholds) != N_SOFA_CLASSES - 1:
                raise ValueError(
                    f"rule for {rule['variable']} needs {N_SOFA_CLASSES - 1} thresholds"
                )
            cls = 0
            for k, t in enumerate(thresholds):
                crossed = ev.value >= t if rule["direction"] == "high" else ev.value <= t
                if crossed:
                    cls = k + 1
            worst = max(worst, cls)
    return worst if seen else None


def _shock_condition(
    events: Sequence[ClinicalEvent],
    rules: TaskRules,
    start_h: float,
    end_h: float,
) -> bool:
    """Lactate and MAP cross thresholds within the same time bucket, or any
    vasopressor event occurs."""
    lact_buckets: set[int] = set()
    map_buckets: set[int] = set()
    for ev in events:
        if not _in_window(ev, start_h, end_h):
            continue
        if ev.name in rules.vasopressor_names:
            return True
        if ev.value is None:
            continue
        bucket = int((ev.offset_days * HOURS_PER_DAY - start_h) // rules.shock_bucket_hours)
        if ev.name == rules.lactate_name and ev.value >= rules.lactate_threshold:
            lact_buckets.add(bucket)
        elif ev.name == rules.map_name and ev.value <= rules.map_threshold:
            map_buckets.add(bucket)
    return bool(lact_buckets & map_buckets)


def derive_shock_label(
    stay: StayRecord,
    rules: TaskRules,
    prediction_hour: float,
    gap_start_hour: float,
) -> int | None:
    """Shock onset within the horizon; None when the condition already
    held inside the gap."""
    if _shock_condition(stay.events, rules, gap_start_hour, prediction_hour):
        return None
    end = prediction_hour + rules.shock_horizon_hours
    return int(_shock_condition(stay.events, rules, prediction_hour, end))


def _intervention_label(
    stay: StayRecord,
    names: tuple[str, ...],
    prediction_hour: float,
    gap_start_hour: float,
    horizon_hours: float,
) -> int | None:
    if any(
        ev.name in names and _in_window(ev, gap_start_hour, prediction_hour)
        for ev in stay.events
    ):
        return None
    hit = any(
        ev.name in names and _in_window(ev, prediction_hour, prediction_hour + horizon_hours)
        for ev in stay.events
    )
    return int(hit)


def derive_window_labels(
    stay: StayRecord,
    window: WindowConfig,
    rules: TaskRules,
) -> dict[str, object]:
    """All 18 task labels for one stay; None marks an unavailable label."""
    raw = stay.raw_labels
    t_p = window.prediction_hour
    gap_start = window.observation_hours
    labels: dict[str, object] = {name: None for name in TASK_NAMES}

    los_days = raw.get("los_days")
    if los_days is not None:
        labels["los_gt_3d"] = int(float(los_days) > 3.0)
        labels["los_gt_7d"] = int(float(los_days) > 7.0)

    death_offset = raw.get("death_offset_days")
    died_before_prediction = (
        death_offset is not None and float(death_offset) * HOURS_PER_DAY < t_p
    )
    if not died_before_prediction:
        if "mortality_icu" in raw:
            labels["mortality_icu"] = int(raw["mortality_icu"])
        if "mortality_hospital" in raw:
            labels["mortality_hospital"] = int(raw["mortality_hospital"])
        if death_offset is not None:
            labels["mortality_48h"] = int(
                float(death_offset) * HOURS_PER_DAY < t_p + 48.0
            )
        elif "mortality_hospital" in raw or "mortality_icu" in raw:
            labels["mortality_48h"] = 0
        hosp_offset = raw.get("hosp_admit_offset_days")
        if "mortality_hospital" in raw and hosp_offset is not None:
            if int(raw["mortality_hospital"]) and death_offset is not None:
                labels["mortality_30d"] = int(
                    float(death_offset) + float(hosp_offset) <= 30.0
                )
            else:
                labels["mortality_30d"] = 0

    gap_days = raw.get("next_stay_gap_days")
    if gap_days is not None:
        labels["readmission_30d"] = int(float(gap_days) <= 30.0)

    stay_covers_prediction = (
        los_days is not None and float(los_days) * HOURS_PER_DAY >= t_p
    )
    if stay_covers_prediction and not died_before_prediction:
        h = rules.intervention_horizon_hours
        labels["transfusion_12h"] = _intervention_label(
            stay, rules.transfusion_names, t_p, gap_start, h
        )
        labels["vasopressor_12h"] = _intervention_label(
            stay, rules.vasopressor_names, t_p, gap_start, h
        )
        labels["ventilation_12h"] = _intervention_label(
            stay, rules.ventilation_names, t_p, gap_start, h
        )
        labels["shock_8h"] = derive_shock_label(stay, rules, t_p, gap_start)
        for system in SOFA_SYSTEMS:
            sys_rules = rules.sofa_rules.get(system, [])
            if sys_rules:
                labels[f"sofa_{system}"] = derive_sofa_class(
                    stay.events, sys_rules, t_p, rules.sofa_window_hours
                )

    pheno = raw.get("phenotype")
    if pheno is not None:
        bits = np.asarray(pheno, dtype=np.int64)
        if bits.shape != (N_PHENOTYPE_BITS,):
            raise ValueError(
                f"phenotype block must have {N_PHENOTYPE_BITS} bits, got {bits.shape}"
            )
        labels["phenotype"] = bits
    return labels
