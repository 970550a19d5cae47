"""Synthetic ICU-style cohort generator.

Events come from small co-occurring templates ("bursts") whose members fire
~30 seconds apart in a fixed order, so a hidden member's identity is
deterministically inferable from its unmasked neighbors. Several signals
are planted so downstream rules reproduce them exactly:

* a value-dependent binary outcome: latent shock status shifts Lactate/MAP
  values in the observation window and plants the rule trigger (threshold
  pair in one bucket, or a vasopressor event) inside the prediction window;
* a 4-class outcome: Creatinine values are drawn inside one severity band,
  in the observation window and the scoring window alike;
* 25 identity-dependent phenotype bits via rare marker events;
* value-routed pairs: each ``dose_rate``/``drip_rate`` event is followed by
  a flag event whose identity encodes which side of a threshold the rate
  value fell on, so masked event prediction has to read a neighbor's numeric
  value. The two rate families straddle the same value ranges the planted
  outcomes use, which keeps the value code sharp exactly where labels need
  it instead of letting identity-only cues dominate.

Per-event source-type frequencies track a configurable chart/input/procedure
mix through deficit-greedy background filling.
"""
from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .config import ExperimentConfig, SynthConfig
from .data import ClinicalEvent, StayRecord, assign_positions, build_vocabulary, parse_stay_file, serialize_stay
from .labels import TaskRules, load_task_rules
from .pipeline import HOURS_PER_DAY

__all__ = [
    "BURST_GAP_DAYS",
    "Latents",
    "Template",
    "Catalog",
    "build_catalog",
    "generate_stay",
    "generate_cohort",
    "write_cohort",
    "load_manifest",
]

BURST_GAP_DAYS = 30.0 / 86400.0  # template members fire 30 s apart

_OBS_END_H = 24.0
_PRED_H = 36.0  # observation + gap

# variable, low flag, high flag, low value band, high value band; the bands
# sit either side of the Lactate (2.0) and MAP (≈68) decision points
_DOSE_FAMILIES = (
    ("dose_rate", "dose_low", "dose_high", (0.8, 1.6), (2.6, 3.8)),
    ("drip_rate", "drip_low", "drip_high", (52.0, 62.0), (72.0, 84.0)),
)


@dataclass
class Latents:
    shock: int
    renal: int
    resp: int
    coag: int
    liver: int
    cns: int
    bits: np.ndarray
    los_hours: float


@dataclass(frozen=True)
class Template:
    name: str
    source_type: str
    members: tuple[str, ...]


ValueFn = Callable[[np.random.Generator, Latents, float], float | None]


@dataclass
class Catalog:
    templates: dict[str, Template]
    background: dict[str, list[tuple[str, float]]]  # source_type -> weighted templates
    bounds: dict[str, tuple[float, float]]
    value_fn: dict[str, ValueFn]
    units: dict[str, str]
    order_info: dict[str, tuple[str, str]]  # name -> (order_name, order_desc)
    marker_names: tuple[str, ...]


def _norm(mu: float, sd: float, lo: float, hi: float) -> ValueFn:
    def fn(rng: np.random.Generator, lat: Latents, hour: float) -> float:
        return float(np.clip(rng.normal(mu, sd), lo, hi))

    return fn


def _band(cls_of: Callable[[Latents], int], bands: Sequence[tuple[float, float]]) -> ValueFn:
    def fn(rng: np.random.Generator, lat: Latents, hour: float) -> float:
        lo, hi = bands[cls_of(lat)]
        return float(rng.uniform(lo, hi))

    return fn


def _lactate(rng: np.random.Generator, lat: Latents, hour: float) -> float:
    if lat.shock and hour < _OBS_END_H:
        return float(np.clip(rng.normal(3.2, 0.5), 2.1, 4.5))
    if lat.shock and hour >= _PRED_H:
        return float(np.clip(rng.normal(3.0, 0.3), 2.1, 4.0))
    # non-shock stays, and every gap-window draw, stay clearly below threshold
    return float(np.clip(rng.normal(1.0, 0.25), 0.2, 1.8))


def _map_pressure(rng: np.random.Generator, lat: Latents, hour: float) -> float:
    if lat.shock and hour < _OBS_END_H:
        return float(np.clip(rng.normal(58.0, 5.0), 45.0, 64.0))
    if lat.shock and hour >= _PRED_H:
        return float(np.clip(rng.normal(56.0, 5.0), 45.0, 64.0))
    if lat.shock:
        return float(np.clip(rng.normal(70.0, 6.0), 66.0, 90.0))
    return float(np.clip(rng.normal(78.0, 6.0), 66.0, 100.0))


def _gcs(rng: np.random.Generator, lat: Latents, hour: float) -> float:
    choices = ((15, 15), (13, 14), (10, 12), (4, 9))
    lo, hi = choices[lat.cns]
    return float(rng.integers(lo, hi + 1))


def build_catalog(cfg: SynthConfig) -> Catalog:
    templates: dict[str, Template] = {}
    value_fn: dict[str, ValueFn] = {}
    units: dict[str, str] = {}
    order_info: dict[str, tuple[str, str]] = {}
    bounds: dict[str, tuple[float, float]] = {}

    def add(
        tname: str,
        stype: str,
        members: Sequence[tuple[str, str | None, ValueFn | None, tuple[float, float] | None]],
        order: tuple[str, str] | None = None,
    ) -> None:
        names = tuple(m[0] for m in members)
        templates[tname] = Template(tname, stype, names)
        for name, unit, fn, bnd in members:
            if unit is not None:
                units[name] = unit
            if fn is not None:
                value_fn[name] = fn
            if bnd is not None:
                bounds[name] = bnd
            if order is not None:
                order_info[name] = order

    add("vitals", "chart", [
        ("HR", "bpm", _norm(80, 10, 35, 150), (30.0, 170.0)),
        ("RR", "insp/min", _norm(18, 4, 6, 40), (4.0, 50.0)),
        ("SaO2", "%", _norm(97, 1.5, 85, 100), (70.0, 100.0)),
        ("ABPs", "mmHg", _norm(120, 15, 75, 190), (60.0, 220.0)),
        ("ABPd", "mmHg", _norm(70, 10, 40, 110), (30.0, 130.0)),
        ("Temperature", "C", _norm(37.0, 0.5, 34.5, 40.0), (33.0, 42.0)),
    ])
    add("labs", "chart", [
        ("WBC", "K/uL", _norm(9, 2.5, 1.5, 25), (0.5, 40.0)),
        ("Sodium", "mmol/L", _norm(140, 4, 120, 158), (110.0, 170.0)),
        ("Potassium", "mmol/L", _norm(4.1, 0.4, 2.6, 6.2), (2.0, 7.5)),
        ("HCO3", "mmol/L", _norm(24, 3, 12, 38), (8.0, 45.0)),
        ("Hemoglobin", "g/dL", _norm(11, 1.5, 6, 17), (4.0, 20.0)),
    ])
    add("gas", "chart", [
        ("PaO2", "mmHg", _norm(90, 12, 45, 140), (30.0, 180.0)),
        ("FiO2", "frac", _norm(0.45, 0.12, 0.21, 0.95), (0.15, 1.0)),
        ("pH", "", _norm(7.38, 0.05, 7.1, 7.6), (6.9, 7.8)),
        ("PaO2FiO2", "mmHg", _band(
            lambda lat: lat.resp,
            [(410, 520), (310, 395), (210, 295), (80, 195)],
        ), (40.0, 600.0)),
    ])
    add("organ", "chart", [
        ("Platelets", "K/uL", _band(
            lambda lat: lat.coag,
            [(160, 330), (104, 148), (54, 98), (12, 48)],
        ), (5.0, 400.0)),
        ("Bilirubin", "mg/dL", _band(
            lambda lat: lat.liver,
            [(0.3, 1.1), (1.25, 1.95), (2.1, 5.8), (6.2, 12.0)],
        ), (0.1, 15.0)),
        ("GCS", "score", _gcs, (3.0, 15.0)),
    ])
    add("shock_panel", "chart", [
        ("Lactate", "mmol/L", _lactate, (0.1, 6.0)),
        ("MAP", "mmHg", _map_pressure, (40.0, 110.0)),
    ])
    add("renal_panel", "chart", [
        ("Creatinine", "mg/dL", _band(
            lambda lat: lat.renal,
            [(0.5, 1.1), (1.25, 1.95), (2.05, 3.45), (3.55, 5.5)],
        ), (0.2, 8.0)),
        ("BUN", "mg/dL", _band(
            lambda lat: lat.renal,
            [(8, 16), (17, 26), (27, 38), (39, 58)],
        ), (3.0, 80.0)),
    ])

    aux = [
        (f"aux_{i:02d}", "au", _norm(50 + 5 * i, 8, 5, 140), (0.0, 180.0))
        for i in range(cfg.n_extra_chart)
    ]
    for start in range(0, len(aux), 3):
        group = aux[start : start + 3]
        if group:
            add(f"aux_t{start // 3}", "chart", group)

    add("sedation", "input", [
        ("med_propofol", "mg/hr", _norm(40, 12, 5, 100), (0.0, 150.0)),
        ("med_fentanyl", "mcg/hr", _norm(75, 20, 10, 200), (0.0, 300.0)),
    ], order=("ord_sedation", "continuous sedation infusion"))
    add("fluids", "input", [
        ("fluid_saline", "mL/hr", _norm(110, 30, 20, 250), (0.0, 400.0)),
        ("fluid_ringers", "mL/hr", _norm(95, 25, 20, 220), (0.0, 400.0)),
    ], order=("ord_fluids", "maintenance fluid infusion"))
    add("radiology", "procedure", [
        ("proc_xray", None, None, None),
        ("proc_xray_read", None, None, None),
    ], order=("ord_radiology", "portable chest radiograph"))
    add("vaso", "input", [
        ("med_norepinephrine", "mcg/kg/min", _norm(0.12, 0.04, 0.02, 0.4), (0.0, 1.0)),
    ], order=("ord_vasopressor", "vasopressor titration"))
    add("transfusion", "input", [
        ("blood_prbc", "mL", _norm(300, 40, 200, 450), (100.0, 600.0)),
    ], order=("ord_transfusion", "packed red cell transfusion"))
    add("intubation", "procedure", [
        ("proc_intubation", None, None, None),
    ], order=("ord_airway", "endotracheal intubation"))
    # value-routed pairs; rate values are supplied at emit time, never drawn
    # here. One family per planted value scale (Lactate-like, MAP-like).
    add("dosing", "chart", [
        ("dose_rate", "mL/hr", None, (0.0, 10.0)),
        ("dose_low", None, None, None),
        ("dose_high", None, None, None),
        ("drip_rate", "mL/hr", None, (0.0, 200.0)),
        ("drip_low", None, None, None),
        ("drip_high", None, None, None),
    ])

    marker_names = tuple(f"pheno_{j:02d}" for j in range(cfg.phenotype_bits))
    for j, name in enumerate(marker_names):
        add(f"marker_{j:02d}", "chart", [(name, None, None, None)])

    background = {
        "chart": [
            ("vitals", 0.40),
            ("labs", 0.18),
            ("gas", 0.10),
            ("organ", 0.08),
            ("shock_panel", 0.08),
            ("renal_panel", 0.06),
        ],
        "input": [("sedation", 0.6), ("fluids", 0.4)],
        "procedure": [("radiology", 1.0)],
    }
    n_aux_templates = (cfg.n_extra_chart + 2) // 3
    if n_aux_templates:
        w = 0.10 / n_aux_templates
        background["chart"] += [(f"aux_t{i}", w) for i in range(n_aux_templates)]

    return Catalog(
        templates=templates,
        background=background,
        bounds=bounds,
        value_fn=value_fn,
        units=units,
        order_info=order_info,
        marker_names=marker_names,
    )


def _emit_burst(
    events: list[ClinicalEvent],
    catalog: Catalog,
    template: str,
    start_hour: float,
    rng: np.random.Generator,
    lat: Latents,
) -> None:
    tpl = catalog.templates[template]
    for slot, name in enumerate(tpl.members):
        fn = catalog.value_fn.get(name)
        value = fn(rng, lat, start_hour) if fn is not None else None
        order = catalog.order_info.get(name)
        events.append(
            ClinicalEvent(
                name=name,
                value=value,
                unit=catalog.units.get(name),
                offset_days=start_hour / HOURS_PER_DAY + slot * BURST_GAP_DAYS,
                order_name=order[0] if order else None,
                order_desc=order[1] if order else None,
                source_type=tpl.source_type,
            )
        )


def _emit_single(
    events: list[ClinicalEvent],
    catalog: Catalog,
    name: str,
    template: str,
    hour: float,
    rng: np.random.Generator,
    lat: Latents,
    value: float | None = None,
) -> None:
    tpl = catalog.templates[template]
    fn = catalog.value_fn.get(name)
    if value is None and fn is not None:
        value = fn(rng, lat, hour)
    order = catalog.order_info.get(name)
    events.append(
        ClinicalEvent(
            name=name,
            value=value,
            unit=catalog.units.get(name),
            offset_days=hour / HOURS_PER_DAY,
            order_name=order[0] if order else None,
            order_desc=order[1] if order else None,
            source_type=tpl.source_type,
        )
    )


_CLASS_P = (0.55, 0.20, 0.15, 0.10)
_RENAL_P = (0.40, 0.25, 0.20, 0.15)


def generate_stay(
    cfg: SynthConfig,
    catalog: Catalog,
    index: int,
    type_counts: dict[str, int] | None = None,
) -> StayRecord:
    """One synthetic stay; deterministic in (cfg.seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    los_h = float(rng.uniform(max(cfg.min_los_days, 2.6), cfg.max_los_days) * HOURS_PER_DAY)
    lat = Latents(
        shock=int(rng.random() < cfg.shock_rate),
        renal=int(rng.choice(4, p=_RENAL_P)),
        resp=int(rng.choice(4, p=_CLASS_P)),
        coag=int(rng.choice(4, p=_CLASS_P)),
        liver=int(rng.choice(4, p=_CLASS_P)),
        cns=int(rng.choice(4, p=_CLASS_P)),
        bits=(rng.random(cfg.phenotype_bits) < cfg.phenotype_rate).astype(np.int64),
        los_hours=los_h,
    )
    events: list[ClinicalEvent] = []

    # observation-window evidence for the planted signals
    for _ in range(3):
        _emit_burst(events, catalog, "shock_panel", rng.uniform(1.0, 22.0), rng, lat)
    for _ in range(2):
        _emit_burst(events, catalog, "renal_panel", rng.uniform(1.0, 22.0), rng, lat)
    _emit_burst(events, catalog, "organ", rng.uniform(1.0, 22.0), rng, lat)
    _emit_burst(events, catalog, "gas", rng.uniform(1.0, 22.0), rng, lat)

    # scoring-window support so the severity labels are always derivable
    for _ in range(2):
        _emit_burst(events, catalog, "renal_panel", rng.uniform(36.5, 59.0), rng, lat)
    _emit_burst(events, catalog, "organ", rng.uniform(36.5, 59.0), rng, lat)
    _emit_burst(events, catalog, "gas", rng.uniform(36.5, 59.0), rng, lat)
    _emit_burst(events, catalog, "shock_panel", rng.uniform(44.5, 59.0), rng, lat)

    if lat.shock:
        # threshold pair inside one scoring bucket of the prediction window
        bucket = int(rng.integers(0, 7))
        t0 = _PRED_H + bucket + 0.2
        _emit_single(events, catalog, "Lactate", "shock_panel", t0, rng, lat,
                     value=float(rng.uniform(2.3, 3.9)))
        _emit_single(events, catalog, "MAP", "shock_panel", t0 + 0.1, rng, lat,
                     value=float(rng.uniform(47.0, 63.0)))
        if rng.random() < 0.5:
            _emit_single(events, catalog, "med_norepinephrine", "vaso",
                         _PRED_H + float(rng.uniform(0.2, 7.5)), rng, lat)

    transfused = rng.random() < 0.15
    if transfused:
        _emit_single(events, catalog, "blood_prbc", "transfusion",
                     _PRED_H + float(rng.uniform(0.2, 11.5)), rng, lat)
    elif rng.random() < 0.03:
        # occasional gap-window transfusion exercises the unavailable-label rule
        _emit_single(events, catalog, "blood_prbc", "transfusion",
                     _OBS_END_H + float(rng.uniform(1.0, 10.0)), rng, lat)
    if rng.random() < 0.12:
        _emit_single(events, catalog, "proc_intubation", "intubation",
                     _PRED_H + float(rng.uniform(0.2, 11.5)), rng, lat)

    for j in np.flatnonzero(lat.bits):
        _emit_single(events, catalog, catalog.marker_names[j], f"marker_{j:02d}",
                     float(rng.uniform(1.0, 23.0)), rng, lat)

    # value-routed pairs: the flag identity is a threshold read of the rate.
    # Planted late in the stay so they sit outside task observation windows
    # (they exist to keep the value pathway exercised, not to carry labels).
    # The low/high bands straddle the same thresholds the planted outcomes
    # read, so the value code stays discriminative on those scales.
    for i in range(cfg.n_dose_pairs):
        var, flag_lo, flag_hi, band_lo, band_hi = _DOSE_FAMILIES[i % len(_DOSE_FAMILIES)]
        hour = float(rng.uniform(los_h - 20.0, los_h - 0.5))
        low = rng.random() < 0.5
        a, b = band_lo if low else band_hi
        _emit_single(events, catalog, var, "dosing", hour, rng, lat,
                     value=float(rng.uniform(a, b)))
        _emit_single(events, catalog, flag_lo if low else flag_hi, "dosing",
                     hour + BURST_GAP_DAYS * HOURS_PER_DAY, rng, lat)

    # deficit-greedy background fill toward the target type mix
    n_target = int(rng.integers(int(0.85 * cfg.mean_events), int(1.15 * cfg.mean_events) + 1))
    mix = dict(zip(("chart", "input", "procedure"), cfg.type_mix))
    local = {t: 0 for t in mix}
    for ev in events:
        local[ev.source_type] += 1
    if type_counts is None:
        type_counts = local
    else:
        for t, c in local.items():
            type_counts[t] += c
    while sum(type_counts.values()) == 0 or len(events) < n_target:
        total = sum(type_counts.values()) or 1
        deficit = {t: mix[t] - type_counts[t] / total for t in mix}
        stype = max(deficit, key=lambda t: (deficit[t], t))
        names = [n for n, _ in catalog.background[stype]]
        weights = np.asarray([w for _, w in catalog.background[stype]], dtype=np.float64)
        tname = str(rng.choice(names, p=weights / weights.sum()))
        hour = float(rng.uniform(0.25, los_h - 0.25))
        before = len(events)
        _emit_burst(events, catalog, tname, hour, rng, lat)
        type_counts[stype] += len(events) - before

    events = assign_positions(sorted(events, key=lambda e: e.offset_days))

    died = rng.random() < min(0.95, cfg.mortality_rate * (1.0 + 1.5 * lat.shock))
    raw: dict = {
        "los_days": round(los_h / HOURS_PER_DAY, 6),
        "mortality_hospital": int(died),
        "mortality_icu": int(died and rng.random() < 0.6),
        "phenotype": lat.bits.tolist(),
    }
    if died:
        raw["death_offset_days"] = round(float(los_h / HOURS_PER_DAY - rng.uniform(0.0, 0.15)), 6)
    if rng.random() < 0.9:
        raw["hosp_admit_offset_days"] = round(float(rng.uniform(0.0, 2.0)), 6)
    if rng.random() < 0.7:
        if rng.random() < cfg.readmission_rate:
            raw["next_stay_gap_days"] = round(float(rng.uniform(2.0, 28.0)), 6)
        else:
            raw["next_stay_gap_days"] = round(float(rng.uniform(35.0, 200.0)), 6)

    gender = "F" if rng.random() < 0.5 else "M"
    age = float(rng.integers(30, 91))
    return StayRecord(
        stay_id=f"stay_{index:05d}",
        age=age,
        gender=gender,
        raw_labels=raw,
        events=events,
    )


def generate_cohort(cfg: SynthConfig) -> tuple[list[StayRecord], Catalog]:
    catalog = build_catalog(cfg)
    type_counts = {"chart": 0, "input": 0, "procedure": 0}
    stays = [generate_stay(cfg, catalog, i, type_counts) for i in range(cfg.n_stays)]
    return stays, catalog


def write_cohort(out_dir: str | Path, cfg: SynthConfig, experiment: ExperimentConfig | None = None) -> Path:
    """Generate and persist a cohort: stay files, manifest, rules, vocab."""
    out = Path(out_dir)
    stays_dir = out / "stays"
    if stays_dir.exists():
        shutil.rmtree(stays_dir)
    stays_dir.mkdir(parents=True)
    stays, catalog = generate_cohort(cfg)
    paths = []
    for stay in stays:
        rel = f"stays/{stay.stay_id}.tsv"
        (out / rel).write_text(serialize_stay(stay), encoding="utf-8")
        paths.append(rel)
    vocab = build_vocabulary(stays)
    (out / "vocab.json").write_text(
        json.dumps(vocab.to_dict(), sort_keys=True, indent=1), encoding="utf-8"
    )
    rules = load_task_rules()
    with open(out / "tasks.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(rules.to_dict(), fh, sort_keys=True)
    manifest = {
        "schema_version": 1,
        "seed": cfg.seed,
        "n_stays": cfg.n_stays,
        "stays": paths,
        "bounds": {k: list(v) for k, v in sorted(catalog.bounds.items())},
        "vocab_file": "vocab.json",
        "tasks_file": "tasks.yaml",
    }
    with open(out / "manifest.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=True)
    return out / "manifest.yaml"


def load_manifest(data_dir: str | Path) -> tuple[list[StayRecord], dict, TaskRules, dict]:
    """Read a cohort directory back; validates that every stay parses and
    that bounds exist for every variable carrying values."""
    data_dir = Path(data_dir)
    with open(data_dir / "manifest.yaml", "r", encoding="utf-8") as fh:
        manifest = yaml.safe_load(fh)
    bounds = {k: tuple(v) for k, v in manifest["bounds"].items()}
    stays = []
    for rel in manifest["stays"]:
        path = data_dir / rel
        if not path.exists():
            raise FileNotFoundError(f"manifest references missing stay file {rel}")
        stays.append(parse_stay_file(path.read_text(encoding="utf-8")))
    missing = {
        ev.name
        for stay in stays
        for ev in stay.events
        if ev.value is not None and ev.name not in bounds
    }
    if missing:
        raise ValueError(f"manifest lacks cleaning bounds for variables: {sorted(missing)}")
    rules = load_task_rules(data_dir / manifest["tasks_file"])
    return stays, bounds, rules, manifest
