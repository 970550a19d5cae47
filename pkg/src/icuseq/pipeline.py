"""Sequence construction: cleaning, windowing, truncation, segmentation,
splitting, and encoding stays into aligned id/value arrays.

All event filters are per-event predicates, so they commute and are
idempotent; positions are re-derived after every event-dropping step to
keep the 0/+1 increment invariant.
"""
from __future__ import annotations

import dataclasses
import logging
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import ClinicalEvent, StayRecord, Vocabulary, assign_positions

__all__ = [
    "HOURS_PER_DAY",
    "clean_events",
    "window_events",
    "limit_variables",
    "filter_min_events",
    "truncate_stay",
    "segment_stay",
    "split_stays",
    "stay_seed",
    "EncodedStay",
    "encode_stay",
    "TRUNCATION_MODES",
]

log = logging.getLogger(__name__)

HOURS_PER_DAY = 24.0

TRUNCATION_MODES = ("first", "last", "whole_only")


def stay_seed(stay_id: str, salt: str = "") -> int:
    """Deterministic per-stay seed (crc32; Python's hash() is salted)."""
    return zlib.crc32(f"{salt}:{stay_id}".encode("utf-8"))


def _rebuild(stay: StayRecord, events: Sequence[ClinicalEvent]) -> StayRecord:
    return stay.replace_events(assign_positions(list(events)))


def clean_events(stay: StayRecord, bounds: dict[str, tuple[float, float]]) -> StayRecord:
    """Drop implausible values and events outside the stay.

    Chart/procedure values must satisfy p1 <= v <= p99 for their variable;
    input (infusion rate) values only the upper bound v <= p99. Valueless
    events pass through. Events with offsets past the recorded length of
    stay are removed. Variables with values but no bounds pass with a warning.
    """
    los_days = stay.raw_labels.get("los_days")
    warned: set[str] = set()
    kept: list[ClinicalEvent] = []
    for ev in stay.events:
        if los_days is not None and ev.offset_days > float(los_days):
            continue
        if ev.value is not None:
            bound = bounds.get(ev.name)
            if bound is None:
                if ev.name not in warned:
                    warned.add(ev.name)
                    log.warning("no cleaning bounds for variable %r; passing through", ev.name)
            else:
                p1, p99 = bound
                if ev.value > p99:
                    continue
                if ev.source_type != "input" and ev.value < p1:
                    continue
        kept.append(ev)
    return _rebuild(stay, kept)


def window_events(stay: StayRecord, observation_hours: float, start_hour: float = 0.0) -> StayRecord:
    """Keep events with offsets in the half-open window [start, start+obs) hours."""
    lo = start_hour / HOURS_PER_DAY
    hi = (start_hour + observation_hours) / HOURS_PER_DAY
    kept = [e for e in stay.events if lo <= e.offset_days < hi]
    return _rebuild(stay, kept)


def limit_variables(stay: StayRecord, allowed_names: Iterable[str]) -> StayRecord:
    """Restrict the stay to a variable subset (core-variable experiments)."""
    allowed = set(allowed_names)
    return _rebuild(stay, [e for e in stay.events if e.name in allowed])


def filter_min_events(stays: Iterable[StayRecord], min_events: int = 10) -> list[StayRecord]:
    """Cohort rule: keep stays with at least ``min_events`` events."""
    return [s for s in stays if len(s.events) >= min_events]


def truncate_stay(stay: StayRecord, max_events: int, mode: str = "last") -> StayRecord | None:
    """Cap the event count; ``whole_only`` drops over-long stays entirely."""
    if mode not in TRUNCATION_MODES:
        raise ValueError(f"unknown truncation mode {mode!r} (expected one of {TRUNCATION_MODES})")
    if max_events < 1:
        raise ValueError(f"max_events must be >= 1, got {max_events}")
    if len(stay.events) <= max_events:
        return stay
    if mode == "whole_only":
        return None
    kept = stay.events[:max_events] if mode == "first" else stay.events[-max_events:]
    return _rebuild(stay, kept)


def segment_stay(stay: StayRecord, max_events: int) -> list[StayRecord]:
    """Split an over-long stay into consecutive chunks of at most ``max_events``.

    Segment ids get a ``#seg{i}`` suffix; concatenating segment events
    reproduces the original sequence content (positions restart per segment
    so every segment indexes the same position table).
    """
    if max_events < 1:
        raise ValueError(f"max_events must be >= 1, got {max_events}")
    if len(stay.events) <= max_events:
        return [stay]
    out = []
    for i in range(0, len(stay.events), max_events):
        chunk = stay.events[i : i + max_events]
        seg = dataclasses.replace(
            stay,
            stay_id=f"{stay.stay_id}#seg{i // max_events}",
            events=assign_positions(list(chunk)),
        )
        out.append(seg)
    return out


def split_stays(
    stays: Sequence[StayRecord],
    val_fraction: float,
    test_fraction: float,
    seed: int,
    max_events: int | None = None,
) -> tuple[list[StayRecord], list[StayRecord], list[StayRecord]]:
    """Deterministic train/val/test split at the stay level.

    Stays longer than ``max_events`` are forced into train (they get
    segmented there); the remaining stays are permuted with ``seed`` and
    sliced to the requested fractions.
    """
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise ValueError(f"bad split fractions ({val_fraction}, {test_fraction})")
    ordered = sorted(stays, key=lambda s: s.stay_id)
    forced = [s for s in ordered if max_events is not None and len(s.events) > max_events]
    rest = [s for s in ordered if not (max_events is not None and len(s.events) > max_events)]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(rest))
    shuffled = [rest[i] for i in perm]
    n = len(shuffled)
    n_val = int(round(n * val_fraction))
    n_test = int(round(n * test_fraction))
    val = shuffled[:n_val]
    test = shuffled[n_val : n_val + n_test]
    train = forced + shuffled[n_val + n_test :]
    return train, val, test


_TYPE_IDS = {"chart": 0, "input": 1, "procedure": 2}


@dataclass
class EncodedStay:
    """Aligned per-event arrays ready for embedding lookup."""

    stay_id: str
    event_ids: np.ndarray
    unit_ids: np.ndarray
    order_name_ids: np.ndarray
    order_desc_ids: np.ndarray
    values: np.ndarray
    has_value: np.ndarray
    has_unit: np.ndarray
    has_order_name: np.ndarray
    has_order_desc: np.ndarray
    offsets_days: np.ndarray
    positions: np.ndarray
    type_ids: np.ndarray
    age_id: int
    gender_id: int
    raw_labels: dict

    @property
    def length(self) -> int:
        return int(self.event_ids.shape[0])


def encode_stay(stay: StayRecord, vocab: Vocabulary) -> EncodedStay:
    """Map a stay's events onto id/value arrays via the vocabulary."""
    n = len(stay.events)
    event_ids = np.zeros(n, dtype=np.int64)
    unit_ids = np.zeros(n, dtype=np.int64)
    oname_ids = np.zeros(n, dtype=np.int64)
    odesc_ids = np.zeros(n, dtype=np.int64)
    values = np.zeros(n, dtype=np.float64)
    has_value = np.zeros(n, dtype=bool)
    has_unit = np.zeros(n, dtype=bool)
    has_oname = np.zeros(n, dtype=bool)
    has_odesc = np.zeros(n, dtype=bool)
    offsets = np.zeros(n, dtype=np.float64)
    positions = np.zeros(n, dtype=np.int64)
    type_ids = np.zeros(n, dtype=np.int64)
    for i, ev in enumerate(stay.events):
        event_ids[i] = vocab.encode("event_name", ev.name)
        unit_ids[i] = vocab.encode("unit", ev.unit)
        oname_ids[i] = vocab.encode("order_name", ev.order_name)
        odesc_ids[i] = vocab.encode("order_desc", ev.order_desc)
        if ev.value is not None:
            values[i] = ev.value
            has_value[i] = True
        has_unit[i] = ev.unit is not None
        has_oname[i] = ev.order_name is not None
        has_odesc[i] = ev.order_desc is not None
        offsets[i] = ev.offset_days
        positions[i] = ev.position
        type_ids[i] = _TYPE_IDS[ev.source_type]
    return EncodedStay(
        stay_id=stay.stay_id,
        event_ids=event_ids,
        unit_ids=unit_ids,
        order_name_ids=oname_ids,
        order_desc_ids=odesc_ids,
        values=values,
        has_value=has_value,
        has_unit=has_unit,
        has_order_name=has_oname,
        has_order_desc=has_odesc,
        offsets_days=offsets,
        positions=positions,
        type_ids=type_ids,
        age_id=vocab.encode("age", stay.age_bucket),
        gender_id=vocab.encode("gender", stay.gender),
        raw_labels=dict(stay.raw_labels),
    )
