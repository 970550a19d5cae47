"""Clinical event records, stay files, and categorical vocabularies.

A stay file is UTF-8 text: one header line
``stay<TAB>stay_id<TAB>age<TAB>gender<TAB>raw-label-JSON`` followed by one
tab-separated line per event with fields ``event_name, value, unit,
offset_days, order_name, order_desc, source_type``. An empty field means
the attribute is absent. Floats are written with ``repr`` so
parse -> serialize -> parse is a fixed point.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

__all__ = [
    "SOURCE_TYPES",
    "PAD",
    "MASK",
    "CLS",
    "UNK",
    "RESERVED_TOKENS",
    "ClinicalEvent",
    "StayRecord",
    "age_bucket_token",
    "assign_positions",
    "sort_events",
    "parse_stay_file",
    "serialize_stay",
    "Vocabulary",
    "build_vocabulary",
]

SOURCE_TYPES = ("chart", "input", "procedure")

PAD, MASK, CLS, UNK = "[PAD]", "[MASK]", "[CLS]", "[UNK]"
RESERVED_TOKENS = (PAD, MASK, CLS, UNK)

# attributes that get a token vocabulary
VOCAB_ATTRS = ("event_name", "unit", "order_name", "order_desc", "age", "gender")


@dataclass(frozen=True)
class ClinicalEvent:
    """One charted measurement, infusion record, or procedure order."""

    name: str
    value: float | None
    unit: str | None
    offset_days: float
    order_name: str | None
    order_desc: str | None
    source_type: str
    position: int = -1

    def content_key(self) -> tuple:
        """All attributes except the derived position."""
        return (
            self.name,
            self.value,
            self.unit,
            self.offset_days,
            self.order_name,
            self.order_desc,
            self.source_type,
        )


@dataclass
class StayRecord:
    stay_id: str
    age: float
    gender: str
    raw_labels: dict = field(default_factory=dict)
    events: list[ClinicalEvent] = field(default_factory=list)
    age_bin_years: int = 5

    @property
    def age_bucket(self) -> str:
        return age_bucket_token(self.age, self.age_bin_years)

    def replace_events(self, events: Sequence[ClinicalEvent]) -> "StayRecord":
        return dataclasses.replace(self, events=list(events))


def age_bucket_token(age: float, bin_years: int = 5) -> str:
    """Categorical token for an age, e.g. 63 -> ``age[60-65)`` with 5y bins."""
    if age < 0:
        raise ValueError(f"age must be non-negative, got {age}")
    lo = int(age // bin_years) * bin_years
    return f"age[{lo}-{lo + bin_years})"


def sort_events(events: Iterable[ClinicalEvent]) -> list[ClinicalEvent]:
    """Stable sort by time offset (ties keep input order)."""
    return sorted(events, key=lambda e: e.offset_days)


def assign_positions(events: Sequence[ClinicalEvent]) -> list[ClinicalEvent]:
    """Derive order positions: start at 0, +1 when the offset strictly increases.

    Events sharing an offset share a position. Input must already be sorted
    by offset; the result is a new list (events are immutable).
    """
    out: list[ClinicalEvent] = []
    pos = 0
    prev: float | None = None
    for ev in events:
        if prev is not None:
            if ev.offset_days < prev:
                raise ValueError("assign_positions requires events sorted by offset")
            if ev.offset_days > prev:
                pos += 1
        out.append(dataclasses.replace(ev, position=pos))
        prev = ev.offset_days
    return out


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _parse_float(text: str, line_no: int, what: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValueError(f"line {line_no}: malformed {what} {text!r}") from None
    if not math.isfinite(v):
        raise ValueError(f"line {line_no}: non-finite {what} {text!r}")
    return v


def parse_stay_file(text: str, age_bin_years: int = 5) -> StayRecord:
    """Parse a stay file; malformed content raises ValueError with a line number."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ValueError("line 1: empty stay file")
    head = lines[0].split("\t")
    if len(head) != 5 or head[0] != "stay":
        raise ValueError(
            f"line 1: expected header 'stay<TAB>id<TAB>age<TAB>gender<TAB>labels', "
            f"got {len(head)} fields"
        )
    _, stay_id, age_text, gender, label_text = head
    if not stay_id:
        raise ValueError("line 1: empty stay_id")
    age = _parse_float(age_text, 1, "age")
    if age < 0:
        raise ValueError(f"line 1: negative age {age}")
    try:
        raw_labels = json.loads(label_text) if label_text else {}
    except json.JSONDecodeError as exc:
        raise ValueError(f"line 1: malformed label block ({exc.msg})") from None
    if not isinstance(raw_labels, dict):
        raise ValueError("line 1: label block must be a JSON object")

    events: list[ClinicalEvent] = []
    for i, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 7:
            raise ValueError(f"line {i}: expected 7 tab-separated fields, got {len(fields)}")
        name, value_s, unit_s, offset_s, oname_s, odesc_s, stype = fields
        if not name:
            raise ValueError(f"line {i}: empty event name")
        if stype not in SOURCE_TYPES:
            raise ValueError(
                f"line {i}: unknown source type {stype!r} (expected one of {SOURCE_TYPES})"
            )
        offset = _parse_float(offset_s, i, "offset")
        if offset < 0:
            raise ValueError(f"line {i}: negative offset {offset}")
        value = _parse_float(value_s, i, "value") if value_s else None
        events.append(
            ClinicalEvent(
                name=name,
                value=value,
                unit=unit_s or None,
                offset_days=offset,
                order_name=oname_s or None,
                order_desc=odesc_s or None,
                source_type=stype,
            )
        )
    events = assign_positions(sort_events(events))
    return StayRecord(
        stay_id=stay_id,
        age=age,
        gender=gender,
        raw_labels=raw_labels,
        events=events,
        age_bin_years=age_bin_years,
    )


def serialize_stay(stay: StayRecord) -> str:
    """Canonical text form; ``parse_stay_file(serialize_stay(s))`` equals ``s``."""
    labels = json.dumps(stay.raw_labels, sort_keys=True, separators=(",", ":"))
    out = [
        "\t".join(["stay", stay.stay_id, _fmt_float(stay.age), stay.gender, labels])
    ]
    for ev in stay.events:
        out.append(
            "\t".join(
                [
                    ev.name,
                    _fmt_float(ev.value) if ev.value is not None else "",
                    ev.unit or "",
                    _fmt_float(ev.offset_days),
                    ev.order_name or "",
                    ev.order_desc or "",
                    ev.source_type,
                ]
            )
        )
    return "\n".join(out) + "\n"


class Vocabulary:
    """Per-attribute token -> id maps with shared reserved ids.

    Ids 0..3 are [PAD], [MASK], [CLS], [UNK] in every attribute; observed
    tokens follow in lexicographic order, so construction does not depend
    on stay iteration order. Unknown tokens encode to [UNK].
    """

    PAD_ID, MASK_ID, CLS_ID, UNK_ID = 0, 1, 2, 3

    def __init__(self, tables: dict[str, dict[str, int]]):
        self.tables = tables

    @classmethod
    def from_token_sets(cls, sets: dict[str, Iterable[str]]) -> "Vocabulary":
        tables = {}
        for attr in VOCAB_ATTRS:
            table = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
            for tok in sorted(set(sets.get(attr, ()))):
                if tok in table:
                    raise ValueError(f"token {tok!r} collides with a reserved token")
                table[tok] = len(table)
            tables[attr] = table
        return cls(tables)

    def encode(self, attr: str, token: str | None) -> int:
        if token is None:
            return self.PAD_ID
        return self.tables[attr].get(token, self.UNK_ID)

    def size(self, attr: str) -> int:
        return len(self.tables[attr])

    def tokens(self, attr: str) -> list[str]:
        return list(self.tables[attr])

    def decode(self, attr: str, idx: int) -> str:
        return self.tokens(attr)[idx]

    def to_dict(self) -> dict:
        return {attr: dict(table) for attr, table in self.tables.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls({attr: dict(table) for attr, table in d.items()})

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tables == other.tables


def build_vocabulary(stays: Iterable[StayRecord]) -> Vocabulary:
    """Collect observed tokens across stays (order-insensitive)."""
    sets: dict[str, set[str]] = {attr: set() for attr in VOCAB_ATTRS}
    for stay in stays:
        sets["age"].add(stay.age_bucket)
        sets["gender"].add(stay.gender)
        for ev in stay.events:
            sets["event_name"].add(ev.name)
            if ev.unit is not None:
                sets["unit"].add(ev.unit)
            if ev.order_name is not None:
                sets["order_name"].add(ev.order_name)
            if ev.order_desc is not None:
                sets["order_desc"].add(ev.order_desc)
    return Vocabulary.from_token_sets(sets)
