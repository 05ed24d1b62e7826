"""Event-file parsing, patient-level split assignment, and vocabulary building.

Event-line format: one JSON object per line with fields patient_id, stay_id,
source, variable, value (number or quoted text), timestamp (ISO-8601, minute
precision), duration_minutes (optional, default 0), static (optional boolean,
default false).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Optional, Sequence

from .errors import EmptyTrainSplit, InvalidRatios, InvalidRegistry, ParseError
from .types import (
    RESERVED_FEATURE_TEXTS,
    RESERVED_VALUE_TEXTS,
    FeatureStats,
    Registry,
    Vocabularies,
    validate_registry,
)


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class Stay:
    stay_id: str
    patient_id: str
    dynamics: tuple[Registry, ...]
    statics: tuple[Registry, ...]

    @property
    def start(self) -> datetime:
        pool = self.dynamics or self.statics
        return min(r.timestamp for r in pool)

    @property
    def all_registries(self) -> tuple[Registry, ...]:
        return self.statics + self.dynamics


@dataclass(frozen=True)
class Corpus:
    stays: tuple[Stay, ...]
    splits: dict[str, Split] = field(default_factory=dict)

    @property
    def patient_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for stay in self.stays:
            seen.setdefault(stay.patient_id, None)
        return list(seen)

    @property
    def n_registries(self) -> int:
        return sum(len(s.dynamics) + len(s.statics) for s in self.stays)

    def split_of(self, stay: Stay) -> Optional[Split]:
        return self.splits.get(stay.patient_id)

    def stays_in(self, split: Split) -> list[Stay]:
        return [s for s in self.stays if self.splits.get(s.patient_id) is split]

    def with_splits(self, splits: dict[str, Split]) -> "Corpus":
        return Corpus(self.stays, dict(splits))


def parse_events(path: str) -> Corpus:
    """Parse an event-line file into a Corpus of validated registries."""
    with open(path, "r", encoding="utf-8") as f:
        return parse_event_lines(f)


def parse_event_lines(lines: Iterable[str]) -> Corpus:
    dynamics: dict[str, list[Registry]] = {}
    statics: dict[str, list[Registry]] = {}
    stay_patient: dict[str, str] = {}
    order: list[str] = []

    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(record, dict):
            raise ParseError(line_no, "record is not an object")
        registry = _registry_from_record(record, line_no)
        stay = registry.stay_id
        if stay not in stay_patient:
            stay_patient[stay] = registry.patient_id
            order.append(stay)
            dynamics[stay] = []
            statics[stay] = []
        elif stay_patient[stay] != registry.patient_id:
            raise ParseError(line_no, f"stay {stay!r} claimed by two patients")
        (statics if registry.is_static else dynamics)[stay].append(registry)

    stays = tuple(
        Stay(stay_id=s, patient_id=stay_patient[s], dynamics=tuple(dynamics[s]), statics=tuple(statics[s]))
        for s in order
    )
    return Corpus(stays)


def _registry_from_record(record: dict, line_no: int) -> Registry:
    for key in ("patient_id", "stay_id", "source", "variable"):
        if key not in record:
            raise ParseError(line_no, f"missing {key}")
        if not isinstance(record[key], str):
            raise ParseError(line_no, f"{key} must be text")
    if "value" not in record:
        raise ParseError(line_no, "missing value")
    if "timestamp" not in record:
        raise ParseError(line_no, "missing timestamp")

    raw_value = record["value"]
    if isinstance(raw_value, bool) or not isinstance(raw_value, (int, float, str)):
        raise ParseError(line_no, "value must be a number or quoted text")
    value = float(raw_value) if isinstance(raw_value, (int, float)) else raw_value

    try:
        ts = datetime.fromisoformat(record["timestamp"])
    except (TypeError, ValueError):
        raise ParseError(line_no, f"bad timestamp {record['timestamp']!r}")
    # all times are minute precision; floor anything finer
    ts = ts.replace(second=0, microsecond=0)

    duration = record.get("duration_minutes", 0)
    if isinstance(duration, bool) or not isinstance(duration, int):
        raise ParseError(line_no, "duration_minutes must be an integer")
    static = record.get("static", False)
    if not isinstance(static, bool):
        raise ParseError(line_no, "static must be a boolean")

    try:
        return validate_registry(
            Registry(
                patient_id=record["patient_id"],
                stay_id=record["stay_id"],
                source=record["source"],
                variable=record["variable"],
                value=value,
                timestamp=ts,
                duration_minutes=duration,
                is_static=static,
            )
        )
    except InvalidRegistry as exc:
        raise ParseError(line_no, str(exc)) from exc


def assign_splits(corpus: Corpus, ratios: Sequence[float], seed: int) -> Corpus:
    """Assign every patient to train/val/test, deterministically for a seed.

    Counts follow the largest-remainder rule so e.g. 100 patients under
    (0.7, 0.15, 0.15) come out exactly 70/15/15; all stays of a patient share
    one split.
    """
    if len(ratios) != 3:
        raise InvalidRatios(f"expected 3 ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios):
        raise InvalidRatios("ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatios(f"ratios sum to {sum(ratios)!r}, not 1")

    import numpy as np

    patients = sorted(corpus.patient_ids)
    rng = np.random.default_rng(seed)
    shuffled = [patients[i] for i in rng.permutation(len(patients))]

    n = len(patients)
    floors = [math.floor(r * n) for r in ratios]
    remainders = [r * n - f for r, f in zip(ratios, floors)]
    leftover = n - sum(floors)
    # ties broken in split order: train, then val, then test
    for idx in sorted(range(3), key=lambda i: (-remainders[i], i))[:leftover]:
        floors[idx] += 1

    splits: dict[str, Split] = {}
    cursor = 0
    for count, split in zip(floors, (Split.TRAIN, Split.VAL, Split.TEST)):
        for pid in shuffled[cursor : cursor + count]:
            splits[pid] = split
        cursor += count
    return corpus.with_splits(splits)


def build_vocabularies(corpus: Corpus) -> Vocabularies:
    """Feature/value vocabularies and per-feature statistics from the train split."""
    train_stays = corpus.stays_in(Split.TRAIN)
    registries = [r for stay in train_stays for r in stay.all_registries]
    if not registries:
        raise EmptyTrainSplit("no registries in the train split")

    features: set[str] = set()
    values: set[str] = set()
    sums: dict[str, float] = {}
    sq_sums: dict[str, float] = {}
    counts: dict[str, int] = {}

    for r in registries:
        text = r.feature_text
        features.add(text)
        if r.is_continuous:
            x = float(r.value)
            sums[text] = sums.get(text, 0.0) + x
            sq_sums[text] = sq_sums.get(text, 0.0) + x * x
            counts[text] = counts.get(text, 0) + 1
        else:
            v = str(r.value).strip()
            if v not in RESERVED_VALUE_TEXTS:
                values.add(v)

    stats: dict[str, FeatureStats] = {}
    for text, count in counts.items():
        mean = sums[text] / count
        var = max(sq_sums[text] / count - mean * mean, 0.0)
        stats[text] = FeatureStats(mean=mean, stddev=math.sqrt(var), count=count)

    return Vocabularies(
        features=RESERVED_FEATURE_TEXTS + tuple(sorted(features)),
        categorical_values=RESERVED_VALUE_TEXTS + tuple(sorted(values)),
        per_feature_stats=stats,
    )
