"""Synthetic sparse event-stream corpora with planted, oracle-recoverable signals.

Stands in for real ICU extracts: per-feature Poisson event streams, mixed
categorical/continuous values, stay archetypes that shape feature co-occurrence,
a per-stay severity factor that correlates continuous values, and a planted
feature-value rule that fixes a binary outcome and shifts a regression target.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta
from typing import Optional

import numpy as np

from .errors import InvalidSpec
from .ingest import Stay
from .textvec import atomic_write
from .types import feature_text

SIGNAL_SOURCE = "microbiology"
SIGNAL_VARIABLE = "blood culture"
SIGNAL_VALUE = "growth detected"
SIGNAL_BENIGN = ("no growth", "contaminant")
ANCHOR_SOURCE = "labevents"
ANCHOR_VARIABLE = "creatinine (serum)"
EVENTS_PER_POSITIVE = 2
ARCHETYPE_BOOST = 2.5  # aligned features; others get the total-preserving complement

_BASE_TIME = datetime(2023, 1, 1, 0, 0)

_SOURCES = ("chartevents", "labevents", "inputevents", "outputevents", "procedureevents")
_DURATION_SOURCES = ("inputevents", "procedureevents")

_VARIABLES = (
    "heart rate", "respiratory rate", "oxygen saturation", "systolic blood pressure",
    "diastolic blood pressure", "mean arterial pressure", "temperature", "central venous pressure",
    "potassium", "sodium", "chloride", "bicarbonate", "lactate", "hemoglobin", "hematocrit",
    "platelet count", "white blood cells", "glucose", "bilirubin total", "albumin", "magnesium",
    "phosphate", "urea nitrogen", "anion gap", "urine output", "stool output", "gastric output",
    "chest tube output", "heparin", "propofol", "norepinephrine", "fentanyl", "insulin",
    "vancomycin", "furosemide", "midazolam", "gcs eye opening", "gcs verbal response",
    "gcs motor response", "pupil response", "skin condition", "respiratory pattern",
    "ventilator mode", "capillary refill", "fluid balance",
)
_QUALIFIERS = ("", " (arterial)", " (venous)", " (serum)", " (bedside)", " (daily)", " (hourly)", " (spot)")

_VALUE_ADJ = (
    "clear", "coarse", "diminished", "elevated", "depressed", "irregular", "regular", "brisk",
    "sluggish", "mottled", "warm", "cool", "intact", "impaired", "absent", "present",
    "mild", "moderate", "severe", "trace",
)
_VALUE_NOUN = (
    "breath sounds", "rhythm", "response", "perfusion", "edema", "output", "tone", "reflexes",
    "effort", "secretions", "alignment", "movement", "drainage", "pulses", "coloration", "turgor",
)

_RATE_MULTIPLIERS = (0.6, 0.8, 1.0, 1.2, 1.4, 1.0, 1.0)  # mean exactly 1.0 over the cycle

_STATIC_WARDS = ("micu", "sicu", "ccu", "csru", "tsicu")
_STATIC_DIAGNOSES = ("none", "hypertension", "diabetes", "copd", "chronic kidney disease", "heart failure")


@dataclass(frozen=True)
class GeneratorSpec:
    patients: int
    features: int
    rate: float  # per-feature events per minute
    signal_incidence: float = 0.1
    stay_hours: float = 24.0
    stay_jitter_hours: float = 0.0
    stays_per_patient: int = 1
    cat_fraction: float = 0.4
    n_archetypes: int = 4
    severity_rho: float = 0.8
    cont_target_shift: float = 2.0
    window_minutes: int = 1440

    def __post_init__(self):
        if self.patients < 1:
            raise InvalidSpec("need at least one patient")
        if self.features < 2:
            raise InvalidSpec("need at least two features")
        if self.rate < 0:
            raise InvalidSpec("rate must be non-negative")
        if not 0.0 <= self.signal_incidence <= 1.0:
            raise InvalidSpec("signal incidence must be in [0, 1]")
        if self.stay_hours * 60 < 1 or self.stay_hours - self.stay_jitter_hours <= 0:
            raise InvalidSpec("stays must last at least a minute")
        if not 0.0 <= self.cat_fraction <= 1.0:
            raise InvalidSpec("categorical fraction must be in [0, 1]")
        if self.n_archetypes < 1 or self.stays_per_patient < 1 or self.window_minutes < 1:
            raise InvalidSpec("archetypes, stays per patient, and window must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GeneratorSpec":
        try:
            return cls(**json.loads(text))
        except (TypeError, json.JSONDecodeError) as exc:
            raise InvalidSpec(f"bad generator spec: {exc}") from exc

    @property
    def signal_feature_text(self) -> str:
        return feature_text(SIGNAL_SOURCE, SIGNAL_VARIABLE)

    @property
    def anchor_feature_text(self) -> str:
        return feature_text(ANCHOR_SOURCE, ANCHOR_VARIABLE)


@dataclass(frozen=True)
class FeatureDef:
    source: str
    variable: str
    kind: str  # "cont" | "cat"
    rate_multiplier: float
    mean: float = 0.0
    stddev: float = 1.0
    alphabet: tuple[str, ...] = ()
    probs: tuple[float, ...] = ()
    duration_base: int = 0  # 0 for discrete events


def feature_definitions(spec: GeneratorSpec, seed: int) -> list[FeatureDef]:
    """Deterministic feature table; index 0 is the signal, index 1 the anchor."""
    rng = np.random.default_rng([seed, 1])
    value_pool = [f"{a} {b}" for a in _VALUE_ADJ for b in _VALUE_NOUN]
    pool_order = rng.permutation(len(value_pool))
    pool_cursor = 0

    def next_values(count: int) -> tuple[str, ...]:
        nonlocal pool_cursor
        if pool_cursor + count > len(pool_order):
            raise InvalidSpec("too many categorical features for the value pool")
        picked = tuple(value_pool[i] for i in pool_order[pool_cursor : pool_cursor + count])
        pool_cursor += count
        return picked

    defs = [
        FeatureDef(SIGNAL_SOURCE, SIGNAL_VARIABLE, "cat", 1.0,
                   alphabet=SIGNAL_BENIGN, probs=(0.85, 0.15)),
        FeatureDef(ANCHOR_SOURCE, ANCHOR_VARIABLE, "cont", 1.0, mean=1.0, stddev=0.4),
    ]
    names = [f"{v}{q}" for q in _QUALIFIERS for v in _VARIABLES]
    n_cat = round(max(spec.features - 2, 0) * spec.cat_fraction)
    for i in range(spec.features - 2):
        variable = names[i % len(names)] if i < len(names) else f"{names[i % len(names)]} #{i // len(names)}"
        source = _SOURCES[i % len(_SOURCES)]
        mult = _RATE_MULTIPLIERS[i % len(_RATE_MULTIPLIERS)]
        duration_base = 30 * (1 + i % 12) if source in _DURATION_SOURCES else 0
        if i < n_cat:
            defs.append(FeatureDef(source, variable, "cat", mult,
                                   alphabet=next_values(4), probs=(0.55, 0.25, 0.12, 0.08),
                                   duration_base=duration_base))
        else:
            mean = float(rng.uniform(-2.0, 6.0))
            stddev = float(rng.uniform(0.3, 2.0))
            defs.append(FeatureDef(source, variable, "cont", mult, mean=mean, stddev=stddev,
                                   duration_base=duration_base))
    return defs


def generate_lines(spec: GeneratorSpec, seed: int) -> list[str]:
    """Event-line corpus, byte-for-byte deterministic for a given seed."""
    defs = feature_definitions(spec, seed)
    lines: list[str] = []
    stay_idx = 0
    for p in range(spec.patients):
        patient_id = f"p{p:05d}"
        for k in range(spec.stays_per_patient):
            stay_id = f"s{p:05d}x{k}"
            start = _BASE_TIME + timedelta(hours=(p * 37 + k * 211) % 8760)
            lines.extend(_stay_lines(spec, defs, seed, stay_idx, patient_id, stay_id, start))
            stay_idx += 1
    return lines


def write_corpus(path: str, spec: GeneratorSpec, seed: int) -> None:
    atomic_write(path, ("\n".join(generate_lines(spec, seed)) + "\n").encode("utf-8"))


def write_task_file(path: str, spec: GeneratorSpec, kind: str, seed: int) -> None:
    """Sidecar description of the planted task so labels can be recomputed."""
    payload = {"kind": kind, "generator_seed": seed, "generator_spec": asdict(spec)}
    atomic_write(path, (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8"))


def read_task_file(path: str) -> tuple[str, GeneratorSpec, int]:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    try:
        return payload["kind"], GeneratorSpec(**payload["generator_spec"]), payload["generator_seed"]
    except (KeyError, TypeError) as exc:
        raise InvalidSpec(f"bad task file: {exc}") from exc


def _stay_lines(spec: GeneratorSpec, defs: list[FeatureDef], seed: int, stay_idx: int,
                patient_id: str, stay_id: str, start: datetime) -> list[str]:
    rng = np.random.default_rng([seed, 1000 + stay_idx])
    minutes = int(round((spec.stay_hours + spec.stay_jitter_hours * (2 * rng.random() - 1)) * 60))
    minutes = max(minutes, 1)
    archetype = int(rng.integers(spec.n_archetypes))
    severity = float(rng.standard_normal())
    positive = bool(rng.random() < spec.signal_incidence) if spec.rate > 0 else False

    records: list[dict] = []

    def emit(source, variable, value, minute, duration=0, static=False):
        record = {
            "patient_id": patient_id,
            "stay_id": stay_id,
            "source": source,
            "variable": variable,
            "value": value,
            "timestamp": (start + timedelta(minutes=int(minute))).strftime("%Y-%m-%dT%H:%M"),
        }
        if duration:
            record["duration_minutes"] = int(duration)
        if static:
            record["static"] = True
        records.append(record)

    emit("demographics", "age", round(float(rng.uniform(18, 90)), 1), 0, static=True)
    emit("demographics", "sex", str(rng.choice(("female", "male"))), 0, static=True)
    emit("admissions", "admission ward", str(rng.choice(_STATIC_WARDS)), 0, static=True)
    emit("history", "prior diagnosis", str(rng.choice(_STATIC_DIAGNOSES)), 0, static=True)

    rho = spec.severity_rho
    resid = np.sqrt(max(1.0 - rho * rho, 0.0))
    align_boost = ARCHETYPE_BOOST
    other_boost = (spec.n_archetypes - align_boost) / max(spec.n_archetypes - 1, 1) \
        if spec.n_archetypes > 1 else 1.0
    if other_boost < 0:
        raise InvalidSpec("archetype boost incompatible with archetype count")

    for f_idx, fdef in enumerate(defs):
        boost = align_boost if spec.n_archetypes > 1 and f_idx % spec.n_archetypes == archetype \
            else (other_boost if spec.n_archetypes > 1 else 1.0)
        lam = spec.rate * fdef.rate_multiplier * boost * minutes
        count = int(rng.poisson(lam)) if lam > 0 else 0
        if count == 0:
            continue
        times = rng.integers(0, minutes, size=count)
        durations = (fdef.duration_base + rng.integers(0, 30, size=count)) if fdef.duration_base else np.zeros(count, dtype=int)
        if fdef.kind == "cont":
            noise = rng.standard_normal(count)
            values = fdef.mean + fdef.stddev * (rho * severity + resid * noise)
            for t, v, d in zip(times, values, durations):
                emit(fdef.source, fdef.variable, round(float(v), 4), t, duration=int(d))
        else:
            choices = rng.choice(len(fdef.alphabet), size=count, p=fdef.probs)
            for t, c, d in zip(times, choices, durations):
                emit(fdef.source, fdef.variable, fdef.alphabet[int(c)], t, duration=int(d))

    if positive:
        horizon = min(minutes, spec.window_minutes)
        for minute in rng.integers(0, horizon, size=EVENTS_PER_POSITIVE):
            emit(SIGNAL_SOURCE, SIGNAL_VARIABLE, SIGNAL_VALUE, minute)

    records.sort(key=lambda r: r["timestamp"])  # statics sort first at the stay start
    return [json.dumps(r) for r in records]


# ---------------------------------------------------------------------------
# planted-rule oracles


def oracle_label(stay: Stay, spec: GeneratorSpec) -> int:
    """Ground truth: 1 iff the planted feature-value event occurs in the first window."""
    return oracle_presence(stay, spec)


def oracle_presence(stay: Stay, spec: GeneratorSpec) -> int:
    start = stay.start
    for r in stay.dynamics:
        if r.feature_text != spec.signal_feature_text or r.is_continuous:
            continue
        minute = (r.timestamp - start).total_seconds() / 60
        if str(r.value) == SIGNAL_VALUE and minute < spec.window_minutes:
            return 1
    return 0


def oracle_cont_target(stay: Stay, spec: GeneratorSpec) -> float:
    """Regression target: first-window anchor mean, shifted when the signal fires."""
    start = stay.start
    values = [
        float(r.value)
        for r in stay.dynamics
        if r.feature_text == spec.anchor_feature_text and r.is_continuous
        and (r.timestamp - start).total_seconds() / 60 < spec.window_minutes
    ]
    base = float(np.mean(values)) if values else 0.0
    return base + spec.cont_target_shift * oracle_label(stay, spec)


def oracle_labels(stays, spec: GeneratorSpec) -> np.ndarray:
    return np.array([oracle_label(s, spec) for s in stays], dtype=np.int64)
