"""Text linearization of medical events.

An event becomes a single space-joined string: the event type followed by
each (feature name, feature value) pair in order, with code values resolved
to their medical text through the client dictionary. Codes without a
dictionary entry fall back to their decimal digits and are counted for run
reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from fedehr.synthdata import (
    CodeDictionary,
    FeatureValue,
    MedicalEvent,
    PatientRecord,
)


@dataclass(frozen=True)
class LinearizedEvent:
    text: str
    source_event_index: int


@dataclass
class LinearizeStats:
    """Mutable counters surfaced in run reports."""

    unmapped_codes: int = 0
    events: int = 0
    unmapped_by_feature: dict[tuple[str, str], int] = field(default_factory=dict)


def format_numeric(x: float) -> str:
    """Shortest decimal that round-trips; integral values drop the '.0'."""
    if not math.isfinite(x):
        raise ValueError("numeric feature values must be finite")
    if x == int(x) and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def resolve_value(event_type: str, feature_name: str, value: FeatureValue,
                  dictionary: CodeDictionary,
                  stats: LinearizeStats | None = None) -> str:
    if isinstance(value, bool):
        raise TypeError("boolean feature values are not supported")
    if isinstance(value, int):
        text = dictionary.lookup(event_type, feature_name, value)
        if text is not None:
            return text
        if stats is not None:
            stats.unmapped_codes += 1
            key = (event_type, feature_name)
            stats.unmapped_by_feature[key] = stats.unmapped_by_feature.get(key, 0) + 1
        return str(value)
    if isinstance(value, float):
        return format_numeric(value)
    return value


def linearize_event(event: MedicalEvent, dictionary: CodeDictionary,
                    stats: LinearizeStats | None = None,
                    source_index: int = 0) -> LinearizedEvent:
    if not event.features:
        raise ValueError("cannot linearize an event with no feature pairs")
    parts = [event.event_type]
    for pair in event.features:
        parts.append(pair.name)
        parts.append(resolve_value(event.event_type, pair.name, pair.value,
                                   dictionary, stats))
    if stats is not None:
        stats.events += 1
    return LinearizedEvent(" ".join(parts), source_index)


def linearize_patient(patient: PatientRecord, dictionary: CodeDictionary,
                      stats: LinearizeStats | None = None) -> list[LinearizedEvent]:
    return [linearize_event(e, dictionary, stats, i)
            for i, e in enumerate(patient.events)]
