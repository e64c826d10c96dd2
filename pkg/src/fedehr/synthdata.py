"""Deterministic synthetic EHR generation for simulated clients.

Each client is a set of patients; each patient is an ordered sequence of
medical events (event type + feature name/value pairs) plus binary task
labels. Patients are driven by a latent concept mixture: a client-level
concept prevalence vector, shifted away from a reference distribution by a
parameter ``s`` in [0, 1], controls which concepts a patient's events
express, and the task labels follow a logistic model over the patient's
empirical concept frequencies. Labels are therefore learnable from the
events themselves, and ``s`` moves both the covariate distribution and the
concept-to-label map.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FeatureValue = int | float | str  # int = medical code, float = numeric, str = text

# Event schemas: (code feature, numeric feature, unit feature) per event type.
EVENT_SCHEMAS = {
    "labevents": ("itemid", "value", "valueuom"),
    "inputevents": ("itemid", "amount", "amountuom"),
    "prescriptions": ("drug", "dose_val_rx", "dose_unit_rx"),
}
EVENT_TYPES = tuple(EVENT_SCHEMAS)

# Named concept pools per event type: (medical text, code, unit, value range).
_LAB_POOL = [
    ("Glucose", 50931, "mg/dL", (60.0, 300.0)),
    ("Potassium", 50971, "mEq/L", (2.5, 6.5)),
    ("Sodium", 50983, "mEq/L", (125.0, 155.0)),
    ("Creatinine", 50912, "mg/dL", (0.4, 5.0)),
    ("Hemoglobin", 51222, "g/dL", (6.0, 17.0)),
    ("Lactate", 50813, "mmol/L", (0.5, 9.0)),
    ("Platelet Count", 51265, "K/uL", (20.0, 500.0)),
    ("White Blood Cells", 51301, "K/uL", (1.0, 25.0)),
    ("Bilirubin Total", 50885, "mg/dL", (0.2, 12.0)),
    ("Albumin", 50862, "g/dL", (1.5, 5.5)),
]
_INPUT_POOL = [
    ("Normal Saline", 225158, "mL", (50.0, 1000.0)),
    ("Dextrose 5%", 220949, "mL", (50.0, 500.0)),
    ("Potassium Chloride", 225166, "mEq", (10.0, 60.0)),
    ("Propofol", 222168, "mg", (10.0, 200.0)),
    ("Norepinephrine", 221906, "mg", (0.5, 30.0)),
    ("Fentanyl", 221744, "mcg", (25.0, 250.0)),
    ("Dialysate Fluid", 225977, "mL", (500.0, 4000.0)),
    ("Packed Red Blood Cells", 225168, "mL", (200.0, 600.0)),
    ("Albumin 5%", 220864, "mL", (100.0, 500.0)),
    ("Insulin Regular", 223258, "units", (2.0, 20.0)),
]
_RX_POOL = [
    ("Aspirin", 7325, "mg", (81.0, 650.0)),
    ("Heparin", 1207, "units", (1000.0, 10000.0)),
    ("Metoprolol", 8052, "mg", (12.5, 200.0)),
    ("Furosemide", 4439, "mg", (10.0, 160.0)),
    ("Vancomycin", 11424, "mg", (250.0, 2000.0)),
    ("Warfarin", 11289, "mg", (1.0, 10.0)),
    ("Pantoprazole", 8591, "mg", (20.0, 80.0)),
    ("Ceftriaxone", 2193, "mg", (500.0, 2000.0)),
    ("Morphine", 8355, "mg", (1.0, 15.0)),
    ("Amiodarone", 421, "mg", (150.0, 900.0)),
]
_POOLS = {"labevents": _LAB_POOL, "inputevents": _INPUT_POOL, "prescriptions": _RX_POOL}

OBSERVATION_WINDOW_MINUTES = 720

# Label-model shape. The gain sets how sharply the logistic labels follow the
# concept frequencies; the concentration sets patient-level mixture variance.
LABEL_GAIN = 9.0
CONCEPT_CONCENTRATION = 5.0
_LABEL_MODEL_SEED = 202406
_ALT_ALIGNMENT = -0.45  # cosine between reference and fully-shifted label rows


@dataclass(frozen=True)
class FeaturePair:
    """One (feature name, feature value) pair of a medical event."""

    name: str
    value: FeatureValue

    def __post_init__(self):
        if not self.name:
            raise ValueError("feature name must be non-empty")
        if isinstance(self.value, float) and not math.isfinite(self.value):
            raise ValueError("numeric feature values must be finite")


@dataclass(frozen=True)
class MedicalEvent:
    event_type: str
    features: tuple[FeaturePair, ...]
    minutes_since_admission: int

    def __post_init__(self):
        if not self.features:
            raise ValueError("an event needs at least one feature pair")
        if self.minutes_since_admission < 0:
            raise ValueError("event time must be non-negative")


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    events: tuple[MedicalEvent, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if not self.events:
            raise ValueError("a patient needs at least one event")
        times = [e.minutes_since_admission for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("events must be ordered by time")


@dataclass
class CodeDictionary:
    """Client-local mapping (event_type, feature_name, code) -> medical text."""

    entries: dict[tuple[str, str, int], str] = field(default_factory=dict)

    def lookup(self, event_type: str, feature_name: str, code: int) -> str | None:
        return self.entries.get((event_type, feature_name, code))


@dataclass
class SchemaProfile:
    """Surface renamings applied to a client's schema.

    ``event_types`` and ``feature_names`` map canonical names to this
    client's local names (unmapped names pass through); ``code_offset`` is
    added to every medical code, with the dictionary remapped to match.
    """

    event_types: dict[str, str] = field(default_factory=dict)
    feature_names: dict[str, str] = field(default_factory=dict)
    code_offset: int = 0

    def is_identity(self) -> bool:
        return not self.event_types and not self.feature_names and self.code_offset == 0


@dataclass
class ClientGenSpec:
    client_id: str
    n_patients: int
    n_tasks: int = 4
    shift: float = 0.0
    n_concepts: int = 24
    mean_events: float = 8.0
    min_events: int = 2
    max_events: int = 24

    def validate(self):
        if self.n_patients < 10:
            raise ValueError("need at least 10 patients to split 8:1:1")
        if self.n_tasks < 1:
            raise ValueError("need at least one prediction task")
        if not 0.0 <= self.shift <= 1.0:
            raise ValueError("shift must lie in [0, 1]")
        if self.n_concepts < 2 or self.min_events < 1 or self.max_events < self.min_events:
            raise ValueError("degenerate generator configuration")


@dataclass
class ClientDataset:
    client_id: str
    patients: list[PatientRecord]
    dictionary: CodeDictionary
    schema_profile: SchemaProfile
    splits: dict[str, list[int]] = field(default_factory=dict)

    @property
    def n_tasks(self) -> int:
        return len(self.patients[0].labels) if self.patients else 0

    def split_patients(self, name: str) -> list[PatientRecord]:
        return [self.patients[i] for i in self.splits[name]]


def stable_hash(*parts) -> int:
    """Platform-stable 63-bit hash used for seed derivation."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2s(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def concept_table(n_concepts: int):
    """Concept -> (event_type, code, text, unit, value range), fixed globally.

    Concepts cycle through the event types; past the named pools they get
    synthetic names so any n_concepts works.
    """
    table = []
    for g in range(n_concepts):
        etype = EVENT_TYPES[g % len(EVENT_TYPES)]
        pool = _POOLS[etype]
        slot = g // len(EVENT_TYPES)
        if slot < len(pool):
            text, code, unit, rng_ = pool[slot]
        else:
            text = f"{etype.capitalize()} Item {slot}"
            code = 900000 + g
            unit, rng_ = "units", (1.0, 100.0)
        table.append((etype, code, text, unit, rng_))
    return table


def reference_prevalence(n_concepts: int) -> np.ndarray:
    weights = 0.92 ** np.arange(n_concepts)
    return weights / weights.sum()


def shifted_prevalence(n_concepts: int, shift: float) -> np.ndarray:
    ref = reference_prevalence(n_concepts)
    return (1.0 - shift) * ref + shift * ref[::-1]


def label_weights(n_tasks: int, n_concepts: int, shift: float) -> np.ndarray:
    """Per-task unit-norm weight rows, interpolated toward a rotated model.

    The fully-shifted rows are partially reversed relative to the reference
    (cosine _ALT_ALIGNMENT), so large shifts change which concepts drive
    each label, not just their prevalence.
    """
    rng = np.random.default_rng(np.random.SeedSequence([_LABEL_MODEL_SEED, n_tasks, n_concepts]))
    w_ref = rng.normal(size=(n_tasks, n_concepts))
    w_ref /= np.linalg.norm(w_ref, axis=1, keepdims=True)
    w_alt = np.empty_like(w_ref)
    for row in range(n_tasks):
        u = w_ref[row]
        v = rng.normal(size=n_concepts)
        v -= (v @ u) * u
        v /= np.linalg.norm(v)
        w_alt[row] = _ALT_ALIGNMENT * u + math.sqrt(1.0 - _ALT_ALIGNMENT**2) * v
    w = (1.0 - shift) * w_ref + shift * w_alt
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def _sample_patient(spec: ClientGenSpec, index: int, rng: np.random.Generator,
                    table, prevalence, weights) -> PatientRecord:
    k = int(np.clip(rng.poisson(spec.mean_events), spec.min_events, spec.max_events))
    theta = rng.dirichlet(CONCEPT_CONCENTRATION * prevalence)
    concepts = rng.choice(spec.n_concepts, size=k, p=theta)
    minutes = np.sort(rng.integers(0, OBSERVATION_WINDOW_MINUTES, size=k))

    events = []
    for g, minute in zip(concepts, minutes):
        etype, code, _text, unit, (lo, hi) = table[g]
        code_name, num_name, unit_name = EVENT_SCHEMAS[etype]
        numeric = round(float(rng.uniform(lo, hi)), 1)
        events.append(MedicalEvent(
            event_type=etype,
            features=(
                FeaturePair(code_name, int(code)),
                FeaturePair(num_name, numeric),
                FeaturePair(unit_name, unit),
            ),
            minutes_since_admission=int(minute),
        ))

    freq = np.bincount(concepts, minlength=spec.n_concepts) / k
    logits = LABEL_GAIN * (weights @ (freq - prevalence))
    probs = 1.0 / (1.0 + np.exp(-logits))
    labels = tuple(int(rng.random() < p) for p in probs)
    return PatientRecord(f"{spec.client_id}-p{index:05d}", tuple(events), labels)


def generate_client(spec: ClientGenSpec, seed: int) -> ClientDataset:
    """Generate one client's dataset; a pure function of (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, stable_hash(spec.client_id)]))
    table = concept_table(spec.n_concepts)
    prevalence = shifted_prevalence(spec.n_concepts, spec.shift)
    weights = label_weights(spec.n_tasks, spec.n_concepts, spec.shift)

    patients = [_sample_patient(spec, i, rng, table, prevalence, weights)
                for i in range(spec.n_patients)]

    entries = {}
    for etype, code, text, _unit, _rng in table:
        entries[(etype, EVENT_SCHEMAS[etype][0], code)] = text
    ds = ClientDataset(spec.client_id, patients, CodeDictionary(entries), SchemaProfile())
    return split_dataset(ds, seed)


def split_dataset(ds: ClientDataset, seed: int) -> ClientDataset:
    """Assign 8:1:1 train/valid/test splits; the remainder goes to train."""
    n = len(ds.patients)
    if n < 10:
        raise ValueError("need at least 10 patients to split 8:1:1")
    tenth = n // 10
    perm = np.random.default_rng(np.random.SeedSequence([seed, 811])).permutation(n)
    splits = {
        "test": sorted(int(i) for i in perm[:tenth]),
        "valid": sorted(int(i) for i in perm[tenth:2 * tenth]),
        "train": sorted(int(i) for i in perm[2 * tenth:]),
    }
    return replace(ds, splits=splits)


def _induced_map(mapping: dict[str, str], domain) -> dict[str, str]:
    full = {name: mapping.get(name, name) for name in domain}
    full.update(mapping)
    if len(set(full.values())) != len(full):
        raise ValueError(f"renaming table is not bijective: {mapping}")
    return full


def apply_schema_heterogeneity(ds: ClientDataset, profile: SchemaProfile,
                               seed: int = 0) -> ClientDataset:
    """Rewrite a dataset's surface schema without changing its semantics.

    Event types and feature names are renamed, codes are offset, and the
    dictionary is remapped so code resolution yields the same medical texts.
    ``seed`` is reserved for randomized profiles and currently unused.
    """
    del seed
    etypes = {e.event_type for p in ds.patients for e in p.events}
    fnames = {f.name for p in ds.patients for e in p.events for f in e.features}
    etype_map = _induced_map(profile.event_types, etypes)
    fname_map = _induced_map(profile.feature_names, fnames)

    def remap_feature(pair: FeaturePair) -> FeaturePair:
        value = pair.value + profile.code_offset if isinstance(pair.value, int) else pair.value
        return FeaturePair(fname_map.get(pair.name, pair.name), value)

    patients = [
        replace(p, events=tuple(
            MedicalEvent(
                etype_map.get(e.event_type, e.event_type),
                tuple(remap_feature(f) for f in e.features),
                e.minutes_since_admission,
            )
            for e in p.events
        ))
        for p in ds.patients
    ]
    entries = {
        (etype_map.get(et, et), fname_map.get(fn, fn), code + profile.code_offset): text
        for (et, fn, code), text in ds.dictionary.entries.items()
    }
    return ClientDataset(ds.client_id, patients, CodeDictionary(entries), profile,
                         dict(ds.splits))


def schema_profile_variant(index: int) -> SchemaProfile:
    """A small palette of schema-heterogeneity profiles; 0 is the identity."""
    variants = [
        SchemaProfile(),
        SchemaProfile(
            event_types={"labevents": "lab_events", "inputevents": "input_events"},
            feature_names={"itemid": "item_code", "valueuom": "value_unit"},
            code_offset=100000,
        ),
        SchemaProfile(
            event_types={"prescriptions": "medications"},
            feature_names={"drug": "drug_name", "dose_val_rx": "dose_value",
                           "dose_unit_rx": "dose_unit"},
            code_offset=37,
        ),
        SchemaProfile(
            event_types={"labevents": "laboratory", "prescriptions": "pharmacy"},
            feature_names={"itemid": "item_id", "value": "result_value",
                           "amount": "volume"},
            code_offset=250000,
        ),
        SchemaProfile(
            feature_names={"valueuom": "uom", "amountuom": "uom_amount"},
            code_offset=7,
        ),
    ]
    return variants[index % len(variants)]


def concept_histogram(patients: list[PatientRecord]) -> dict[tuple[str, int], float]:
    """Empirical distribution over (event type, primary code) pairs."""
    counts: dict[tuple[str, int], int] = {}
    total = 0
    for p in patients:
        for e in p.events:
            code = next((f.value for f in e.features if isinstance(f.value, int)), None)
            if code is None:
                continue
            counts[(e.event_type, code)] = counts.get((e.event_type, code), 0) + 1
            total += 1
    return {key: c / total for key, c in counts.items()}


def total_variation(hist_a: dict, hist_b: dict) -> float:
    keys = set(hist_a) | set(hist_b)
    return 0.5 * sum(abs(hist_a.get(k, 0.0) - hist_b.get(k, 0.0)) for k in keys)


# ---------------------------------------------------------------------------
# On-disk format: one JSONL file per client plus dictionary and schema JSON.

def _feature_to_json(pair: FeaturePair) -> dict:
    if isinstance(pair.value, int):
        return {"name": pair.name, "value": {"code": pair.value}}
    if isinstance(pair.value, float):
        return {"name": pair.name, "value": {"numeric": pair.value}}
    return {"name": pair.name, "value": {"text": pair.value}}


def _feature_from_json(obj: dict) -> FeaturePair:
    value = obj["value"]
    if "code" in value:
        return FeaturePair(obj["name"], int(value["code"]))
    if "numeric" in value:
        return FeaturePair(obj["name"], float(value["numeric"]))
    return FeaturePair(obj["name"], str(value["text"]))


def patient_to_json(p: PatientRecord) -> str:
    return json.dumps({
        "patient_id": p.patient_id,
        "events": [
            {
                "event_type": e.event_type,
                "features": [_feature_to_json(f) for f in e.features],
                "minutes_since_admission": e.minutes_since_admission,
            }
            for e in p.events
        ],
        "labels": list(p.labels),
    }, separators=(",", ":"))


def patient_from_json(line: str) -> PatientRecord:
    obj = json.loads(line)
    events = tuple(
        MedicalEvent(
            e["event_type"],
            tuple(_feature_from_json(f) for f in e["features"]),
            int(e["minutes_since_admission"]),
        )
        for e in obj["events"]
    )
    return PatientRecord(obj["patient_id"], events, tuple(int(x) for x in obj["labels"]))


def write_client(ds: ClientDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{ds.client_id}.jsonl", "w") as fh:
        for p in ds.patients:
            fh.write(patient_to_json(p) + "\n")
    nested: dict[str, dict[str, dict[str, str]]] = {}
    for (et, fn, code), text in sorted(ds.dictionary.entries.items()):
        nested.setdefault(et, {}).setdefault(fn, {})[str(code)] = text
    with open(out / f"{ds.client_id}.dict.json", "w") as fh:
        json.dump(nested, fh, indent=2, sort_keys=True)
        fh.write("\n")
    profile = ds.schema_profile
    with open(out / f"{ds.client_id}.schema.json", "w") as fh:
        json.dump({
            "event_types": profile.event_types,
            "feature_names": profile.feature_names,
            "code_offset": profile.code_offset,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_client(data_dir: str | Path, client_id: str,
                split_seed: int | None = None) -> ClientDataset:
    base = Path(data_dir)
    patients = []
    with open(base / f"{client_id}.jsonl") as fh:
        for line in fh:
            if line.strip():
                patients.append(patient_from_json(line))
    with open(base / f"{client_id}.dict.json") as fh:
        nested = json.load(fh)
    entries = {
        (et, fn, int(code)): text
        for et, by_name in nested.items()
        for fn, by_code in by_name.items()
        for code, text in by_code.items()
    }
    with open(base / f"{client_id}.schema.json") as fh:
        prof = json.load(fh)
    profile = SchemaProfile(prof["event_types"], prof["feature_names"],
                            int(prof["code_offset"]))
    ds = ClientDataset(client_id, patients, CodeDictionary(entries), profile)
    return split_dataset(ds, split_seed) if split_seed is not None else ds
