"""Encounter ingestion, logMAR targets, feature assembly, and splits.

Input is JSON-lines, one encounter per line, with precomputed 768-dim text
embeddings for up to seven fields.  Feature vectors follow a fixed layout
(documented by :func:`feature_layout`): z-scored age, six cyclical date
features, seven embedding blocks, and seven presence bits.  Normalization
statistics always come from the training split alone.
"""

from __future__ import annotations

import datetime
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from trajgp import extractors, rng as rng_mod

EMBEDDING_DIM = 768

# Canonical text-field order; embedding blocks appear in this order.
TEXT_FIELDS = ("specialty", "visit_type", "reason_for_visit", "proc_name",
               "dx_name", "med_name", "lab_results")

SPECIAL_ACUITY_DEFAULTS = {"CF": 1.9, "HM": 2.3, "LP": 2.7, "NLP": 3.0}

MISSING_MARKERS = {None, "", "-1"}

FEATURE_DIM = 1 + 6 + len(TEXT_FIELDS) * EMBEDDING_DIM + len(TEXT_FIELDS)


class DataError(ValueError):
    """Malformed input data (bad schema, unreadable files, too few patients)."""


class AcuityParseError(DataError):
    """A single acuity entry that is neither a fraction, a special code,
    nor a missing marker."""


def feature_layout() -> OrderedDict:
    """Stable name -> index-range map for every feature block."""
    layout = OrderedDict()
    layout["age"] = (0, 1)
    layout["date_cyclical"] = (1, 7)
    off = 7
    for name in TEXT_FIELDS:
        layout[f"emb_{name}"] = (off, off + EMBEDDING_DIM)
        off += EMBEDDING_DIM
    for i, name in enumerate(TEXT_FIELDS):
        layout[f"presence_{name}"] = (off + i, off + i + 1)
    return layout


def snellen_to_logmar(entry, special_codes: dict | None = None):
    """logMAR for one acuity entry.

    Fractions "N/D" map to log10(D / N); the four sub-chart codes map to
    configured constants; missing markers map to None.  Anything else raises
    :class:`AcuityParseError`.
    """
    if entry is None:
        return None
    text = str(entry).strip()
    if text in MISSING_MARKERS or text == "":
        return None
    codes = special_codes or SPECIAL_ACUITY_DEFAULTS
    upper = text.upper()
    if upper in codes:
        return float(codes[upper])
    if "/" in text:
        num, _, den = text.partition("/")
        try:
            n, d = int(num), int(den)
        except ValueError:
            raise AcuityParseError(f"malformed acuity entry: {entry!r}") from None
        if n <= 0 or d <= 0:
            raise AcuityParseError(f"non-positive acuity fraction: {entry!r}")
        return math.log10(d / n)
    raise AcuityParseError(f"malformed acuity entry: {entry!r}")


def aggregate_acuity(values):
    """Best (minimum) logMAR across parsed measurements; None when empty."""
    values = [v for v in values if v is not None]
    if not values:
        return None
    return float(min(values))


@dataclass
class RawEncounter:
    patient_id: str
    encounter_date: datetime.date
    age: float | None
    sex: str = ""
    race: str = ""
    ethnicity: str = ""
    embedded_fields: dict = field(default_factory=dict)
    acuity_measurements: list = field(default_factory=list)

    @classmethod
    def from_json(cls, obj: dict) -> "RawEncounter":
        try:
            patient_id = str(obj["patient_id"])
            date = datetime.date.fromisoformat(obj["encounter_date"])
        except (KeyError, ValueError) as err:
            raise DataError(f"bad encounter record: {err}") from err
        age = obj.get("age")
        if age is not None:
            age = float(age)
            if age == -1.0:  # ingestion-boundary missing sentinel
                age = None
            elif age < 0:
                raise DataError(f"negative age {age} for {patient_id}")
        fields = {}
        for name, vec in (obj.get("embedded_fields") or {}).items():
            if name not in TEXT_FIELDS:
                raise DataError(f"unknown embedded field '{name}'")
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (EMBEDDING_DIM,):
                raise DataError(
                    f"embedding for '{name}' has length {arr.size}, "
                    f"expected {EMBEDDING_DIM}")
            fields[name] = arr
        acuity = obj.get("acuity_measurements") or []
        if isinstance(acuity, dict):  # per-eye map; flattened, eyes unused
            flat = []
            for eye in sorted(acuity):
                flat.extend(acuity[eye])
            acuity = flat
        return cls(patient_id=patient_id, encounter_date=date, age=age,
                   sex=str(obj.get("sex") or ""),
                   race=str(obj.get("race") or ""),
                   ethnicity=str(obj.get("ethnicity") or ""),
                   embedded_fields=fields, acuity_measurements=list(acuity))

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "encounter_date": self.encounter_date.isoformat(),
            "age": -1.0 if self.age is None else self.age,
            "sex": self.sex,
            "race": self.race,
            "ethnicity": self.ethnicity,
            "embedded_fields": {k: v.tolist()
                                for k, v in self.embedded_fields.items()},
            "acuity_measurements": list(self.acuity_measurements),
        }


@dataclass
class IngestReport:
    encounters_read: int = 0
    acuity_entries_malformed: int = 0
    records_without_target: int = 0
    duplicates_removed: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EncodedRecord:
    features: np.ndarray      # (FEATURE_DIM,)
    timestamp: float          # days (proleptic ordinal)
    target: float             # logMAR


@dataclass
class PatientSequence:
    patient_id: str
    records: list

    def __post_init__(self):
        if not self.records:
            raise DataError(f"patient {self.patient_id} has no usable records")
        times = [r.timestamp for r in self.records]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"records for {self.patient_id} not strictly "
                            "increasing in time")


@dataclass
class NormalizationStats:
    age_mean: float
    age_std: float
    emb_mean: dict            # field -> (768,)
    emb_std: dict             # field -> (768,)
    emb_count: dict           # field -> int

    def to_json(self) -> dict:
        return {
            "age_mean": self.age_mean,
            "age_std": self.age_std,
            "emb_count": dict(self.emb_count),
            "emb_mean": {k: v.tolist() for k, v in self.emb_mean.items()},
            "emb_std": {k: v.tolist() for k, v in self.emb_std.items()},
            "feature_layout": {k: list(v) for k, v in feature_layout().items()},
            "feature_dim": FEATURE_DIM,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NormalizationStats":
        return cls(
            age_mean=float(obj["age_mean"]), age_std=float(obj["age_std"]),
            emb_mean={k: np.asarray(v) for k, v in obj["emb_mean"].items()},
            emb_std={k: np.asarray(v) for k, v in obj["emb_std"].items()},
            emb_count={k: int(v) for k, v in obj["emb_count"].items()},
        )


def compute_stats(encounters) -> NormalizationStats:
    """Means and standard deviations for age and each embedding block.

    Embedding statistics use present fields only; zero spreads fall back to
    one so z-scoring never divides by zero.
    """
    ages = [e.age for e in encounters if e.age is not None]
    age_mean = float(np.mean(ages)) if ages else 0.0
    age_std = float(np.std(ages)) if len(ages) > 1 else 1.0
    if age_std == 0.0:
        age_std = 1.0
    emb_mean, emb_std, emb_count = {}, {}, {}
    for name in TEXT_FIELDS:
        vecs = [e.embedded_fields[name] for e in encounters
                if name in e.embedded_fields]
        emb_count[name] = len(vecs)
        if vecs:
            stack = np.stack(vecs)
            mean = stack.mean(axis=0)
            std = stack.std(axis=0)
            std[std == 0.0] = 1.0
        else:
            mean = np.zeros(EMBEDDING_DIM)
            std = np.ones(EMBEDDING_DIM)
        emb_mean[name] = mean
        emb_std[name] = std
    return NormalizationStats(age_mean, age_std, emb_mean, emb_std, emb_count)


def assemble_features(raw: RawEncounter, stats: NormalizationStats,
                      special_codes: dict | None = None,
                      report: IngestReport | None = None):
    """EncodedRecord for one encounter, or None when no target parses.

    Layout: [age_z | day/month/year (sin, cos) | seven 768-dim embedding
    blocks | seven presence bits].  Missing embeddings become zero blocks
    with presence 0; missing age z-scores to 0.
    """
    parsed = []
    for entry in raw.acuity_measurements:
        try:
            parsed.append(snellen_to_logmar(entry, special_codes))
        except AcuityParseError:
            if report is not None:
                report.acuity_entries_malformed += 1
    target = aggregate_acuity(parsed)
    if target is None:
        if report is not None:
            report.records_without_target += 1
        return None

    features = np.zeros(FEATURE_DIM)
    if raw.age is not None:
        features[0] = (raw.age - stats.age_mean) / stats.age_std
    date = raw.encounter_date
    features[1:7] = extractors.cyclical_encode(date.year, date.month, date.day)
    off = 7
    presence_off = 7 + len(TEXT_FIELDS) * EMBEDDING_DIM
    for i, name in enumerate(TEXT_FIELDS):
        vec = raw.embedded_fields.get(name)
        if vec is not None:
            features[off:off + EMBEDDING_DIM] = \
                (vec - stats.emb_mean[name]) / stats.emb_std[name]
            features[presence_off + i] = 1.0
        off += EMBEDDING_DIM
    return EncodedRecord(features=features,
                         timestamp=float(date.toordinal()),
                         target=float(target))


def group_encounters(encounters, report: IngestReport | None = None) -> dict:
    """patient_id -> date-sorted encounters with same-date duplicates removed."""
    by_patient: dict[str, list] = {}
    for enc in encounters:
        by_patient.setdefault(enc.patient_id, []).append(enc)
    out = {}
    for pid, encs in by_patient.items():
        encs = sorted(encs, key=lambda e: e.encounter_date)
        deduped = []
        seen = set()
        for enc in encs:
            if enc.encounter_date in seen:
                if report is not None:
                    report.duplicates_removed += 1
                continue
            seen.add(enc.encounter_date)
            deduped.append(enc)
        out[pid] = deduped
    return out


def encode_patients(grouped: dict, stats: NormalizationStats,
                    special_codes=None, report=None):
    """PatientSequence list (patients with no supervised record are dropped)."""
    sequences = []
    for pid in sorted(grouped):
        records = []
        for enc in grouped[pid]:
            rec = assemble_features(enc, stats, special_codes, report)
            if rec is not None:
                records.append(rec)
        if records:
            sequences.append(PatientSequence(pid, records))
    return sequences


@dataclass
class SplitDataset:
    train: list
    val: list
    test: list
    stats: NormalizationStats
    seed: int

    def split_ids(self) -> dict:
        return {name: [s.patient_id for s in getattr(self, name)]
                for name in ("train", "val", "test")}


def split_patient_ids(patient_ids, seed: int):
    """Deterministic 70/20/10 partition at patient granularity."""
    ids = sorted(patient_ids)
    if len(ids) < 10:
        raise DataError(f"need at least 10 patients to split, got {len(ids)}")
    order = rng_mod.stream(seed, "split").permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    a, b = int(n * 0.7), int(n * 0.9)
    return shuffled[:a], shuffled[a:b], shuffled[b:]


def prepare_split_dataset(encounters, seed: int, special_codes=None,
                          report=None) -> SplitDataset:
    """Group, split by patient, fit train-only stats, and encode all splits."""
    grouped = group_encounters(encounters, report)
    train_ids, val_ids, test_ids = split_patient_ids(grouped, seed)
    # Canonical (sorted) order keeps the statistics exactly recomputable.
    train_encounters = [e for pid in sorted(train_ids) for e in grouped[pid]]
    stats = compute_stats(train_encounters)

    def encode(ids):
        return encode_patients({pid: grouped[pid] for pid in ids}, stats,
                               special_codes, report)

    return SplitDataset(train=encode(train_ids), val=encode(val_ids),
                        test=encode(test_ids), stats=stats, seed=seed)


# ---------------------------------------------------------------------------
# Prefix samples
# ---------------------------------------------------------------------------

@dataclass
class PrefixSample:
    patient_id: str
    features: np.ndarray      # (t, d) most-recent records of the prefix
    target: float
    prefix_length: int        # uncapped prefix length


def build_prefix_samples(sequences, max_prefix_len: int = 32):
    """One supervised sample per record: the capped history up to and
    including it, targeting its acuity score."""
    samples = []
    for seq in sequences:
        feats = np.stack([r.features for r in seq.records])
        for t in range(1, len(seq.records) + 1):
            lo = max(0, t - max_prefix_len)
            samples.append(PrefixSample(
                patient_id=seq.patient_id,
                features=feats[lo:t],
                target=seq.records[t - 1].target,
                prefix_length=t))
    return samples


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def read_encounters_jsonl(path):
    encounters = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as err:
        raise DataError(f"cannot read encounter file {path}: {err}") from err
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"{path}:{lineno}: invalid JSON: {err}") from err
            encounters.append(RawEncounter.from_json(obj))
    return encounters


def write_encounters_jsonl(encounters, path):
    with open(path, "w", encoding="utf-8") as fh:
        for enc in encounters:
            fh.write(json.dumps(enc.to_json(), sort_keys=True))
            fh.write("\n")


CSV_COLUMNS = ("patient_id", "encounter_date", "age", "sex", "race",
               "ethnicity", "acuity_measurements")


def read_encounters_csv(path):
    """Embedding-free CSV variant for targets-only experiments.

    Expected header: patient_id, encounter_date, age, sex, race, ethnicity,
    acuity_measurements (acuity entries separated by ';').  Embedding blocks
    stay zero with presence bits 0.
    """
    import csv

    encounters = []
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as err:
        raise DataError(f"cannot read encounter file {path}: {err}") from err
    with fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing CSV column(s): "
                            f"{', '.join(sorted(missing))}")
        for row in reader:
            age = row.get("age", "")
            obj = {
                "patient_id": row["patient_id"],
                "encounter_date": row["encounter_date"],
                "age": float(age) if age not in ("", None) else -1.0,
                "sex": row.get("sex", ""),
                "race": row.get("race", ""),
                "ethnicity": row.get("ethnicity", ""),
                "acuity_measurements": [
                    v for v in (row["acuity_measurements"] or "").split(";")
                    if v != ""],
            }
            encounters.append(RawEncounter.from_json(obj))
    return encounters


def read_encounters(path):
    """Dispatch on extension: .csv for the embedding-free variant,
    anything else is treated as JSON-lines."""
    if str(path).lower().endswith(".csv"):
        return read_encounters_csv(path)
    return read_encounters_jsonl(path)


def _write_shard(path, sequences):
    if sequences:
        features = np.concatenate([np.stack([r.features for r in s.records])
                                   for s in sequences])
        timestamps = np.concatenate([[r.timestamp for r in s.records]
                                     for s in sequences])
        targets = np.concatenate([[r.target for r in s.records]
                                  for s in sequences])
        lengths = np.array([len(s.records) for s in sequences])
    else:
        features = np.zeros((0, FEATURE_DIM))
        timestamps = np.zeros(0)
        targets = np.zeros(0)
        lengths = np.zeros(0, dtype=np.int64)
    np.savez_compressed(
        path, features=features, timestamps=timestamps, targets=targets,
        lengths=lengths,
        patient_ids=np.array([s.patient_id for s in sequences], dtype="U64"))


def _read_shard(path):
    with np.load(path, allow_pickle=False) as z:
        features = z["features"]
        timestamps = z["timestamps"]
        targets = z["targets"]
        lengths = z["lengths"].astype(int)
        patient_ids = [str(p) for p in z["patient_ids"]]
    sequences = []
    off = 0
    for pid, ln in zip(patient_ids, lengths):
        records = [EncodedRecord(features[off + i], float(timestamps[off + i]),
                                 float(targets[off + i])) for i in range(ln)]
        sequences.append(PatientSequence(pid, records))
        off += ln
    return sequences


def save_dataset(out_dir, dataset: SplitDataset, report: IngestReport):
    """Preprocessed dataset directory: split manifests, train-only stats,
    encoded shards, and the ingest report."""
    import pathlib
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "splits.json", "w", encoding="utf-8") as fh:
        json.dump({"seed": dataset.seed, **dataset.split_ids()}, fh,
                  indent=1, sort_keys=True)
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(dataset.stats.to_json(), fh, sort_keys=True)
    with open(out / "ingest_report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=1, sort_keys=True)
    for name in ("train", "val", "test"):
        _write_shard(out / f"{name}.npz", getattr(dataset, name))


def load_dataset(data_dir) -> SplitDataset:
    import pathlib
    data = pathlib.Path(data_dir)
    if not (data / "splits.json").exists():
        raise DataError(f"no preprocessed dataset at {data_dir} "
                        "(missing splits.json)")
    with open(data / "splits.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(data / "stats.json", encoding="utf-8") as fh:
        stats = NormalizationStats.from_json(json.load(fh))
    return SplitDataset(
        train=_read_shard(data / "train.npz"),
        val=_read_shard(data / "val.npz"),
        test=_read_shard(data / "test.npz"),
        stats=stats, seed=int(manifest["seed"]))


def read_labels_csv(path) -> dict:
    labels = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("patient_id"):
            raise DataError(f"{path}: expected a patient_id,... header")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            pid, label = line.split(",")[:2]
            labels[pid] = int(label)
    return labels
