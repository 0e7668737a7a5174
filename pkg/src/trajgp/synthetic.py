"""Synthetic cohort generator with planted progression archetypes.

Three archetypes mirror the stratification the pipeline is meant to recover:
a large stable group with good vision, a smaller group whose acuity worsens
before reaching a plateau (with the noisiest course), and a small chronically
poor but stable group.  Visit gaps are exponential, acuity is emitted as
Snellen strings (plus occasional sub-chart codes on bad eyes), and the text
embeddings are built from archetype- and severity-keyed Gaussian directions
so the text features carry real signal for the extractor and the ablation
harness.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass, field

import numpy as np

from trajgp import rng as rng_mod
from trajgp.data import EMBEDDING_DIM, TEXT_FIELDS, DataError, RawEncounter

ARCHETYPE_NAMES = ("stable_good", "progressing", "stable_poor")

# Embedding field roles: which planted signal each populated field carries.
ROLE_ARCHETYPE = "archetype"
ROLE_SEVERITY = "severity"
ROLE_NOISE = "noise"

LOGMAR_MIN, LOGMAR_MAX = -0.3, 3.0


@dataclass
class ArchetypeCurve:
    level: float              # baseline logMAR
    rise: float = 0.0         # additional plateau height
    timescale_days: float = 400.0
    noise_sd: float = 0.05

    def mean_at(self, days_since_first: float) -> float:
        if self.rise == 0.0:
            return self.level
        return self.level + self.rise * (
            1.0 - np.exp(-days_since_first / self.timescale_days))


DEFAULT_CURVES = {
    "stable_good": ArchetypeCurve(level=0.1, noise_sd=0.05),
    "progressing": ArchetypeCurve(level=0.2, rise=0.9, timescale_days=400.0,
                                  noise_sd=0.12),
    "stable_poor": ArchetypeCurve(level=1.2, noise_sd=0.08),
}

# Mixture weights echo the observed cohort composition.
DEFAULT_WEIGHTS = (0.913, 0.074, 0.012)

DEFAULT_FIELD_ROLES = {
    "dx_name": ROLE_ARCHETYPE,
    "med_name": ROLE_SEVERITY,
    "lab_results": ROLE_NOISE,
}


@dataclass
class SyntheticConfig:
    n_patients: int = 300
    weights: tuple = DEFAULT_WEIGHTS
    curves: dict = field(default_factory=lambda: dict(DEFAULT_CURVES))
    field_roles: dict = field(default_factory=lambda: dict(DEFAULT_FIELD_ROLES))
    visits_min: int = 4
    visits_max: int = 12
    gap_mean_days: float = 90.0
    start_year_min: int = 2016
    start_year_max: int = 2022
    age_mean: float = 70.0
    age_sd: float = 8.0
    archetype_scale: float = 2.0
    severity_scale: float = 1.5
    embedding_noise_sd: float = 0.5
    extra_measurement_prob: float = 0.4
    special_code_prob: float = 0.15

    def validate(self) -> None:
        if self.n_patients < 3:
            raise DataError("need at least 3 patients (one per archetype)")
        w = np.asarray(self.weights, dtype=np.float64)
        # Rounded weight triples (e.g. 0.913/0.074/0.012) may miss 1 by a
        # little; they are renormalized at draw time.
        if w.shape != (3,) or np.any(w <= 0) or abs(w.sum() - 1.0) > 0.01:
            raise DataError("weights must be 3 positive values summing to 1")
        if set(self.curves) != set(ARCHETYPE_NAMES):
            raise DataError(f"curves must cover {ARCHETYPE_NAMES}")
        for name, role in self.field_roles.items():
            if name not in TEXT_FIELDS:
                raise DataError(f"unknown text field '{name}'")
            if role not in (ROLE_ARCHETYPE, ROLE_SEVERITY, ROLE_NOISE):
                raise DataError(f"unknown field role '{role}'")
        if not 1 <= self.visits_min <= self.visits_max:
            raise DataError("visit counts must satisfy 1 <= min <= max")


def to_snellen(logmar: float) -> str:
    """Snellen string whose conversion is the nearest attainable logMAR."""
    denominator = max(int(round(20.0 * 10.0 ** logmar)), 1)
    return f"20/{denominator}"


def generate_synthetic_cohort(config: SyntheticConfig, seed: int):
    """Returns (encounters, labels): flat encounter list plus the planted
    archetype index per patient.

    The seed defines a whole generative process, not just one draw: field
    directions come from a dedicated sub-stream and every patient draws
    from a stream keyed by its index, so output is byte-identical for
    identical inputs and growing ``n_patients`` extends the cohort without
    touching earlier patients."""
    config.validate()
    rng_dir = rng_mod.stream(seed, "synthetic", 0)

    # Per-field signal directions, fixed for the whole process.
    directions = {}
    for name, role in sorted(config.field_roles.items()):
        if role == ROLE_ARCHETYPE:
            vecs = rng_dir.normal(size=(3, EMBEDDING_DIM))
            directions[name] = vecs / np.linalg.norm(vecs, axis=1,
                                                     keepdims=True)
        elif role == ROLE_SEVERITY:
            vec = rng_dir.normal(size=EMBEDDING_DIM)
            directions[name] = vec / np.linalg.norm(vec)

    weights = np.asarray(config.weights, dtype=np.float64)
    weights = weights / weights.sum()

    encounters = []
    labels = {}
    for idx in range(config.n_patients):
        rng = rng_mod.stream(seed, "synthetic", idx + 1)
        pid = f"synth{idx:06d}"
        # First three patients cover every archetype; the rest draw weights.
        archetype = idx if idx < 3 else int(rng.choice(3, p=weights))
        labels[pid] = archetype
        curve = config.curves[ARCHETYPE_NAMES[archetype]]

        start = datetime.date(
            int(rng.integers(config.start_year_min, config.start_year_max + 1)),
            int(rng.integers(1, 13)), int(rng.integers(1, 29)))
        n_visits = int(rng.integers(config.visits_min, config.visits_max + 1))
        gaps = rng.exponential(config.gap_mean_days, size=n_visits - 1)
        offsets = np.concatenate([[0.0], np.cumsum(np.maximum(gaps, 1.0))])
        age0 = float(rng.normal(config.age_mean, config.age_sd))

        seen_dates = set()
        for offset in offsets:
            date = start + datetime.timedelta(days=float(offset))
            if date in seen_dates:
                continue
            seen_dates.add(date)
            severity = float(curve.mean_at(offset))
            target = float(np.clip(severity + rng.normal(0.0, curve.noise_sd),
                                   LOGMAR_MIN, LOGMAR_MAX))
            measurements = [to_snellen(target)]
            if rng.random() < config.extra_measurement_prob:
                worse = target + abs(rng.normal(0.0, 0.3))
                if worse > 1.8 and rng.random() < config.special_code_prob:
                    measurements.append(
                        str(rng.choice(["CF", "HM", "LP", "NLP"])))
                else:
                    measurements.append(to_snellen(min(worse, LOGMAR_MAX)))

            embedded = {}
            for name, role in sorted(config.field_roles.items()):
                noise = rng.normal(0.0, config.embedding_noise_sd,
                                   size=EMBEDDING_DIM)
                if role == ROLE_ARCHETYPE:
                    embedded[name] = (config.archetype_scale
                                      * directions[name][archetype] + noise)
                elif role == ROLE_SEVERITY:
                    embedded[name] = (config.severity_scale * severity
                                      * directions[name] + noise)
                else:
                    embedded[name] = noise

            encounters.append(RawEncounter(
                patient_id=pid, encounter_date=date,
                age=round(age0 + offset / 365.25, 2),
                sex=str(rng.choice(["F", "M"])),
                race="synthetic", ethnicity="synthetic",
                embedded_fields=embedded,
                acuity_measurements=measurements))
    return encounters, labels


def write_labels_csv(labels: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("patient_id,archetype,archetype_name\n")
        for pid in sorted(labels):
            idx = labels[pid]
            fh.write(f"{pid},{idx},{ARCHETYPE_NAMES[idx]}\n")
