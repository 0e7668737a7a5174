"""Multi-seed protocol, feature-group ablation, and permutation importance.

Feature groups map onto the documented feature layout: AGE covers the age
column, every text field covers its embedding block plus presence bit.
Ablation zeroes a group across all splits and retrains from scratch on a
fixed seed; permutation importance shuffles the group across test records
under a trained model with no retraining.  The seed protocol reruns the
whole split/train/test pipeline per seed and reports means and deviations.
"""

from __future__ import annotations

import copy
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from trajgp import data, metrics, rng as rng_mod, training

FEATURE_GROUPS = ("AGE",) + tuple(name.upper() for name in data.TEXT_FIELDS)


def group_indices(group: str) -> np.ndarray:
    """Feature-column indices for a named group (case-insensitive)."""
    layout = data.feature_layout()
    key = group.strip().upper()
    if key == "AGE":
        lo, hi = layout["age"]
        return np.arange(lo, hi)
    field = key.lower()
    if field in data.TEXT_FIELDS:
        elo, ehi = layout[f"emb_{field}"]
        plo, phi = layout[f"presence_{field}"]
        return np.concatenate([np.arange(elo, ehi), np.arange(plo, phi)])
    raise ValueError(f"unknown feature group '{group}'; valid groups: "
                     f"{', '.join(FEATURE_GROUPS)}")


def _zero_group_sequences(sequences, cols):
    out = []
    for seq in sequences:
        records = []
        for rec in seq.records:
            feats = rec.features.copy()
            feats[cols] = 0.0
            records.append(data.EncodedRecord(feats, rec.timestamp,
                                              rec.target))
        out.append(data.PatientSequence(seq.patient_id, records))
    return out


def ablate_dataset(dataset: data.SplitDataset, group: str) -> data.SplitDataset:
    """Copy of the dataset with one feature group zeroed in every split."""
    cols = group_indices(group)
    return data.SplitDataset(
        train=_zero_group_sequences(dataset.train, cols),
        val=_zero_group_sequences(dataset.val, cols),
        test=_zero_group_sequences(dataset.test, cols),
        stats=dataset.stats, seed=dataset.seed)


def _test_mse(model, dataset):
    samples = data.build_prefix_samples(dataset.test,
                                        model.settings.max_prefix_len)
    targets = np.array([s.target for s in samples])
    means, _ = model.predict(samples)
    return float(np.mean((means - targets) ** 2))


def run_ablation(settings: training.TrainSettings, dataset: data.SplitDataset,
                 groups, fixed_seed: int = 42) -> dict:
    """Baseline plus one retrain-from-scratch per removed feature group."""
    groups = list(groups)
    for group in groups:
        group_indices(group)  # validate before any training
    baseline_model = training.train_model(settings, dataset, fixed_seed)
    results = {
        "fixed_seed": fixed_seed,
        "baseline_mse": _test_mse(baseline_model, dataset),
        "groups": {},
    }
    for group in groups:
        ablated = ablate_dataset(dataset, group)
        model = training.train_model(settings, ablated, fixed_seed)
        results["groups"][group.upper()] = _test_mse(model, ablated)
    return results


def permutation_importance(model: training.TrainedModel, sequences,
                           group: str, seed: int) -> dict:
    """MSE increase when one group's values are shuffled across test records.

    The permutation acts at record level (whole embedding block plus
    presence bit move together), sequences are rebuilt, and the same trained
    model is re-applied; no retraining happens.
    """
    cols = group_indices(group)
    base_samples = data.build_prefix_samples(sequences,
                                             model.settings.max_prefix_len)
    targets = np.array([s.target for s in base_samples])
    base_means, _ = model.predict(base_samples)
    base_mse = float(np.mean((base_means - targets) ** 2))

    records = [rec for seq in sequences for rec in seq.records]
    order = rng_mod.stream(seed, "permutation").permutation(len(records))
    blocks = [records[i].features[cols].copy() for i in order]
    permuted_sequences = []
    k = 0
    for seq in sequences:
        new_records = []
        for rec in seq.records:
            feats = rec.features.copy()
            feats[cols] = blocks[k]
            k += 1
            new_records.append(data.EncodedRecord(feats, rec.timestamp,
                                                  rec.target))
        permuted_sequences.append(data.PatientSequence(seq.patient_id,
                                                       new_records))
    perm_samples = data.build_prefix_samples(permuted_sequences,
                                             model.settings.max_prefix_len)
    perm_means, _ = model.predict(perm_samples)
    perm_mse = float(np.mean((perm_means - targets) ** 2))
    return {"group": group.upper(), "baseline_mse": base_mse,
            "permuted_mse": perm_mse, "delta_mse": perm_mse - base_mse}


# ---------------------------------------------------------------------------
# Multi-seed protocol
# ---------------------------------------------------------------------------

METRIC_FIELDS = ("mse", "mae", "r2", "clinical_accuracy", "crps",
                 "coverage95")


@dataclass
class SeedSummary:
    seeds: list
    rows: list            # per-seed metric dicts, protocol order
    mean: dict
    std: dict

    def to_json(self):
        return {"seeds": list(self.seeds), "rows": list(self.rows),
                "mean": dict(self.mean), "std": dict(self.std)}


def summarize_rows(seeds, rows) -> SeedSummary:
    mean, std = {}, {}
    for name in METRIC_FIELDS:
        values = [r[name] for r in rows if r.get(name) is not None]
        if values:
            mean[name] = float(np.mean(values))
            std[name] = float(np.std(values))
    return SeedSummary(seeds=list(seeds), rows=list(rows), mean=mean, std=std)


def _one_seed(args):
    settings, encounters, seed = args
    dataset = data.prepare_split_dataset(encounters, seed=seed)
    model = training.train_model(settings, dataset, seed)
    samples = data.build_prefix_samples(dataset.test,
                                        settings.max_prefix_len)
    targets = np.array([s.target for s in samples])
    means, variances = model.predict(samples)
    if variances is not None:
        report = metrics.evaluate_gaussian(means, variances, targets)
    else:
        report = metrics.evaluate_point(means, targets)
    row = report.to_json()
    row["seed"] = seed
    return row


def run_seed_protocol(settings: training.TrainSettings, encounters, seeds,
                      jobs: int = 1, on_partial=None) -> SeedSummary:
    """Full pipeline (split, train, test) per seed; means and deviations
    across seeds.  A failing seed aborts after persisting the rows finished
    so far through ``on_partial``."""
    if not seeds:
        raise ValueError("at least one seed required")
    rows = []
    tasks = [(copy.deepcopy(settings), encounters, seed) for seed in seeds]
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for row in pool.map(_one_seed, tasks):
                    rows.append(row)
                    if on_partial:
                        on_partial(rows)
        else:
            for task in tasks:
                rows.append(_one_seed(task))
                if on_partial:
                    on_partial(rows)
    except Exception:
        if on_partial:
            on_partial(rows)
        raise
    return summarize_rows(seeds, rows)
