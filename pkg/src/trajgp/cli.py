"""Command-line entry point wiring the pipeline end to end.

    trajgp generate|preprocess|train|evaluate|cluster|ablate|importance
           --config FILE [--seed N] [--out DIR] [--jobs K]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  TRAJGP_LOG in {error, info, debug} controls verbosity.  All
reports are UTF-8 JSON plus aligned text tables; wall-clock timestamps live
only in the run manifest, so reports are byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import pathlib
import sys

import numpy as np

import trajgp
from trajgp import autodiff as ad
from trajgp import (clustering, config as config_mod, data, experiments,
                    metrics, rng as rng_mod, synthetic, training)

log = logging.getLogger("trajgp")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _setup_logging():
    level = os.environ.get("TRAJGP_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    if level not in levels:
        level = "info"
    logging.basicConfig(level=levels[level],
                        format="%(levelname)s %(name)s: %(message)s")


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _manifest(out_dir, config, seed, artifacts, started):
    return {
        "config_hash": config_mod.config_hash(config),
        "seed": seed,
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "artifacts": sorted(str(a) for a in artifacts),
        "version": trajgp.__version__,
    }


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _out_dir(args):
    out = pathlib.Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> config_mod.ExperimentConfig:
    if not args.config:
        raise config_mod.ConfigError("--config is required")
    return config_mod.from_file(args.config)


def _resolve_seed(args, config) -> int:
    return args.seed if args.seed is not None else config.seeds[0]


def _load_model(checkpoint_path, config) -> training.TrainedModel:
    path = pathlib.Path(checkpoint_path)
    if not path.exists():
        raise data.DataError(
            f"missing checkpoint: expected {path} (run 'trajgp train' first)")
    params, meta = ad.load_checkpoint(path)
    settings = config.train_settings()
    if meta.get("model_type") and meta["model_type"] != settings.model_type:
        raise config_mod.ConfigError(
            f"checkpoint was trained as '{meta['model_type']}' but the "
            f"config requests '{settings.model_type}'")
    return training.TrainedModel(settings.model_type, settings, params,
                                 int(meta.get("best_epoch", -1)), [])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    if config.synthetic.n_patients < 1:
        raise config_mod.ConfigError("synthetic.n_patients must be positive")
    out = _out_dir(args)
    started = _now()
    encounters, labels = synthetic.generate_synthetic_cohort(
        config.synthetic, seed)
    cohort_path = out / "cohort.jsonl"
    labels_path = out / "labels.csv"
    data.write_encounters_jsonl(encounters, cohort_path)
    synthetic.write_labels_csv(labels, labels_path)
    log.info("wrote %d encounters for %d patients to %s",
             len(encounters), config.synthetic.n_patients, cohort_path)
    _write_json(out / "manifest.json",
                _manifest(out, config, seed, [cohort_path, labels_path],
                          started))
    return EXIT_OK


def cmd_preprocess(args):
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    if not config.data.input:
        raise config_mod.ConfigError("data.input (cohort JSONL) is required")
    out = _out_dir(args)
    started = _now()
    report = data.IngestReport()
    encounters = data.read_encounters(config.data.input)
    report.encounters_read = len(encounters)
    dataset = data.prepare_split_dataset(
        encounters, seed=seed, special_codes=config.data.special_acuity,
        report=report)
    ds_dir = out / "dataset"
    data.save_dataset(ds_dir, dataset, report)
    log.info("dataset written to %s (train/val/test = %d/%d/%d patients)",
             ds_dir, len(dataset.train), len(dataset.val), len(dataset.test))
    _write_json(out / "manifest.json",
                _manifest(out, config, seed, [ds_dir], started))
    return EXIT_OK


def _dataset_from(config) -> data.SplitDataset:
    if not config.data.dataset_dir:
        raise config_mod.ConfigError(
            "data.dataset_dir (preprocessed dataset) is required")
    return data.load_dataset(config.data.dataset_dir)


def cmd_train(args):
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    out = _out_dir(args)
    started = _now()
    dataset = _dataset_from(config)
    settings = config.train_settings()
    ckpt_path = out / "checkpoint.json"
    log_path = out / "train_log.jsonl"

    start_epoch = 0
    initial_params = None
    if args.resume:
        if not ckpt_path.exists():
            raise config_mod.ConfigError(
                f"--resume given but no checkpoint at {ckpt_path}")
        params, meta = ad.load_checkpoint(ckpt_path)
        if meta.get("config_hash") != config_mod.config_hash(config):
            raise config_mod.ConfigError(
                "--resume rejected: config hash mismatch "
                f"(checkpoint {meta.get('config_hash', '?')[:12]}..., "
                f"current {config_mod.config_hash(config)[:12]}...)")
        start_epoch = int(meta.get("epochs_completed", 0))
        initial_params = params
        if start_epoch >= settings.epochs:
            log.info("nothing to resume: %d epochs already complete",
                     start_epoch)
            return EXIT_OK

    model = training.train_model(settings, dataset, seed,
                                 initial_params=initial_params,
                                 start_epoch=start_epoch)
    meta = {
        "model_type": model.model_type,
        "best_epoch": model.best_epoch,
        "epochs_completed": settings.epochs,
        "seed": seed,
        "config_hash": config_mod.config_hash(config),
    }
    ad.save_checkpoint(ckpt_path, model.params, meta=meta)
    mode = "a" if args.resume else "w"
    with open(log_path, mode, encoding="utf-8") as fh:
        for entry in model.log:
            fh.write(json.dumps(entry, sort_keys=True))
            fh.write("\n")
    diverged = any(e.get("event") == "divergence" for e in model.log)
    log.info("checkpoint written to %s (best epoch %d)", ckpt_path,
             model.best_epoch)
    _write_json(out / "manifest.json",
                _manifest(out, config, seed, [ckpt_path, log_path], started))
    return EXIT_NUMERICAL if diverged else EXIT_OK


def cmd_evaluate(args):
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    out = _out_dir(args)
    started = _now()
    dataset = _dataset_from(config)
    model = _load_model(args.checkpoint or (out / "checkpoint.json"), config)
    train_samples = data.build_prefix_samples(dataset.train,
                                              config.data.max_prefix_len)
    constant_mean = float(np.mean([s.target for s in train_samples]))
    reports = training.evaluate_model(model, dataset.test,
                                      constant_mean=constant_mean)
    payload = {name: r.to_json() for name, r in reports.items()}
    report_path = out / "report.json"
    _write_json(report_path, payload)
    headers = ["model", "mse", "mae", "r2", "+/-0.1 (%)", "crps",
               "coverage95"]
    rows = [[name, r.mse, r.mae, r.r2, r.clinical_accuracy, r.crps,
             r.coverage95] for name, r in reports.items()]
    text_path = out / "report.txt"
    text_path.write_text(metrics.format_table(headers, rows),
                         encoding="utf-8")
    log.info("evaluation report written to %s", report_path)
    _write_json(out / "manifest.json",
                _manifest(out, config, seed, [report_path, text_path],
                          started))
    return EXIT_OK


def cmd_cluster(args):
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    out = _out_dir(args)
    started = _now()
    dataset = _dataset_from(config)
    model = _load_model(args.checkpoint or (out / "checkpoint.json"), config)
    sequences = dataset.train + dataset.val + dataset.test
    sample_size = args.sample_size or config.clustering.sample_size
    if sample_size and sample_size < len(sequences):
        order = np.sort(rng_mod.stream(seed, "clustering_sample").choice(
            len(sequences), size=sample_size, replace=False))
        sequences = [sequences[i] for i in order]

    trajectories = model.predict_sequences(
        sequences, include_noise=config.clustering.include_noise)
    profiles = clustering.build_profiles(
        trajectories, grid_points=config.clustering.grid_points,
        log_variance=config.clustering.log_variance)
    x = clustering.profile_matrix(profiles)

    method, c, rows, chosen = clustering.model_select(
        x, seed=seed, methods=tuple(config.clustering.methods),
        c_grid=tuple(config.clustering.c_grid), jobs=max(args.jobs, 1))
    stability = clustering.stability_protocol(
        x, method, c, seed=seed, n_runs=config.clustering.stability_runs,
        subsample=config.clustering.stability_subsample)

    assignments_path = out / "assignments.csv"
    with open(assignments_path, "w", encoding="utf-8") as fh:
        fh.write("patient_id,cluster\n")
        for profile, label in zip(profiles, chosen.labels):
            fh.write(f"{profile.patient_id},{int(label)}\n")

    comparison = {
        "selected": {"method": method, "c": c},
        "rows": [r.to_json() for r in rows],
        "stability": stability.to_json(),
        "backend": clustering.cluster_backend(),
    }
    labels_file = args.labels or config.data.labels
    if labels_file:
        truth = data.read_labels_csv(labels_file)
        ordered = [truth.get(p.patient_id) for p in profiles]
        known = [i for i, v in enumerate(ordered) if v is not None]
        if known:
            comparison["ari_vs_truth"] = clustering.adjusted_rand_index(
                np.asarray([ordered[i] for i in known]),
                chosen.labels[known])
    comparison_path = out / "comparison.json"
    _write_json(comparison_path, comparison)
    text = metrics.format_table(
        ["method", "c", "silhouette", "davies_bouldin", "sizes",
         "imbalanced"],
        [[r.method, r.c, r.silhouette, r.davies_bouldin,
          "/".join(str(s) for s in r.sizes), r.imbalanced] for r in rows])
    text += f"\nselected: {method} with c={c}\n\n"
    text += metrics.format_table(
        ["stability metric", "mean", "std"],
        [["NMI", stability.nmi_mean, stability.nmi_std],
         ["ARI", stability.ari_mean, stability.ari_std]])
    (out / "comparison.txt").write_text(text, encoding="utf-8")

    # Per-cluster predictive-mean band over the grid, for external plotting.
    summary_path = out / "cluster_summary.csv"
    mean_channel = config.extractor.latent_dim
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("cluster,grid_point,time,mean_mu,std_mu\n")
        grid = profiles[0].grid
        for k in range(c):
            members = [p for p, lab in zip(profiles, chosen.labels)
                       if lab == k]
            mus = np.stack([p.channels[mean_channel] for p in members])
            for gi, t in enumerate(grid):
                fh.write(f"{k},{gi},{t:.6f},{mus[:, gi].mean():.6f},"
                         f"{mus[:, gi].std():.6f}\n")

    log.info("clustering selected %s with c=%d (backend: %s)", method, c,
             clustering.cluster_backend())
    _write_json(out / "manifest.json",
                _manifest(out, config, seed,
                          [assignments_path, comparison_path, summary_path],
                          started))
    return EXIT_OK


def cmd_ablate(args):
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    out = _out_dir(args)
    started = _now()
    dataset = _dataset_from(config)
    groups = [args.group] if args.group else list(config.ablation.groups)
    for group in groups:
        try:
            experiments.group_indices(group)
        except ValueError as err:
            raise config_mod.ConfigError(str(err)) from err
    results = experiments.run_ablation(config.train_settings(), dataset,
                                       groups,
                                       fixed_seed=config.ablation.fixed_seed)
    path = out / "ablation.json"
    _write_json(path, results)
    rows = [["none (baseline)", results["baseline_mse"]]]
    rows += [[g, mse] for g, mse in results["groups"].items()]
    (out / "ablation.txt").write_text(
        metrics.format_table(["feature group removed", "test mse"], rows),
        encoding="utf-8")
    log.info("ablation report written to %s", path)
    _write_json(out / "manifest.json",
                _manifest(out, config, seed, [path], started))
    return EXIT_OK


def cmd_importance(args):
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    out = _out_dir(args)
    started = _now()
    dataset = _dataset_from(config)
    model = _load_model(args.checkpoint or (out / "checkpoint.json"), config)
    groups = [args.group] if args.group else list(config.ablation.groups)
    results = {}
    for group in groups:
        try:
            results[group.upper()] = experiments.permutation_importance(
                model, dataset.test, group, seed=seed)
        except ValueError as err:
            raise config_mod.ConfigError(str(err)) from err
    path = out / "importance.json"
    _write_json(path, results)
    rows = [[g, r["baseline_mse"], r["permuted_mse"], r["delta_mse"]]
            for g, r in results.items()]
    (out / "importance.txt").write_text(
        metrics.format_table(["group", "baseline mse", "permuted mse",
                              "delta mse"], rows), encoding="utf-8")
    log.info("permutation importance written to %s", path)
    _write_json(out / "manifest.json",
                _manifest(out, config, seed, [path], started))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "cluster": cmd_cluster,
    "ablate": cmd_ablate,
    "importance": cmd_importance,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajgp",
        description="Deep-kernel GP forecasting and trajectory clustering "
                    "for irregular clinical time series.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True,
                       help="experiment configuration (JSON)")
        p.add_argument("--seed", type=int, default=None,
                       help="run seed (default: first config seed)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallelism bound for independent runs")
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from an existing checkpoint "
                                "(config hash must match)")
        if name in ("evaluate", "cluster", "importance"):
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint path (default: OUT/checkpoint.json)")
        if name == "cluster":
            p.add_argument("--sample-size", type=int, default=None,
                           help="cluster a random patient subsample")
            p.add_argument("--labels", default=None,
                           help="ground-truth labels CSV for ARI")
        if name in ("ablate", "importance"):
            p.add_argument("--group", default=None,
                           help="single feature group (default: config list)")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_CONFIG if err.code not in (0, None) else 0
    try:
        return COMMANDS[args.command](args)
    except config_mod.ConfigError as err:
        log.error("configuration error: %s", err)
        return EXIT_CONFIG
    except data.DataError as err:
        log.error("data error: %s", err)
        return EXIT_DATA
    except (ad.NonFiniteError, ad.NotPositiveDefiniteError,
            training.DivergenceError) as err:
        log.error("numerical failure: %s", err)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
