"""Declarative experiment configuration.

JSON in, validated dataclasses out.  Unknown keys are rejected at every
level, and omitted settings fall back to the tuned defaults for the chosen
extractor architecture.  The config hash is computed over the fully
normalized form, so key order and default elision never change it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from trajgp import data as data_mod
from trajgp import extractors, synthetic, training

DEFAULT_SEEDS = (42, 123, 456, 789, 1024, 2048, 3141, 5926, 8765, 4321)

# Tuned per-architecture defaults (hidden/model width, depth, decoder,
# latent size, learning rate; transformer adds heads and feedforward width).
ARCH_DEFAULTS = {
    "rnn": {"hidden_dim": 512, "num_layers": 3, "decoder_dim": 128,
            "latent_dim": 2, "learning_rate": 5e-5},
    "gru": {"hidden_dim": 512, "num_layers": 3, "decoder_dim": 128,
            "latent_dim": 4, "learning_rate": 2e-4},
    "lstm": {"hidden_dim": 512, "num_layers": 4, "decoder_dim": 128,
             "latent_dim": 3, "learning_rate": 5e-5},
    "transformer": {"hidden_dim": 512, "num_heads": 32,
                    "feedforward_dim": 2048, "num_layers": 6,
                    "decoder_dim": 256, "latent_dim": 2,
                    "learning_rate": 1e-4},
}


class ConfigError(ValueError):
    """Invalid experiment configuration (schema, types, or constraints)."""


def _take(obj: dict, allowed, context: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{context} must be an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {context}: {', '.join(unknown)}")
    return obj


@dataclass
class DataSection:
    input: str | None = None
    dataset_dir: str | None = None
    labels: str | None = None
    max_prefix_len: int = 32
    special_acuity: dict = field(
        default_factory=lambda: dict(data_mod.SPECIAL_ACUITY_DEFAULTS))


@dataclass
class GpSection:
    num_inducing: int = 128
    batch_size: int = 32
    epochs: int = 200
    learning_rate: float | None = None   # None -> architecture default
    warmup_samples: int = 512


@dataclass
class ClusteringSection:
    methods: tuple = ("ward", "average", "kmeans", "gmm")
    c_grid: tuple = (2, 3, 4, 5)
    grid_points: int = 32
    stability_runs: int = 100
    stability_subsample: float = 0.9
    sample_size: int | None = None
    log_variance: bool = True
    include_noise: bool = True


@dataclass
class AblationSection:
    groups: tuple = ("MED_NAME", "DX_NAME", "LAB_RESULTS", "AGE")
    fixed_seed: int = 42


@dataclass
class ExperimentConfig:
    model: str = "dkl"
    data: DataSection = field(default_factory=DataSection)
    synthetic: synthetic.SyntheticConfig = field(
        default_factory=synthetic.SyntheticConfig)
    extractor: extractors.ExtractorConfig = field(
        default_factory=extractors.ExtractorConfig)
    gp: GpSection = field(default_factory=GpSection)
    seeds: tuple = DEFAULT_SEEDS
    clustering: ClusteringSection = field(default_factory=ClusteringSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def train_settings(self) -> training.TrainSettings:
        lr = self.gp.learning_rate
        if lr is None:
            lr = ARCH_DEFAULTS[self.extractor.arch]["learning_rate"]
        return training.TrainSettings(
            model_type=self.model,
            extractor=self.extractor,
            num_inducing=self.gp.num_inducing,
            batch_size=self.gp.batch_size,
            epochs=self.gp.epochs,
            learning_rate=lr,
            max_prefix_len=self.data.max_prefix_len,
            warmup_samples=self.gp.warmup_samples,
        )

    def to_json(self) -> dict:
        ext = self.extractor
        return {
            "model": self.model,
            "data": {
                "input": self.data.input,
                "dataset_dir": self.data.dataset_dir,
                "labels": self.data.labels,
                "max_prefix_len": self.data.max_prefix_len,
                "special_acuity": dict(self.data.special_acuity),
            },
            "synthetic": {
                "n_patients": self.synthetic.n_patients,
                "weights": list(self.synthetic.weights),
                "curves": {name: {"level": c.level, "rise": c.rise,
                                  "timescale_days": c.timescale_days,
                                  "noise_sd": c.noise_sd}
                           for name, c in sorted(self.synthetic.curves.items())},
                "field_roles": dict(sorted(
                    self.synthetic.field_roles.items())),
                "visits_min": self.synthetic.visits_min,
                "visits_max": self.synthetic.visits_max,
                "gap_mean_days": self.synthetic.gap_mean_days,
                "start_year_min": self.synthetic.start_year_min,
                "start_year_max": self.synthetic.start_year_max,
                "age_mean": self.synthetic.age_mean,
                "age_sd": self.synthetic.age_sd,
                "archetype_scale": self.synthetic.archetype_scale,
                "severity_scale": self.synthetic.severity_scale,
                "embedding_noise_sd": self.synthetic.embedding_noise_sd,
                "extra_measurement_prob": self.synthetic.extra_measurement_prob,
                "special_code_prob": self.synthetic.special_code_prob,
            },
            "extractor": {
                "arch": ext.arch, "hidden_dim": ext.hidden_dim,
                "num_layers": ext.num_layers, "num_heads": ext.num_heads,
                "feedforward_dim": ext.feedforward_dim,
                "decoder_dim": ext.decoder_dim, "latent_dim": ext.latent_dim,
                "dropout": ext.dropout,
            },
            "gp": {
                "num_inducing": self.gp.num_inducing,
                "batch_size": self.gp.batch_size,
                "epochs": self.gp.epochs,
                "learning_rate": self.gp.learning_rate,
                "warmup_samples": self.gp.warmup_samples,
            },
            "seeds": list(self.seeds),
            "clustering": {
                "methods": list(self.clustering.methods),
                "c_grid": list(self.clustering.c_grid),
                "grid_points": self.clustering.grid_points,
                "stability_runs": self.clustering.stability_runs,
                "stability_subsample": self.clustering.stability_subsample,
                "sample_size": self.clustering.sample_size,
                "log_variance": self.clustering.log_variance,
                "include_noise": self.clustering.include_noise,
            },
            "ablation": {
                "groups": list(self.ablation.groups),
                "fixed_seed": self.ablation.fixed_seed,
            },
        }


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.to_json(), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _build_extractor(obj: dict) -> extractors.ExtractorConfig:
    allowed = ("arch", "hidden_dim", "num_layers", "num_heads",
               "feedforward_dim", "decoder_dim", "latent_dim", "dropout")
    obj = _take(obj, allowed, "extractor")
    arch = obj.get("arch", "transformer")
    if arch not in ARCH_DEFAULTS:
        raise ConfigError(f"extractor.arch must be one of "
                          f"{sorted(ARCH_DEFAULTS)}, got '{arch}'")
    merged = {"arch": arch, "dropout": 0.1,
              "num_heads": 32, "feedforward_dim": 2048}
    merged.update(ARCH_DEFAULTS[arch])
    merged.pop("learning_rate")
    merged.update({k: v for k, v in obj.items() if k != "arch"})
    config = extractors.ExtractorConfig(input_dim=data_mod.FEATURE_DIM,
                                        **merged)
    try:
        config.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return config


def _build_synthetic(obj: dict) -> synthetic.SyntheticConfig:
    allowed = ("n_patients", "weights", "curves", "field_roles", "visits_min",
               "visits_max", "gap_mean_days", "start_year_min",
               "start_year_max", "age_mean", "age_sd", "archetype_scale",
               "severity_scale", "embedding_noise_sd",
               "extra_measurement_prob", "special_code_prob")
    obj = dict(_take(obj, allowed, "synthetic"))
    if "curves" in obj:
        curves = {}
        for name, spec in _take(obj["curves"],
                                synthetic.ARCHETYPE_NAMES,
                                "synthetic.curves").items():
            spec = _take(spec, ("level", "rise", "timescale_days",
                                "noise_sd"), f"synthetic.curves.{name}")
            base = synthetic.DEFAULT_CURVES[name]
            curves[name] = synthetic.ArchetypeCurve(
                level=spec.get("level", base.level),
                rise=spec.get("rise", base.rise),
                timescale_days=spec.get("timescale_days", base.timescale_days),
                noise_sd=spec.get("noise_sd", base.noise_sd))
        for name, base in synthetic.DEFAULT_CURVES.items():
            curves.setdefault(name, base)
        obj["curves"] = curves
    if "weights" in obj:
        obj["weights"] = tuple(obj["weights"])
    config = synthetic.SyntheticConfig(**obj)
    try:
        config.validate()
    except data_mod.DataError as err:
        raise ConfigError(str(err)) from err
    return config


def from_dict(obj: dict) -> ExperimentConfig:
    top = _take(obj, ("model", "data", "synthetic", "extractor", "gp",
                      "seeds", "clustering", "ablation"), "config")
    model = top.get("model", "dkl")
    if model not in ("dkl", "mle"):
        raise ConfigError(f"model must be 'dkl' or 'mle', got '{model}'")

    d = _take(top.get("data", {}), ("input", "dataset_dir", "labels",
                                    "max_prefix_len", "special_acuity"),
              "data")
    data_section = DataSection(
        input=d.get("input"), dataset_dir=d.get("dataset_dir"),
        labels=d.get("labels"),
        max_prefix_len=int(d.get("max_prefix_len", 32)),
        special_acuity={str(k).upper(): float(v) for k, v in
                        d.get("special_acuity",
                              data_mod.SPECIAL_ACUITY_DEFAULTS).items()})
    if data_section.max_prefix_len < 1:
        raise ConfigError("data.max_prefix_len must be positive")

    g = _take(top.get("gp", {}), ("num_inducing", "batch_size", "epochs",
                                  "learning_rate", "warmup_samples"), "gp")
    gp_section = GpSection(
        num_inducing=int(g.get("num_inducing", 128)),
        batch_size=int(g.get("batch_size", 32)),
        epochs=int(g.get("epochs", 200)),
        learning_rate=(float(g["learning_rate"])
                       if g.get("learning_rate") is not None else None),
        warmup_samples=int(g.get("warmup_samples", 512)))
    for name in ("num_inducing", "batch_size", "epochs", "warmup_samples"):
        if getattr(gp_section, name) < 1:
            raise ConfigError(f"gp.{name} must be positive")

    c = _take(top.get("clustering", {}),
              ("methods", "c_grid", "grid_points", "stability_runs",
               "stability_subsample", "sample_size", "log_variance",
               "include_noise"), "clustering")
    clustering_section = ClusteringSection(
        methods=tuple(c.get("methods", ("ward", "average", "kmeans", "gmm"))),
        c_grid=tuple(int(v) for v in c.get("c_grid", (2, 3, 4, 5))),
        grid_points=int(c.get("grid_points", 32)),
        stability_runs=int(c.get("stability_runs", 100)),
        stability_subsample=float(c.get("stability_subsample", 0.9)),
        sample_size=(int(c["sample_size"])
                     if c.get("sample_size") is not None else None),
        log_variance=bool(c.get("log_variance", True)),
        include_noise=bool(c.get("include_noise", True)))
    for method in clustering_section.methods:
        if method not in ("ward", "average", "kmeans", "gmm"):
            raise ConfigError(f"unknown clustering method '{method}'")
    if any(v < 1 for v in clustering_section.c_grid):
        raise ConfigError("clustering.c_grid entries must be positive")

    a = _take(top.get("ablation", {}), ("groups", "fixed_seed"), "ablation")
    ablation_section = AblationSection(
        groups=tuple(str(v).upper() for v in
                     a.get("groups", AblationSection().groups)),
        fixed_seed=int(a.get("fixed_seed", 42)))

    seeds = tuple(int(s) for s in top.get("seeds", DEFAULT_SEEDS))
    if not seeds:
        raise ConfigError("seeds must be non-empty")

    config = ExperimentConfig(
        model=model, data=data_section,
        synthetic=_build_synthetic(top.get("synthetic", {})),
        extractor=_build_extractor(top.get("extractor", {})),
        gp=gp_section, seeds=seeds, clustering=clustering_section,
        ablation=ablation_section)
    return config


def from_file(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    return from_dict(obj)
