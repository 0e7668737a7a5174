"""Joint training of the sequence extractor and its regression head.

The deep-kernel model maximizes the mini-batch evidence lower bound over
extractor weights, inducing locations, variational parameters, and GP
hyperparameters together; the baseline swaps the GP for a linear head
trained by mean squared error (Gaussian maximum likelihood).  Either way
the tape is rebuilt every step, all randomness is drawn from per-module
streams of the run seed, and the returned parameters are those of the epoch
with the best validation MSE.
"""

from __future__ import annotations

import contextlib
import os
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from trajgp import autodiff as ad
from trajgp import clustering, data, extractors, gp, rng as rng_mod

EVAL_BATCH = 64


def _blas_limit():
    """BLAS thread cap for the training/prediction loops.

    The tape issues many small matrix ops; multi-threaded BLAS spends more
    time spinning than computing on them (measured ~4x slowdown), so the
    default is one thread.  TRAJGP_BLAS_THREADS=0 restores the library
    default, any other value sets the cap.
    """
    raw = os.environ.get("TRAJGP_BLAS_THREADS", "1")
    try:
        limit = int(raw)
    except ValueError:
        limit = 1
    if limit <= 0:
        return contextlib.nullcontext()
    return threadpool_limits(limits=limit)


@dataclass
class TrainSettings:
    model_type: str = "dkl"              # "dkl" or "mle"
    extractor: extractors.ExtractorConfig = field(
        default_factory=extractors.ExtractorConfig)
    num_inducing: int = 128
    batch_size: int = 32
    epochs: int = 200
    learning_rate: float = 1e-4
    max_prefix_len: int = 32
    warmup_samples: int = 512

    def validate(self):
        if self.model_type not in ("dkl", "mle"):
            raise ValueError(f"model_type must be dkl or mle, got "
                             f"'{self.model_type}'")
        self.extractor.validate()
        for name in ("num_inducing", "batch_size", "epochs",
                     "max_prefix_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


class DivergenceError(RuntimeError):
    """Training produced a non-finite objective and was aborted."""


def pad_batch(samples):
    """Stack variable-length prefixes into [b, t_max, d] plus a 0/1 mask."""
    b = len(samples)
    t_max = max(s.features.shape[0] for s in samples)
    d = samples[0].features.shape[1]
    feats = np.zeros((b, t_max, d))
    mask = np.zeros((b, t_max))
    for i, s in enumerate(samples):
        t = s.features.shape[0]
        feats[i, :t] = s.features
        mask[i, :t] = 1.0
    targets = np.array([s.target for s in samples])
    return feats, mask, targets


@dataclass
class TrainedModel:
    model_type: str
    settings: TrainSettings
    params: dict
    best_epoch: int
    log: list

    @property
    def svgp_state(self) -> gp.SvgpState:
        if self.model_type != "dkl":
            raise ValueError("baseline model has no GP state")
        return gp.SvgpState.from_params(self.params)

    def latents(self, samples) -> np.ndarray:
        """Extractor outputs for a list of prefix samples (eval mode)."""
        lifted = {k: ad.constant(v) for k, v in self.params.items()
                  if not k.startswith(("gp.", "head."))}
        out = []
        with _blas_limit():
            for lo in range(0, len(samples), EVAL_BATCH):
                feats, mask, _ = pad_batch(samples[lo:lo + EVAL_BATCH])
                out.append(extractors.encode_batch(
                    self.settings.extractor, lifted, feats, mask).data)
        return np.concatenate(out) if out else np.zeros(
            (0, self.settings.extractor.latent_dim))

    def predict(self, samples, include_noise: bool = True):
        """Gaussian predictions for the DKL model, point predictions for
        the baseline (returned with None variances)."""
        h = self.latents(samples)
        if self.model_type == "dkl":
            pred = gp.svgp_predict(self.svgp_state, h,
                                   include_noise=include_noise)
            return pred.mean, pred.variance
        lifted = {k: ad.constant(v) for k, v in self.params.items()}
        means = extractors.mle_head(lifted, ad.constant(h)).data[:, 0]
        return means, None

    def predict_sequences(self, sequences, include_noise: bool = True):
        """Per-patient trajectories of (latent, mean, variance) over every
        record prefix; the clustering stage consumes these."""
        samples = data.build_prefix_samples(
            sequences, self.settings.max_prefix_len)
        h = self.latents(samples)
        if self.model_type == "dkl":
            pred = gp.svgp_predict(self.svgp_state, h,
                                   include_noise=include_noise)
            means, variances = pred.mean, pred.variance
        else:
            lifted = {k: ad.constant(v) for k, v in self.params.items()}
            means = extractors.mle_head(lifted, ad.constant(h)).data[:, 0]
            variances = np.ones_like(means)
        trajectories = []
        off = 0
        for seq in sequences:
            t = len(seq.records)
            trajectories.append(clustering.PatientTrajectory(
                patient_id=seq.patient_id,
                times=np.array([r.timestamp for r in seq.records]),
                latents=h[off:off + t],
                means=means[off:off + t],
                variances=variances[off:off + t]))
            off += t
        return trajectories


def _init_inducing(settings, ext_params, train_samples, seed):
    """k-means centers of a warm-up latent sweep, in latent space."""
    sweep = train_samples[:settings.warmup_samples]
    lifted = {k: ad.constant(v) for k, v in ext_params.items()}
    chunks = []
    for lo in range(0, len(sweep), EVAL_BATCH):
        feats, mask, _ = pad_batch(sweep[lo:lo + EVAL_BATCH])
        chunks.append(extractors.encode_batch(
            settings.extractor, lifted, feats, mask).data)
    latents = np.concatenate(chunks)
    m_req = settings.num_inducing
    rng = rng_mod.stream(seed, "inducing_init")
    if latents.shape[0] < m_req:
        # Fewer warm-up latents than inducing points: tile with tiny jitter.
        reps = latents[np.arange(m_req) % latents.shape[0]]
        return reps + rng.normal(scale=1e-3, size=reps.shape)
    labels = clustering.functional_kmeans(
        latents, m_req, seed=int(rng.integers(2 ** 31))).labels
    return np.stack([latents[labels == k].mean(axis=0) for k in range(m_req)])


def _val_mse(model_type, settings, params, val_samples):
    if not val_samples:
        return float("nan")
    stub = TrainedModel(model_type, settings, params, 0, [])
    means, _ = stub.predict(val_samples)
    targets = np.array([s.target for s in val_samples])
    return float(np.mean((means - targets) ** 2))


def train_model(settings: TrainSettings, dataset: data.SplitDataset,
                seed: int, initial_params: dict | None = None,
                start_epoch: int = 0) -> TrainedModel:
    """Mini-batch training with per-epoch validation selection.

    A non-finite objective or gradient aborts the run and returns the last
    finite checkpoint with a divergence marker in the log.  Passing
    ``initial_params``/``start_epoch`` resumes a previous run's parameters
    (optimizer moments restart; epoch streams stay aligned with a fresh run).
    """
    settings.validate()
    train_samples = data.build_prefix_samples(dataset.train,
                                              settings.max_prefix_len)
    val_samples = data.build_prefix_samples(dataset.val,
                                            settings.max_prefix_len)
    if not train_samples:
        raise data.DataError("no training samples after preprocessing")
    n_total = len(train_samples)

    if initial_params is not None:
        params = {k: np.asarray(v).copy() for k, v in initial_params.items()}
    else:
        params = extractors.init_params(
            settings.extractor, rng_mod.stream(seed, "extractor_init"))
        if settings.model_type == "dkl":
            inducing = _init_inducing(settings, params, train_samples, seed)
            targets = np.array([s.target for s in train_samples])
            state = gp.init_svgp_state(inducing, targets,
                                       settings.extractor.latent_dim)
            params.update(state.to_params())
        else:
            params.update(extractors.init_head_params(
                settings.extractor, rng_mod.stream(seed, "extractor_init", 1)))

    adam_state = ad.AdamState()
    adam_config = ad.AdamConfig(learning_rate=settings.learning_rate)
    best = {"params": {k: v.copy() for k, v in params.items()},
            "epoch": -1, "val_mse": float("inf")}
    log = []
    diverged = False

    with _blas_limit():
        for epoch in range(start_epoch, settings.epochs):
            start = time.perf_counter()
            order = rng_mod.stream(seed, "train_shuffle",
                                   epoch).permutation(n_total)
            epoch_objectives = []
            try:
                for bi, lo in enumerate(range(0, n_total,
                                              settings.batch_size)):
                    batch = [train_samples[i]
                             for i in order[lo:lo + settings.batch_size]]
                    feats, mask, targets = pad_batch(batch)
                    dropout_rng = (rng_mod.stream(seed, "dropout", epoch, bi)
                                   if settings.extractor.dropout > 0 else None)
                    tape = ad.Tape()
                    lifted = ad.lift_params(tape, params)
                    latents = extractors.encode_batch(
                        settings.extractor, lifted, feats, mask,
                        dropout_rng=dropout_rng)
                    if settings.model_type == "dkl":
                        objective = gp.elbo(lifted, latents, targets, n_total)
                        loss = ad.neg(objective)
                    else:
                        err = ad.sub(extractors.mle_head(lifted, latents),
                                     ad.constant(targets[:, None]))
                        loss = ad.mean(ad.mul(err, err))
                        objective = ad.neg(loss)
                    epoch_objectives.append(float(objective.data))
                    grads = ad.grads_by_name(lifted, ad.backward(tape, loss))
                    params, adam_state = ad.optimizer_step(
                        params, grads, adam_state, adam_config)
            except (ad.NonFiniteError, ad.NotPositiveDefiniteError) as err:
                log.append({"epoch": epoch, "event": "divergence",
                            "detail": str(err)})
                diverged = True
                break

            val_mse = _val_mse(settings.model_type, settings, params,
                               val_samples)
            log.append({
                "epoch": epoch,
                "elbo": float(np.mean(epoch_objectives)),
                "val_mse": val_mse,
                "wall_ms": round((time.perf_counter() - start) * 1e3, 3),
            })
            if np.isnan(val_mse) or val_mse < best["val_mse"]:
                best = {"params": {k: v.copy() for k, v in params.items()},
                        "epoch": epoch,
                        "val_mse": val_mse if not np.isnan(val_mse) else
                        float("inf")}

    model = TrainedModel(settings.model_type, settings, best["params"],
                         best["epoch"], log)
    if diverged and best["epoch"] < 0:
        raise DivergenceError(
            "training diverged before completing the first epoch")
    return model


def evaluate_model(model: TrainedModel, sequences,
                   constant_mean: float | None = None):
    """Metric report for a trained model on held-out sequences.

    ``constant_mean`` adds a constant-predictor reference (same targets)
    to the returned dict.
    """
    from trajgp import metrics as metrics_mod

    samples = data.build_prefix_samples(sequences,
                                        model.settings.max_prefix_len)
    targets = np.array([s.target for s in samples])
    means, variances = model.predict(samples)
    if variances is not None:
        report = metrics_mod.evaluate_gaussian(means, variances, targets)
    else:
        report = metrics_mod.evaluate_point(means, targets)
    out = {"model": report}
    if constant_mean is not None:
        out["constant_baseline"] = metrics_mod.evaluate_point(
            np.full_like(targets, constant_mean), targets)
    return out
