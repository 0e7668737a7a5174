"""Acceptance suite: one test per exit criterion, each printing a pass/fail
line into the terminal summary.

The heavyweight criteria (calibration, end-to-end learning, cluster
recovery, stability) share one trained model over a 1000-patient planted
cohort; patients 1000..1799 of the same generative process provide the
5000+-sample calibration set.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import ndtr

from trajgp import autodiff as ad
from trajgp import (cli, clustering, data, experiments, extractors, gp,
                    metrics, synthetic, training)
from conftest import record_criterion

from test_clustering import (brute_force_calinski, brute_force_davies_bouldin,
                             brute_force_silhouette)

SIGNAL_KWARGS = dict(archetype_scale=3.0, severity_scale=3.0,
                     embedding_noise_sd=0.3)

DESK_TRANSFORMER = extractors.ExtractorConfig(
    arch="transformer", input_dim=data.FEATURE_DIM, hidden_dim=32,
    num_layers=1, num_heads=4, feedforward_dim=64, decoder_dim=32,
    latent_dim=2, dropout=0.1)


@pytest.fixture(scope="module")
def planted_bundle():
    """1000-patient training cohort plus 800 fresh same-process patients,
    with one trained desk-scale DKL transformer shared by criteria 5-8."""
    gen = synthetic.SyntheticConfig(n_patients=1800, visits_min=4,
                                    visits_max=10, **SIGNAL_KWARGS)
    encounters, labels = synthetic.generate_synthetic_cohort(gen, 42)
    core_ids = {f"synth{i:06d}" for i in range(1000)}
    core = [e for e in encounters if e.patient_id in core_ids]
    extra = [e for e in encounters if e.patient_id not in core_ids]
    split = data.prepare_split_dataset(core, seed=42)
    settings = training.TrainSettings(
        model_type="dkl", extractor=DESK_TRANSFORMER, num_inducing=32,
        batch_size=32, epochs=25, learning_rate=3e-3, max_prefix_len=8)
    start = time.perf_counter()
    model = training.train_model(settings, split, seed=42)
    train_seconds = time.perf_counter() - start
    return {
        "split": split, "model": model, "labels": labels,
        "extra_encounters": extra, "train_seconds": train_seconds,
        "settings": settings,
    }


@pytest.fixture(scope="module")
def planted_profiles(planted_bundle):
    split = planted_bundle["split"]
    sequences = split.train + split.val + split.test
    trajectories = planted_bundle["model"].predict_sequences(sequences)
    profiles = clustering.build_profiles(trajectories, grid_points=32)
    truth = np.array([planted_bundle["labels"][p.patient_id]
                      for p in profiles])
    return profiles, clustering.profile_matrix(profiles), truth


def small_elbo_instance(arch, rng):
    """b<=6 samples, m<=3 latent dims, M<=4 inducing points."""
    if arch == "rnn":
        ext = extractors.ExtractorConfig(
            arch="rnn", input_dim=5, hidden_dim=3, num_layers=1,
            decoder_dim=3, latent_dim=2, dropout=0.0)
    else:
        ext = extractors.ExtractorConfig(
            arch="transformer", input_dim=5, hidden_dim=4, num_layers=1,
            num_heads=2, feedforward_dim=8, decoder_dim=3, latent_dim=2,
            dropout=0.0)
    params = extractors.init_params(ext, rng)
    state = gp.SvgpState(
        inducing=rng.uniform(-1, 1, size=(4, 2)),
        var_mean=rng.normal(size=4) * 0.3 + 0.2,
        var_chol_raw=gp.raw_from_chol(np.eye(4) * 0.8),
        raw_lengthscale=gp.softplus_inverse(0.9),
        raw_outputscale=gp.softplus_inverse(1.1),
        raw_noise=gp.softplus_inverse(0.2),
        mean_const=0.3)
    params.update(state.to_params())
    feats = rng.normal(size=(5, 3, 5))
    mask = np.ones((5, 3))
    mask[0, 1:] = 0.0
    mask[3, 2] = 0.0
    targets = rng.normal(size=5) * 0.4 + 0.3
    return ext, params, feats, mask, targets


def elbo_loss_value(ext, params, feats, mask, targets):
    lifted = {k: ad.constant(v) for k, v in params.items()}
    latents = extractors.encode_batch(ext, lifted, feats, mask)
    return float(gp.elbo(lifted, latents, targets, n_total=12).data)


def test_criterion_1_elbo_gradients_match_finite_differences(rng):
    started = time.perf_counter()
    worst = 0.0
    for arch, max_entries in (("rnn", None), ("transformer", 40)):
        ext, params, feats, mask, targets = small_elbo_instance(arch, rng)
        tape = ad.Tape()
        lifted = ad.lift_params(tape, params)
        latents = extractors.encode_batch(ext, lifted, feats, mask)
        loss = gp.elbo(lifted, latents, targets, n_total=12)
        grads = ad.grads_by_name(lifted, ad.backward(tape, loss))

        for name, value in params.items():
            value = np.asarray(value, dtype=np.float64)
            if max_entries is not None and not name.startswith("gp.") \
                    and value.size > max_entries:
                picks = rng.choice(value.size, size=max_entries,
                                   replace=False)
            else:
                picks = np.arange(value.size)
            flat = value.reshape(-1)
            gflat = np.asarray(grads[name]).reshape(-1)
            for idx in picks:
                orig = flat[idx]

                def central(h):
                    flat[idx] = orig + h
                    fp = elbo_loss_value(ext, params, feats, mask, targets)
                    flat[idx] = orig - h
                    fm = elbo_loss_value(ext, params, feats, mask, targets)
                    flat[idx] = orig
                    return (fp - fm) / (2 * h)

                # Richardson-extrapolated central differences: the two
                # step sizes cancel the h^2 term while staying large enough
                # that roundoff on structurally zero gradients stays below
                # the tolerance.
                numeric = (4.0 * central(2e-5) - central(4e-5)) / 3.0
                err = abs(gflat[idx] - numeric) / max(
                    abs(gflat[idx]), abs(numeric), 1e-4)
                worst = max(worst, err)
    elapsed = time.perf_counter() - started
    ok = worst < 1e-4 and elapsed < 60.0
    assert record_criterion(
        "criterion 1: ELBO gradients vs central differences",
        ok, f"max rel err {worst:.2e}, {elapsed:.1f}s")


def _oracle_instances(rng, count=20):
    for _ in range(count):
        n = int(rng.integers(5, 31))
        x = rng.uniform(0.0, 4.0, size=(n, 2))
        kernel = gp.KernelParams.create(lengthscale=0.6, outputscale=1.2)
        noise = float(rng.uniform(0.05, 0.3))
        mean_const = float(rng.uniform(-0.5, 0.5))
        y = mean_const + np.sin(x[:, 0]) + 0.5 * np.cos(2 * x[:, 1]) \
            + math.sqrt(noise) * rng.normal(size=n)
        yield gp.ExactGpModel(x, y, kernel, noise, mean_const)


def _optimal_state(model):
    var_mean, _, var_chol_raw = gp.optimal_variational_params(
        model.train_x, model.train_x, model.train_y, model.kernel,
        model.noise_variance, model.mean_const)
    return gp.SvgpState(
        inducing=model.train_x, var_mean=var_mean,
        var_chol_raw=var_chol_raw,
        raw_lengthscale=model.kernel.raw_lengthscale,
        raw_outputscale=model.kernel.raw_outputscale,
        raw_noise=gp.softplus_inverse(model.noise_variance),
        mean_const=model.mean_const)


def test_criterion_2_sparse_route_reproduces_exact_posterior(rng):
    worst = 0.0
    for model in _oracle_instances(rng):
        state = _optimal_state(model)
        query = rng.uniform(0, 4, size=(8, 2))
        sparse = gp.svgp_predict(state, query, include_noise=False)
        exact = gp.exact_gp_posterior(model, query, include_noise=False)
        worst = max(worst,
                    float(np.max(np.abs(sparse.mean - exact.mean))),
                    float(np.max(np.abs(sparse.variance - exact.variance))))
    ok = worst < 1e-6
    assert record_criterion(
        "criterion 2: SVGP at optimum matches exact posterior (1e-6)",
        ok, f"max abs deviation {worst:.2e} over 20 instances")


def test_criterion_3_bound_never_exceeds_log_marginal(rng):
    worst_gap = -np.inf
    for model in _oracle_instances(rng):
        state = _optimal_state(model)
        bound = gp.elbo_value(state, model.train_x, model.train_y,
                              n_total=model.train_y.size)
        lml = gp.log_marginal_likelihood(model)
        worst_gap = max(worst_gap, bound - lml)
    ok = worst_gap <= 1e-6
    assert record_criterion(
        "criterion 3: optimized bound <= exact log marginal likelihood",
        ok, f"max(bound - lml) = {worst_gap:.2e}")


def test_criterion_4_crps_closed_form_matches_quadrature(rng):
    def oracle(mu, sigma, y):
        lo = min(mu, y) - 12 * sigma
        hi = max(mu, y) + 12 * sigma

        def integrand(v):
            f = ndtr((v - mu) / sigma)
            return (f - (1.0 if v >= y else 0.0)) ** 2

        return quad(integrand, lo, hi, points=[y, mu], limit=200)[0]

    worst = 0.0
    for _ in range(100):
        mu = float(rng.normal())
        sigma = float(rng.uniform(0.1, 3.0))
        y = float(mu + sigma * rng.normal())
        ours = float(metrics.crps_gaussian(mu, sigma ** 2, y))
        worst = max(worst, abs(ours - oracle(mu, sigma, y)))
    centered = float(metrics.crps_gaussian(0.0, 1.0, 0.0))
    ok = worst < 1e-6 and abs(centered - 0.233695) < 1e-6
    assert record_criterion(
        "criterion 4: CRPS closed form vs quadrature (1e-6)",
        ok, f"max |diff| {worst:.2e}, CRPS(0,1;0) = {centered:.6f}")


def test_criterion_5_interval_coverage_calibrated(planted_bundle):
    sequences = data.encode_patients(
        data.group_encounters(planted_bundle["extra_encounters"]),
        planted_bundle["split"].stats)
    samples = data.build_prefix_samples(sequences, 8)
    targets = np.array([s.target for s in samples])
    means, variances = planted_bundle["model"].predict(samples)
    coverage = metrics.interval_coverage(means, variances, targets)
    ok = len(samples) >= 5000 and 90.0 <= coverage <= 98.0
    assert record_criterion(
        "criterion 5: 95% interval coverage in [90%, 98%]",
        ok, f"coverage {coverage:.2f}% on n={len(samples)}")


def test_criterion_6_learns_beyond_constant_baseline(planted_bundle):
    split = planted_bundle["split"]
    model = planted_bundle["model"]
    train_samples = data.build_prefix_samples(split.train, 8)
    const_mean = float(np.mean([s.target for s in train_samples]))
    reports = training.evaluate_model(model, split.test,
                                      constant_mean=const_mean)
    dkl = reports["model"]
    const = reports["constant_baseline"]
    runtime_ok = planted_bundle["train_seconds"] < 1800.0
    ok = (dkl.mse < const.mse
          and dkl.clinical_accuracy > const.clinical_accuracy
          and runtime_ok)
    assert record_criterion(
        "criterion 6: DKL transformer beats constant baseline",
        ok, f"mse {dkl.mse:.4f} < {const.mse:.4f}, "
            f"acc {dkl.clinical_accuracy:.1f}% > "
            f"{const.clinical_accuracy:.1f}%, "
            f"train {planted_bundle['train_seconds']:.0f}s < 1800s")


def test_criterion_7_cluster_recovery(planted_profiles):
    profiles, x, truth = planted_profiles
    method, c, rows, _ = clustering.model_select(x, seed=42)
    ward3 = clustering.agglomerative_cluster(x, 3, "ward")
    ari = clustering.adjusted_rand_index(ward3.labels, truth)

    # Validity metrics against independent brute-force loops on n <= 200:
    # every planted cluster keeps members in the subsample.
    order = np.argsort(truth, kind="stable")
    picks = np.concatenate([order[truth[order] == k][:70] for k in range(3)])
    subset = x[picks]
    sub_labels = ward3.labels[picks]
    report = clustering.validity_metrics(subset, sub_labels)
    brute_ok = (
        abs(report.silhouette - brute_force_silhouette(subset, sub_labels))
        < 1e-9
        and abs(report.davies_bouldin
                - brute_force_davies_bouldin(subset, sub_labels)) < 1e-9
        and abs(report.calinski_harabasz
                - brute_force_calinski(subset, sub_labels)) < 1e-9)

    ok = c == 3 and ari >= 0.8 and brute_ok
    assert record_criterion(
        "criterion 7: model selection picks c=3, ward recovers archetypes",
        ok, f"selected {method}/c={c}, ward ARI {ari:.3f}, "
            f"brute-force validity match={brute_ok}")


def test_criterion_8_stability_protocol(planted_profiles):
    _, x, _ = planted_profiles
    boot = clustering.stability_protocol(x, "ward", 3, seed=42, n_runs=100,
                                         subsample=0.9)
    ident = clustering.stability_protocol(x, "ward", 3, seed=42, n_runs=3,
                                          subsample=1.0)
    exact_one = (ident.ari_mean == 1.0 and ident.ari_std == 0.0
                 and ident.nmi_mean == 1.0 and ident.nmi_std == 0.0)
    ok = boot.ari_mean >= 0.95 and exact_one
    assert record_criterion(
        "criterion 8: clustering stability across 100 runs",
        ok, f"bootstrap ARI {boot.ari_mean:.3f}+/-{boot.ari_std:.3f}, "
            f"identical-input agreement exactly 1: {exact_one}")


def test_criterion_9_ablation_discriminates():
    # Balanced archetypes and a single signal-carrying field: removing it
    # must destroy predictive skill, while removing the pure-noise field
    # must stay inside ordinary between-run variation.
    gen = synthetic.SyntheticConfig(
        n_patients=300, visits_min=4, visits_max=8, weights=(0.45, 0.35, 0.2),
        field_roles={"med_name": "severity", "lab_results": "noise"},
        **SIGNAL_KWARGS)
    encounters, _ = synthetic.generate_synthetic_cohort(gen, 42)
    settings = training.TrainSettings(
        model_type="dkl", extractor=DESK_TRANSFORMER, num_inducing=32,
        batch_size=32, epochs=20, learning_rate=3e-3, max_prefix_len=8)

    mses = []
    for seed in (42, 123, 456):
        split = data.prepare_split_dataset(encounters, seed=seed)
        model = training.train_model(settings, split, seed)
        samples = data.build_prefix_samples(split.test, 8)
        targets = np.array([s.target for s in samples])
        means, _ = model.predict(samples)
        mses.append(float(np.mean((means - targets) ** 2)))
    seed_std = float(np.std(mses))

    split42 = data.prepare_split_dataset(encounters, seed=42)
    results = experiments.run_ablation(
        settings, split42, ["MED_NAME", "LAB_RESULTS"], fixed_seed=42)
    signal_delta = results["groups"]["MED_NAME"] - results["baseline_mse"]
    noise_delta = abs(results["groups"]["LAB_RESULTS"]
                      - results["baseline_mse"])
    ok = signal_delta > 0 and noise_delta < 2.0 * seed_std
    assert record_criterion(
        "criterion 9: ablation harness discriminates signal from noise",
        ok, f"signal dMSE {signal_delta:+.5f} > 0, noise |dMSE| "
            f"{noise_delta:.5f} < 2*std {2 * seed_std:.5f}")


def test_criterion_10_metric_and_conversion_oracles(rng):
    preds = rng.normal(size=200)
    targets = rng.normal(size=200)
    mse, mae, r2, acc = metrics.point_metrics(preds, targets)
    n = 200
    mse_ref = sum((p - t) ** 2 for p, t in zip(preds, targets)) / n
    mae_ref = sum(abs(p - t) for p, t in zip(preds, targets)) / n
    tbar = sum(targets) / n
    r2_ref = 1.0 - sum((p - t) ** 2 for p, t in zip(preds, targets)) \
        / sum((t - tbar) ** 2 for t in targets)
    acc_ref = 100.0 * sum(1 for p, t in zip(preds, targets)
                          if abs(p - t) <= 0.1) / n
    metric_ok = (abs(mse - mse_ref) < 1e-12 and abs(mae - mae_ref) < 1e-12
                 and abs(r2 - r2_ref) < 1e-12 and abs(acc - acc_ref) < 1e-12)

    snellen_ok = True
    for _ in range(20):
        den = int(rng.integers(10, 2000))
        if abs(data.snellen_to_logmar(f"20/{den}")
               - math.log10(den / 20)) > 1e-15:
            snellen_ok = False
    codes_ok = (data.snellen_to_logmar("CF") == 1.9
                and data.snellen_to_logmar("HM") == 2.3
                and data.snellen_to_logmar("LP") == 2.7
                and data.snellen_to_logmar("NLP") == 3.0)
    ok = metric_ok and snellen_ok and codes_ok
    assert record_criterion(
        "criterion 10: metric and acuity-conversion oracles",
        ok, f"metrics within 1e-12: {metric_ok}, fractions: {snellen_ok}, "
            f"special codes exact: {codes_ok}")


def test_criterion_11_identical_seed_reproduces_reports(tmp_path):
    config_payload = {
        "model": "dkl",
        "data": {"input": None, "dataset_dir": None, "labels": None,
                 "max_prefix_len": 4},
        "synthetic": {"n_patients": 14, "visits_min": 2, "visits_max": 4,
                      "weights": [0.5, 0.3, 0.2]},
        "extractor": {"arch": "rnn", "hidden_dim": 8, "num_layers": 1,
                      "decoder_dim": 8, "latent_dim": 2, "dropout": 0.0},
        "gp": {"num_inducing": 8, "batch_size": 16, "epochs": 2,
               "learning_rate": 0.003, "warmup_samples": 64},
        "seeds": [42],
        "clustering": {"stability_runs": 4, "grid_points": 8,
                       "c_grid": [2, 3]},
    }
    outputs = {}
    for run in ("run_a", "run_b"):
        root = tmp_path / run
        root.mkdir()
        payload = json.loads(json.dumps(config_payload))
        payload["data"]["input"] = str(root / "cohort.jsonl")
        payload["data"]["dataset_dir"] = str(root / "dataset")
        payload["data"]["labels"] = str(root / "labels.csv")
        config_path = root / "exp.json"
        config_path.write_text(json.dumps(payload))
        out = str(root)
        for command in ("generate", "preprocess", "train", "evaluate",
                        "cluster"):
            assert cli.main([command, "--config", str(config_path),
                             "--out", out, "--seed", "42"]) == 0
        outputs[run] = {
            "report": (root / "report.json").read_bytes(),
            "assignments": (root / "assignments.csv").read_bytes(),
            "comparison": (root / "comparison.json").read_bytes(),
        }
    ok = all(outputs["run_a"][k] == outputs["run_b"][k]
             for k in outputs["run_a"])
    assert record_criterion(
        "criterion 11: identical config + seed reproduces bytes",
        ok, "report.json, assignments.csv, comparison.json identical")
