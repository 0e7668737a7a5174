import json

import pytest

from trajgp import cli


def write_config(path, **overrides):
    base = {
        "model": "dkl",
        "data": {
            "input": str(path.parent / "out" / "cohort.jsonl"),
            "dataset_dir": str(path.parent / "out" / "dataset"),
            "labels": str(path.parent / "out" / "labels.csv"),
            "max_prefix_len": 4,
        },
        "synthetic": {"n_patients": 14, "visits_min": 2, "visits_max": 4,
                      "weights": [0.5, 0.3, 0.2]},
        "extractor": {"arch": "rnn", "hidden_dim": 8, "num_layers": 1,
                      "decoder_dim": 8, "latent_dim": 2, "dropout": 0.0},
        "gp": {"num_inducing": 8, "batch_size": 16, "epochs": 2,
               "learning_rate": 0.003, "warmup_samples": 64},
        "seeds": [42],
        "clustering": {"stability_runs": 4, "grid_points": 8,
                       "c_grid": [2, 3]},
        "ablation": {"groups": ["DX_NAME"], "fixed_seed": 42},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            base[key].update(value)
        else:
            base[key] = value
    path.write_text(json.dumps(base))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One generated + preprocessed + trained pipeline shared by tests."""
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root / "exp.json")
    out = str(root / "out")
    assert cli.main(["generate", "--config", str(config), "--out", out]) == 0
    assert cli.main(["preprocess", "--config", str(config), "--out", out]) == 0
    assert cli.main(["train", "--config", str(config), "--out", out]) == 0
    return root


class TestGenerate:
    def test_counts_and_labels(self, tmp_path):
        config = write_config(tmp_path / "exp.json")
        out = tmp_path / "out"
        assert cli.main(["generate", "--config", str(config),
                         "--out", str(out)]) == 0
        lines = (out / "cohort.jsonl").read_text().strip().splitlines()
        patients = {json.loads(l)["patient_id"] for l in lines}
        assert len(patients) == 14
        labels = (out / "labels.csv").read_text().strip().splitlines()
        assert len(labels) == 15  # header + one row per patient

    def test_rerun_byte_identical(self, tmp_path):
        config = write_config(tmp_path / "exp.json")
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert cli.main(["generate", "--config", str(config),
                             "--out", str(out)]) == 0
        assert (a / "cohort.jsonl").read_bytes() == \
            (b / "cohort.jsonl").read_bytes()
        assert (a / "labels.csv").read_bytes() == (b / "labels.csv").read_bytes()

    def test_zero_patients_usage_error(self, tmp_path):
        config = write_config(tmp_path / "exp.json",
                              synthetic={"n_patients": 0})
        assert cli.main(["generate", "--config", str(config),
                         "--out", str(tmp_path / "out")]) == cli.EXIT_CONFIG


class TestConfigValidation:
    def test_unknown_key_rejected(self, tmp_path):
        config = tmp_path / "exp.json"
        config.write_text(json.dumps({"modle": "dkl"}))
        assert cli.main(["generate", "--config", str(config),
                         "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    def test_malformed_json_rejected(self, tmp_path):
        config = tmp_path / "exp.json"
        config.write_text("{not json")
        assert cli.main(["generate", "--config", str(config),
                         "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    def test_heads_not_dividing_model_dim(self, tmp_path, caplog):
        config = write_config(tmp_path / "exp.json",
                              extractor={"arch": "transformer",
                                         "hidden_dim": 10, "num_heads": 4,
                                         "num_layers": 1,
                                         "feedforward_dim": 16,
                                         "decoder_dim": 8, "latent_dim": 2,
                                         "dropout": 0.0})
        code = cli.main(["generate", "--config", str(config),
                        "--out", str(tmp_path / "out")])
        assert code == cli.EXIT_CONFIG
        assert "hidden_dim" in caplog.text and "num_heads" in caplog.text

    def test_missing_input_is_data_error(self, tmp_path):
        config = write_config(tmp_path / "exp.json",
                              data={"input": str(tmp_path / "missing.jsonl"),
                                    "dataset_dir": str(tmp_path / "ds"),
                                    "max_prefix_len": 4})
        assert cli.main(["preprocess", "--config", str(config),
                         "--out", str(tmp_path / "out")]) == cli.EXIT_DATA


class TestTrainEvaluate:
    def test_artifacts_exist(self, pipeline):
        out = pipeline / "out"
        assert (out / "checkpoint.json").exists()
        entries = [json.loads(l) for l in
                   (out / "train_log.jsonl").read_text().splitlines()]
        assert {e["epoch"] for e in entries} == {0, 1}

    def test_evaluate_report(self, pipeline):
        config = pipeline / "exp.json"
        out = str(pipeline / "out")
        assert cli.main(["evaluate", "--config", str(config),
                         "--out", out]) == 0
        report = json.loads((pipeline / "out" / "report.json").read_text())
        assert "model" in report and "constant_baseline" in report
        assert report["model"]["crps"] is not None

    def test_evaluate_idempotent_byte_identical(self, pipeline):
        config = pipeline / "exp.json"
        out = str(pipeline / "out")
        assert cli.main(["evaluate", "--config", str(config),
                         "--out", out]) == 0
        first = (pipeline / "out" / "report.json").read_bytes()
        assert cli.main(["evaluate", "--config", str(config),
                         "--out", out]) == 0
        assert (pipeline / "out" / "report.json").read_bytes() == first

    def test_missing_checkpoint_names_expected_path(self, pipeline, caplog):
        config = pipeline / "exp.json"
        empty = pipeline / "empty"
        empty.mkdir(exist_ok=True)
        code = cli.main(["evaluate", "--config", str(config),
                         "--out", str(empty)])
        assert code == cli.EXIT_DATA
        assert "checkpoint" in caplog.text

    def test_resume_rejects_mismatched_config_hash(self, pipeline):
        out = str(pipeline / "out")
        changed = write_config(pipeline / "exp2.json",
                               gp={"num_inducing": 8, "batch_size": 16,
                                   "epochs": 3, "learning_rate": 0.001,
                                   "warmup_samples": 64})
        code = cli.main(["train", "--config", str(changed), "--out", out,
                         "--resume"])
        assert code == cli.EXIT_CONFIG

    def test_resume_with_matching_config(self, pipeline):
        config = pipeline / "exp.json"
        out = str(pipeline / "out")
        assert cli.main(["train", "--config", str(config), "--out", out,
                         "--resume"]) == 0  # nothing left to do

    def test_divergent_training_exits_numerical(self, tmp_path):
        config = write_config(tmp_path / "exp.json",
                              gp={"num_inducing": 8, "batch_size": 16,
                                  "epochs": 1, "learning_rate": 1e9,
                                  "warmup_samples": 64})
        out = str(tmp_path / "out")
        assert cli.main(["generate", "--config", str(config),
                         "--out", out]) == 0
        assert cli.main(["preprocess", "--config", str(config),
                         "--out", out]) == 0
        assert cli.main(["train", "--config", str(config),
                         "--out", out]) == cli.EXIT_NUMERICAL


class TestClusterAblateImportance:
    def test_cluster_outputs_and_truth_ari(self, pipeline):
        config = pipeline / "exp.json"
        out = pipeline / "out"
        assert cli.main(["cluster", "--config", str(config),
                         "--out", str(out), "--jobs", "2"]) == 0
        rows = (out / "assignments.csv").read_text().strip().splitlines()
        assert rows[0] == "patient_id,cluster"
        assert len(rows) == 15  # header + every profiled patient
        comparison = json.loads((out / "comparison.json").read_text())
        assert "ari_vs_truth" in comparison
        assert {r["method"] for r in comparison["rows"]} == \
            {"ward", "average", "kmeans", "gmm"}

    def test_cluster_idempotent(self, pipeline):
        config = pipeline / "exp.json"
        out = pipeline / "out"
        first = (out / "assignments.csv").read_bytes()
        assert cli.main(["cluster", "--config", str(config),
                         "--out", str(out)]) == 0
        assert (out / "assignments.csv").read_bytes() == first

    def test_cluster_sample_size(self, pipeline, tmp_path):
        config = pipeline / "exp.json"
        out = pipeline / "out"
        dest = tmp_path / "sampled"
        dest.mkdir()
        assert cli.main(["cluster", "--config", str(config),
                         "--out", str(dest),
                         "--checkpoint", str(out / "checkpoint.json"),
                         "--sample-size", "10"]) == 0
        rows = (dest / "assignments.csv").read_text().strip().splitlines()
        assert len(rows) == 11

    def test_ablate_unknown_group_lists_valid(self, pipeline, caplog):
        config = pipeline / "exp.json"
        code = cli.main(["ablate", "--config", str(config),
                         "--out", str(pipeline / "out"),
                         "--group", "SURGERIES"])
        assert code == cli.EXIT_CONFIG
        assert "valid groups" in caplog.text

    def test_importance_single_group(self, pipeline):
        config = pipeline / "exp.json"
        out = pipeline / "out"
        assert cli.main(["importance", "--config", str(config),
                         "--out", str(out), "--group", "dx_name"]) == 0
        payload = json.loads((out / "importance.json").read_text())
        assert set(payload) == {"DX_NAME"}
        assert "delta_mse" in payload["DX_NAME"]

    def test_manifest_contents(self, pipeline):
        manifest = json.loads((pipeline / "out" / "manifest.json").read_text())
        assert set(manifest) >= {"config_hash", "seed", "started", "finished",
                                 "artifacts", "version"}
        assert len(manifest["config_hash"]) == 64


class TestFullPipeline:
    def test_three_hundred_patients_unattended(self, tmp_path):
        # Every command in sequence on a 300-patient cohort, no manual steps.
        config = write_config(
            tmp_path / "exp.json",
            synthetic={"n_patients": 300, "visits_min": 2, "visits_max": 4,
                       "weights": [0.5, 0.3, 0.2]},
            clustering={"stability_runs": 4, "grid_points": 8,
                        "c_grid": [2, 3], "sample_size": 120})
        out = str(tmp_path / "out")
        for command in ("generate", "preprocess", "train", "evaluate",
                        "cluster", "ablate", "importance"):
            assert cli.main([command, "--config", str(config),
                             "--out", out]) == 0, command
        produced = {p.name for p in (tmp_path / "out").iterdir()}
        assert {"cohort.jsonl", "labels.csv", "dataset", "checkpoint.json",
                "train_log.jsonl", "report.json", "assignments.csv",
                "ablation.json", "importance.json"} <= produced
