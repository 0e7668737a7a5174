import json

import pytest

from trajgp import config as config_mod
from trajgp import data


class TestSchema:
    def test_defaults_match_tuned_architecture_values(self):
        config = config_mod.from_dict({})
        assert config.model == "dkl"
        ext = config.extractor
        assert (ext.arch, ext.hidden_dim, ext.num_heads, ext.feedforward_dim,
                ext.num_layers, ext.decoder_dim, ext.latent_dim) == \
            ("transformer", 512, 32, 2048, 6, 256, 2)
        assert config.gp.num_inducing == 128
        assert config.gp.batch_size == 32
        assert config.gp.epochs == 200
        assert config.train_settings().learning_rate == 1e-4
        assert config.seeds == config_mod.DEFAULT_SEEDS
        assert config.extractor.input_dim == data.FEATURE_DIM

    def test_recurrent_arch_defaults(self):
        for arch, (hidden, layers, dec, latent, lr) in {
                "rnn": (512, 3, 128, 2, 5e-5),
                "gru": (512, 3, 128, 4, 2e-4),
                "lstm": (512, 4, 128, 3, 5e-5)}.items():
            config = config_mod.from_dict({"extractor": {"arch": arch}})
            ext = config.extractor
            assert (ext.hidden_dim, ext.num_layers, ext.decoder_dim,
                    ext.latent_dim) == (hidden, layers, dec, latent)
            assert config.train_settings().learning_rate == lr

    def test_unknown_top_level_key(self):
        with pytest.raises(config_mod.ConfigError, match="unknown key"):
            config_mod.from_dict({"modle": "dkl"})

    def test_unknown_nested_key(self):
        with pytest.raises(config_mod.ConfigError, match="gp"):
            config_mod.from_dict({"gp": {"inducing": 64}})

    def test_bad_model(self):
        with pytest.raises(config_mod.ConfigError, match="model"):
            config_mod.from_dict({"model": "gp"})

    def test_bad_clustering_method(self):
        with pytest.raises(config_mod.ConfigError, match="clustering method"):
            config_mod.from_dict({"clustering": {"methods": ["dbscan"]}})

    def test_bad_extractor_combination(self):
        with pytest.raises(config_mod.ConfigError, match="divisible"):
            config_mod.from_dict({"extractor": {"arch": "transformer",
                                                "hidden_dim": 10,
                                                "num_heads": 3}})

    def test_empty_seeds_rejected(self):
        with pytest.raises(config_mod.ConfigError, match="seeds"):
            config_mod.from_dict({"seeds": []})

    def test_synthetic_curve_overrides(self):
        config = config_mod.from_dict({
            "synthetic": {"curves": {"stable_poor": {"level": 1.5}}}})
        assert config.synthetic.curves["stable_poor"].level == 1.5
        assert config.synthetic.curves["stable_good"].level == 0.1


class TestHash:
    def test_stable_under_key_reordering(self, tmp_path):
        a = {"model": "dkl", "gp": {"epochs": 3, "batch_size": 16}}
        b = {"gp": {"batch_size": 16, "epochs": 3}, "model": "dkl"}
        ha = config_mod.config_hash(config_mod.from_dict(a))
        hb = config_mod.config_hash(config_mod.from_dict(b))
        assert ha == hb

    def test_default_elision_does_not_change_hash(self):
        explicit = config_mod.from_dict({"gp": {"epochs": 200}})
        implicit = config_mod.from_dict({})
        assert config_mod.config_hash(explicit) == \
            config_mod.config_hash(implicit)

    def test_semantic_change_changes_hash(self):
        base = config_mod.from_dict({})
        changed = config_mod.from_dict({"gp": {"epochs": 7}})
        assert config_mod.config_hash(base) != config_mod.config_hash(changed)

    def test_from_file_round_trip(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps({"model": "mle",
                                    "extractor": {"arch": "gru"}}))
        config = config_mod.from_file(path)
        assert config.model == "mle"
        assert config.extractor.arch == "gru"

    def test_from_file_errors(self, tmp_path):
        with pytest.raises(config_mod.ConfigError, match="cannot read"):
            config_mod.from_file(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        with pytest.raises(config_mod.ConfigError, match="valid JSON"):
            config_mod.from_file(bad)
