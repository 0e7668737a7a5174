import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajgp import autodiff as ad
from trajgp import extractors as ex
from conftest import central_difference, relative_error

TINY = {
    "rnn": ex.ExtractorConfig(arch="rnn", input_dim=5, hidden_dim=4,
                              num_layers=2, decoder_dim=4, latent_dim=2,
                              dropout=0.0),
    "gru": ex.ExtractorConfig(arch="gru", input_dim=5, hidden_dim=4,
                              num_layers=2, decoder_dim=4, latent_dim=2,
                              dropout=0.0),
    "lstm": ex.ExtractorConfig(arch="lstm", input_dim=5, hidden_dim=4,
                               num_layers=2, decoder_dim=4, latent_dim=2,
                               dropout=0.0),
    "transformer": ex.ExtractorConfig(arch="transformer", input_dim=5,
                                      hidden_dim=8, num_layers=2, num_heads=2,
                                      feedforward_dim=16, decoder_dim=4,
                                      latent_dim=2, dropout=0.0),
}


class TestCyclicalEncoding:
    def test_phase_zero_month(self):
        # Month index 0 (January) sits at phase zero: (sin, cos) = (0, 1).
        out = ex.cyclical_encode(2020, 1, 1)
        np.testing.assert_allclose(out[2:4], [0.0, 1.0], atol=1e-12)

    def test_quarter_period_month(self):
        # Month index 3 with period 12 is a quarter turn: (1, 0).
        out = ex.cyclical_encode(2020, 4, 1)
        np.testing.assert_allclose(out[2:4], [1.0, 0.0], atol=1e-12)

    def test_periodicity(self):
        a = ex.cyclical_encode(2013, 5, 17)
        b = ex.cyclical_encode(2023, 5, 17)  # +10 years
        np.testing.assert_allclose(a, b, atol=1e-12)

    @given(st.integers(1900, 2100), st.integers(1, 12), st.integers(1, 31))
    @settings(max_examples=200, deadline=None)
    def test_pairs_on_unit_circle(self, year, month, day):
        out = ex.cyclical_encode(year, month, day)
        for i in range(0, 6, 2):
            assert abs(out[i] ** 2 + out[i + 1] ** 2 - 1.0) < 1e-12

    def test_unparseable_components_rejected(self):
        with pytest.raises(ValueError, match="day"):
            ex.cyclical_encode(2020, 1, 32)
        with pytest.raises(ValueError, match="month"):
            ex.cyclical_encode(2020, 0, 3)


class TestConfigValidation:
    def test_heads_must_divide_model_dim(self):
        config = ex.ExtractorConfig(arch="transformer", hidden_dim=10,
                                    num_heads=4)
        with pytest.raises(ValueError, match="divisible"):
            config.validate()

    def test_latent_dim_bounded_by_decoder(self):
        config = ex.ExtractorConfig(arch="rnn", decoder_dim=2, latent_dim=3)
        with pytest.raises(ValueError, match="latent_dim"):
            config.validate()

    def test_unknown_arch(self):
        with pytest.raises(ValueError, match="arch"):
            ex.ExtractorConfig(arch="cnn").validate()


class TestEncodePrefix:
    @pytest.mark.parametrize("arch", ex.ARCHITECTURES)
    def test_single_record_prefix(self, arch, rng):
        config = TINY[arch]
        params = ex.init_params(config, rng)
        out = ex.encode_prefix(config, params, rng.normal(size=(1, 5)))
        assert out.shape == (2,)
        assert np.all(np.isfinite(out))

    @pytest.mark.parametrize("arch", ex.ARCHITECTURES)
    @pytest.mark.parametrize("t", [1, 2, 4, 7])
    def test_latent_dim_contract(self, arch, t, rng):
        config = TINY[arch]
        params = ex.init_params(config, rng)
        out = ex.encode_prefix(config, params, rng.normal(size=(t, 5)))
        assert out.shape == (config.latent_dim,)

    @pytest.mark.parametrize("arch", ex.ARCHITECTURES)
    def test_deterministic_bit_identical(self, arch, rng):
        config = TINY[arch]
        params = ex.init_params(config, rng)
        seq = rng.normal(size=(4, 5))
        a = ex.encode_prefix(config, params, seq)
        b = ex.encode_prefix(config, params, seq)
        assert np.array_equal(a, b)

    def test_gru_is_order_sensitive(self, rng):
        config = TINY["gru"]
        params = ex.init_params(config, rng)
        seq = rng.normal(size=(5, 5))
        permuted = seq.copy()
        permuted[[0, 3]] = permuted[[3, 0]]  # reorder earlier steps only
        a = ex.encode_prefix(config, params, seq)
        b = ex.encode_prefix(config, params, permuted)
        assert np.max(np.abs(a - b)) > 1e-8

    def test_transformer_duplicate_final_record_is_finite(self, rng):
        config = TINY["transformer"]
        params = ex.init_params(config, rng)
        seq = rng.normal(size=(3, 5))
        dup = np.vstack([seq, seq[-1]])
        a = ex.encode_prefix(config, params, seq)
        b = ex.encode_prefix(config, params, dup)
        assert b.shape == a.shape
        assert np.all(np.isfinite(b))

    def test_empty_prefix_rejected(self, rng):
        config = TINY["rnn"]
        params = ex.init_params(config, rng)
        with pytest.raises(ValueError, match="at least one record"):
            ex.encode_prefix(config, params, np.zeros((0, 5)))

    def test_non_finite_input_rejected(self, rng):
        config = TINY["rnn"]
        params = ex.init_params(config, rng)
        bad = np.full((2, 5), np.nan)
        with pytest.raises(ad.NonFiniteError):
            ex.encode_prefix(config, params, bad)

    def test_padded_batch_matches_per_prefix(self, rng):
        # Masked batching must agree with one-at-a-time encoding.
        for arch in ex.ARCHITECTURES:
            config = TINY[arch]
            params = ex.init_params(config, rng)
            lens = [1, 3, 2]
            seqs = [rng.normal(size=(t, 5)) for t in lens]
            feats = np.zeros((3, 3, 5))
            mask = np.zeros((3, 3))
            for i, s in enumerate(seqs):
                feats[i, :len(s)] = s
                mask[i, :len(s)] = 1.0
            lifted = {k: ad.constant(v) for k, v in params.items()}
            batch = ex.encode_batch(config, lifted, feats, mask).data
            for i, s in enumerate(seqs):
                single = ex.encode_prefix(config, params, s)
                np.testing.assert_allclose(batch[i], single, atol=1e-10,
                                           err_msg=arch)


class TestGradients:
    @pytest.mark.parametrize("arch", ex.ARCHITECTURES)
    def test_gradients_match_finite_differences(self, arch, rng):
        config = TINY[arch]
        params = ex.init_params(config, rng)
        feats = rng.normal(size=(2, 3, 5))
        mask = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 0.0]])
        weights = rng.normal(size=(2, config.latent_dim))

        def loss_from(p):
            lifted = {k: ad.constant(v) for k, v in p.items()}
            out = ex.encode_batch(config, lifted, feats, mask)
            return float(ad.sum_(ad.mul(out, ad.constant(weights))).data)

        tape = ad.Tape()
        lifted = ad.lift_params(tape, params)
        out = ex.encode_batch(config, lifted, feats, mask)
        loss = ad.sum_(ad.mul(out, ad.constant(weights)))
        grads = ad.grads_by_name(lifted, ad.backward(tape, loss))

        checked = 0
        for name, value in params.items():
            def fn(v, name=name):
                p = dict(params)
                p[name] = v
                return loss_from(p)

            numeric = central_difference(fn, np.array(value), h=1e-6)
            # Floor absorbs FD noise on structurally-zero gradients (the key
            # projection bias cancels inside softmax).
            err = relative_error(grads[name], numeric, floor=1e-5)
            assert err < 1e-3, f"{arch} {name}: {err}"
            checked += 1
        assert checked == len(params)


class TestMleHead:
    def test_constant_head(self, rng):
        lifted = {"head.w": ad.constant(np.zeros((3, 1))),
                  "head.b": ad.constant(np.array([0.3]))}
        latents = ad.constant(rng.normal(size=(5, 3)))
        out = ex.mle_head(lifted, latents).data
        np.testing.assert_allclose(out, 0.3)

    def test_coordinate_pick(self):
        lifted = {"head.w": ad.constant(np.array([[1.0], [0.0]])),
                  "head.b": ad.constant(np.array([0.0]))}
        out = ex.mle_head(lifted, ad.constant([[1.5, 9.9]])).data
        np.testing.assert_allclose(out, [[1.5]])

    def test_trained_weight_recovers_slope(self, rng):
        # y = 2 h on scalar latents; Adam-trained weight near the
        # closed-form least-squares solution.
        h = rng.normal(size=(64, 1))
        y = 2.0 * h
        params = {"head.w": np.zeros((1, 1)), "head.b": np.zeros(1)}
        state = ad.AdamState()
        config = ad.AdamConfig(learning_rate=0.05)
        for _ in range(400):
            tape = ad.Tape()
            lifted = ad.lift_params(tape, params)
            pred = ex.mle_head(lifted, ad.constant(h))
            err = ad.sub(pred, ad.constant(y))
            loss = ad.mean(ad.mul(err, err))
            grads = ad.grads_by_name(lifted, ad.backward(tape, loss))
            params, state = ad.optimizer_step(params, grads, state, config)
        lstsq = float(np.linalg.lstsq(
            np.hstack([h, np.ones((64, 1))]), y, rcond=None)[0][0, 0])
        assert abs(float(params["head.w"][0, 0]) - 2.0) < 1e-2
        assert abs(float(params["head.w"][0, 0]) - lstsq) < 1e-2
