"""Sequence feature extractors: variable-length encounter prefixes in,
fixed-size latent vectors out.

Four encoder families (rnn, gru, lstm, transformer) share one decoder
contract: the encoder output is reduced to a single hidden vector (final
state for the recurrent families, masked mean pooling for the transformer)
and a two-layer MLP maps it to the latent space the GP kernel operates on.
A linear head on the same latent serves as the maximum-likelihood baseline.

All forward passes run on padded batches [b, t, d] with a 0/1 validity mask
and are recorded on a tape, so gradients flow end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trajgp import autodiff as ad

ARCHITECTURES = ("rnn", "gru", "lstm", "transformer")

NEG_ATTENTION_BIAS = -1e9
TWO_PI = 2.0 * np.pi

# (sin, cos) period per calendar component, in component units.
DAY_PERIOD = 31.0
MONTH_PERIOD = 12.0
YEAR_PERIOD = 10.0


@dataclass
class ExtractorConfig:
    arch: str = "transformer"
    input_dim: int = 16
    hidden_dim: int = 512          # model dim for the transformer
    num_layers: int = 6
    num_heads: int = 32            # transformer only
    feedforward_dim: int = 2048    # transformer only
    decoder_dim: int = 256
    latent_dim: int = 2
    dropout: float = 0.1

    def validate(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ValueError(
                f"arch must be one of {ARCHITECTURES}, got '{self.arch}'")
        for name in ("input_dim", "hidden_dim", "num_layers", "decoder_dim",
                     "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 1 <= self.latent_dim <= self.decoder_dim:
            raise ValueError("latent_dim must lie in [1, decoder_dim]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.arch == "transformer":
            if self.num_heads < 1 or self.feedforward_dim < 1:
                raise ValueError("num_heads and feedforward_dim must be positive")
            if self.hidden_dim % self.num_heads:
                raise ValueError(
                    f"hidden_dim ({self.hidden_dim}) must be divisible by "
                    f"num_heads ({self.num_heads})")


def cyclical_encode(year: int, month: int, day: int) -> np.ndarray:
    """(sin, cos) pairs for day-of-month, month, and year-within-decade.

    Components are mapped to zero-based phase (day 1 and month 1 sit at
    phase 0) over periods of 31, 12 and 10 respectively, so each pair lies
    on the unit circle and repeats exactly at its period.
    """
    if not 1 <= day <= 31:
        raise ValueError(f"day out of range: {day}")
    if not 1 <= month <= 12:
        raise ValueError(f"month out of range: {month}")
    phases = np.array([
        (day - 1) / DAY_PERIOD,
        (month - 1) / MONTH_PERIOD,
        (year % 10) / YEAR_PERIOD,
    ])
    angles = TWO_PI * phases
    out = np.empty(6)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------

def _uniform_fanin(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diagonal(r))


def _linear(rng, params, name, n_in, n_out):
    params[f"{name}.w"] = _uniform_fanin(rng, n_in, (n_in, n_out))
    params[f"{name}.b"] = np.zeros(n_out)


def init_params(config: ExtractorConfig, rng: np.random.Generator) -> dict:
    """Fresh parameter dict: fan-in uniform linear maps, orthogonal
    recurrent kernels, unit layer-norm gains."""
    config.validate()
    params: dict[str, np.ndarray] = {}
    d, h = config.input_dim, config.hidden_dim

    if config.arch == "transformer":
        _linear(rng, params, "enc.input", d, h)
        for layer in range(config.num_layers):
            p = f"enc.layer{layer}"
            for proj in ("wq", "wk", "wv", "wo"):
                _linear(rng, params, f"{p}.attn.{proj}", h, h)
            _linear(rng, params, f"{p}.ffn.l1", h, config.feedforward_dim)
            _linear(rng, params, f"{p}.ffn.l2", config.feedforward_dim, h)
            for ln in ("ln1", "ln2"):
                params[f"{p}.{ln}.gain"] = np.ones(h)
                params[f"{p}.{ln}.bias"] = np.zeros(h)
    else:
        gates = {"rnn": 1, "gru": 3, "lstm": 4}[config.arch]
        for layer in range(config.num_layers):
            p = f"enc.layer{layer}"
            n_in = d if layer == 0 else h
            params[f"{p}.w_x"] = _uniform_fanin(rng, n_in, (n_in, gates * h))
            params[f"{p}.w_h"] = np.concatenate(
                [_orthogonal(rng, h) for _ in range(gates)], axis=1)
            params[f"{p}.b"] = np.zeros(gates * h)

    _linear(rng, params, "dec.l1", h, config.decoder_dim)
    _linear(rng, params, "dec.l2", config.decoder_dim, config.latent_dim)
    return params


def init_head_params(config: ExtractorConfig, rng: np.random.Generator) -> dict:
    return {"head.w": _uniform_fanin(rng, config.latent_dim,
                                     (config.latent_dim, 1)),
            "head.b": np.zeros(1)}


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _dropout(x: ad.Tensor, rate: float, rng) -> ad.Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, ad.constant(keep))


def _affine(p, name, x):
    return ad.add(ad.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def _recurrent_stack(config, p, x, mask, dropout_rng):
    """Stacked RNN/GRU/LSTM over [b, t, *]; returns the final valid state."""
    b, t = mask.shape
    h_dim = config.hidden_dim
    step_masks = [ad.constant(mask[:, i][:, None]) for i in range(t)]
    inv_masks = [ad.constant(1.0 - mask[:, i][:, None]) for i in range(t)]
    layer_in = [x[:, i, :] for i in range(t)]

    for layer in range(config.num_layers):
        pre = f"enc.layer{layer}"
        w_x, w_h, bias = p[f"{pre}.w_x"], p[f"{pre}.w_h"], p[f"{pre}.b"]
        h = ad.constant(np.zeros((b, h_dim)))
        c = ad.constant(np.zeros((b, h_dim)))
        outputs = []
        for i in range(t):
            xc = ad.add(ad.matmul(layer_in[i], w_x), bias)
            hc = ad.matmul(h, w_h)
            if config.arch == "rnn":
                h_new = ad.tanh(ad.add(xc, hc))
            elif config.arch == "gru":
                pre = ad.add(xc, hc)
                r = ad.sigmoid(pre[:, :h_dim])
                z = ad.sigmoid(pre[:, h_dim:2 * h_dim])
                # Candidate applies the reset gate to the recurrent part only.
                n = ad.tanh(ad.add(xc[:, 2 * h_dim:],
                                   ad.mul(r, hc[:, 2 * h_dim:])))
                h_new = ad.add(ad.mul(ad.sub(ad.constant(1.0), z), n),
                               ad.mul(z, h))
            else:  # lstm
                gates = ad.add(xc, hc)
                i_g = ad.sigmoid(gates[:, :h_dim])
                f_g = ad.sigmoid(gates[:, h_dim:2 * h_dim])
                g_g = ad.tanh(gates[:, 2 * h_dim:3 * h_dim])
                o_g = ad.sigmoid(gates[:, 3 * h_dim:])
                c_new = ad.add(ad.mul(f_g, c), ad.mul(i_g, g_g))
                c = ad.add(ad.mul(step_masks[i], c_new),
                           ad.mul(inv_masks[i], c))
                h_new = ad.mul(o_g, ad.tanh(c))
            # Padded steps keep the previous state.
            h = ad.add(ad.mul(step_masks[i], h_new), ad.mul(inv_masks[i], h))
            outputs.append(h)
        if layer < config.num_layers - 1:
            outputs = [_dropout(o, config.dropout, dropout_rng)
                       for o in outputs]
        layer_in = outputs
    return layer_in[-1]


def _transformer_stack(config, p, x, mask, dropout_rng):
    """Post-norm encoder stack over [b, t, model_dim]; masked mean pooling."""
    b, t = mask.shape
    h_dim = config.hidden_dim
    heads = config.num_heads
    d_head = h_dim // heads
    scale = 1.0 / np.sqrt(d_head)
    # Additive key bias: 0 on valid positions, a large negative on padding.
    key_bias = ad.constant(
        np.where(mask > 0, 0.0, NEG_ATTENTION_BIAS)[:, None, None, :])

    hidden = _affine(p, "enc.input", x)
    for layer in range(config.num_layers):
        pre = f"enc.layer{layer}"

        def split_heads(tensor):
            return ad.transpose(ad.reshape(tensor, (b, t, heads, d_head)),
                                (0, 2, 1, 3))

        q = split_heads(_affine(p, f"{pre}.attn.wq", hidden))
        k = split_heads(_affine(p, f"{pre}.attn.wk", hidden))
        v = split_heads(_affine(p, f"{pre}.attn.wv", hidden))
        scores = ad.mul(ad.matmul(q, ad.transpose(k)), ad.constant(scale))
        probs = ad.softmax(ad.add(scores, key_bias))
        probs = _dropout(probs, config.dropout, dropout_rng)
        attended = ad.reshape(
            ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, t, h_dim))
        attended = _dropout(_affine(p, f"{pre}.attn.wo", attended),
                            config.dropout, dropout_rng)

        hidden = ad.add(hidden, attended)
        hidden = ad.add(ad.mul(ad.layer_norm(hidden), p[f"{pre}.ln1.gain"]),
                        p[f"{pre}.ln1.bias"])

        ff = _affine(p, f"{pre}.ffn.l2",
                     ad.relu(_affine(p, f"{pre}.ffn.l1", hidden)))
        hidden = ad.add(hidden, _dropout(ff, config.dropout, dropout_rng))
        hidden = ad.add(ad.mul(ad.layer_norm(hidden), p[f"{pre}.ln2.gain"]),
                        p[f"{pre}.ln2.bias"])

    mask3 = ad.constant(mask[:, :, None])
    counts = ad.constant(np.sum(mask, axis=1)[:, None])
    return ad.div(ad.sum_(ad.mul(hidden, mask3), axis=1), counts)


def encode_batch(config: ExtractorConfig, lifted: dict,
                 features: np.ndarray, mask: np.ndarray,
                 dropout_rng=None) -> ad.Tensor:
    """Latents [b, latent_dim] for a padded batch of prefixes.

    ``lifted`` maps parameter names to tensors (leaves while training,
    constants at evaluation).  ``dropout_rng`` enables training-mode dropout;
    None disables it.
    """
    features = np.asarray(features, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if features.ndim != 3 or mask.shape != features.shape[:2]:
        raise ValueError(f"expected [b, t, d] features with [b, t] mask, got "
                         f"{features.shape} / {mask.shape}")
    if features.shape[2] != config.input_dim:
        raise ValueError(f"feature dim {features.shape[2]} != configured "
                         f"input_dim {config.input_dim}")
    if not np.all(np.isfinite(features)):
        raise ad.NonFiniteError("non-finite extractor inputs")
    if np.any(np.sum(mask, axis=1) < 1):
        raise ValueError("every prefix needs at least one valid record")

    x = ad.constant(features)
    if config.arch == "transformer":
        pooled = _transformer_stack(config, lifted, x, mask, dropout_rng)
    else:
        pooled = _recurrent_stack(config, lifted, x, mask, dropout_rng)
    pooled = _dropout(pooled, config.dropout, dropout_rng)
    return _affine(lifted, "dec.l2", ad.tanh(_affine(lifted, "dec.l1", pooled)))


def encode_prefix(config: ExtractorConfig, params: dict,
                  sequence: np.ndarray) -> np.ndarray:
    """Latent vector for one prefix [t, d]; evaluation mode, no recording."""
    sequence = np.atleast_2d(np.asarray(sequence, dtype=np.float64))
    if sequence.shape[0] < 1:
        raise ValueError("prefix must contain at least one record")
    lifted = {k: ad.constant(v) for k, v in params.items()}
    batch = sequence[None, :, :]
    mask = np.ones((1, sequence.shape[0]))
    return encode_batch(config, lifted, batch, mask).data[0]


def mle_head(lifted: dict, latents: ad.Tensor) -> ad.Tensor:
    """Linear read-out w^T h + b used by the maximum-likelihood baseline."""
    return ad.add(ad.matmul(latents, lifted["head.w"]), lifted["head.b"])
