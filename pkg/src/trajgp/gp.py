"""Gaussian-process regression layers.

Two routes are kept deliberately independent: an exact GP on small data used
as a verification oracle, and the sparse variational GP (inducing points +
Cholesky-parameterized Gaussian) that trains at scale by maximizing the
evidence lower bound.  The deep kernel simply evaluates the squared
exponential on learned sequence features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from trajgp import autodiff as ad

JITTER_BASE = 1e-6
JITTER_MAX = 1e-2

LOG_2PI = math.log(2.0 * math.pi)


def softplus_np(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y: float) -> float:
    """Inverse of log(1 + e^x); y must be positive."""
    y = float(y)
    if y <= 0:
        raise ValueError(f"softplus inverse requires positive input, got {y}")
    if y < 1.0:
        return math.log(math.expm1(y))
    return y + math.log1p(-math.exp(-y))


@dataclass
class KernelParams:
    """Squared-exponential kernel hyperparameters, stored unconstrained."""

    raw_lengthscale: float
    raw_outputscale: float = softplus_inverse(1.0)

    @classmethod
    def create(cls, lengthscale: float, outputscale: float = 1.0):
        return cls(softplus_inverse(lengthscale), softplus_inverse(outputscale))

    @property
    def lengthscale(self) -> float:
        return float(softplus_np(self.raw_lengthscale))

    @property
    def outputscale(self) -> float:
        return float(softplus_np(self.raw_outputscale))


def kernel_matrix(params: KernelParams, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """k(a_i, b_j) = s2 * exp(-||a_i - b_j||^2 / (2 l^2)) for row pairs."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"kernel inputs disagree on feature dim: "
                         f"{a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ad.NonFiniteError("non-finite kernel inputs")
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] \
        - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    ell = params.lengthscale
    return params.outputscale * np.exp(-sq / (2.0 * ell * ell))


def find_jitter(mat: np.ndarray, base: float = 0.0) -> float:
    """Smallest jitter from the escalation ladder that makes ``mat`` factor.

    Tries the plain matrix first, then JITTER_BASE escalating by 10 up to
    JITTER_MAX; failure beyond that is a hard error carrying the failing
    leading minor index.
    """
    eps = base
    last_err = None
    while True:
        try:
            scipy.linalg.cholesky(mat + eps * np.eye(mat.shape[0]), lower=True)
            return eps
        except scipy.linalg.LinAlgError as err:
            last_err = err
            eps = JITTER_BASE if eps == 0.0 else eps * 10.0
            if eps > JITTER_MAX * (1.0 + 1e-12):
                minor = int(str(last_err).split("-th")[0]) \
                    if "-th" in str(last_err) else -1
                raise ad.NotPositiveDefiniteError(
                    minor,
                    f"cholesky failed at maximum jitter {JITTER_MAX}: {last_err}",
                ) from last_err


def chol_with_jitter(mat: np.ndarray, base: float = 0.0):
    eps = find_jitter(mat, base=base)
    chol_l = scipy.linalg.cholesky(mat + eps * np.eye(mat.shape[0]), lower=True)
    return chol_l, eps


# ---------------------------------------------------------------------------
# Exact GP (verification oracle)
# ---------------------------------------------------------------------------

@dataclass
class ExactGpModel:
    """Exact GP regression with constant mean and Gaussian noise."""

    train_x: np.ndarray           # (n, m)
    train_y: np.ndarray           # (n,)
    kernel: KernelParams
    noise_variance: float
    mean_const: float = 0.0

    def __post_init__(self):
        self.train_x = np.atleast_2d(np.asarray(self.train_x, dtype=np.float64))
        self.train_y = np.asarray(self.train_y, dtype=np.float64).reshape(-1)
        if self.train_x.shape[0] != self.train_y.shape[0]:
            raise ValueError("training inputs and targets disagree in length")
        if self.noise_variance <= 0:
            raise ValueError("noise variance must be positive")


@dataclass
class GaussianPrediction:
    """Per-sample Gaussian predictive distribution."""

    mean: np.ndarray
    variance: np.ndarray
    includes_noise: bool

    def __post_init__(self):
        if np.any(self.variance <= 0):
            raise ValueError("predictive variance must be positive")


def _train_chol(model: ExactGpModel):
    k_xx = kernel_matrix(model.kernel, model.train_x, model.train_x)
    lam = k_xx + model.noise_variance * np.eye(k_xx.shape[0])
    return chol_with_jitter(lam)


def exact_gp_posterior(model: ExactGpModel, test_x: np.ndarray,
                       include_noise: bool = False) -> GaussianPrediction:
    """Posterior predictive mean/variance at the given inputs."""
    test_x = np.atleast_2d(np.asarray(test_x, dtype=np.float64))
    s2 = model.kernel.outputscale
    if model.train_x.shape[0] == 0:
        mean = np.full(test_x.shape[0], model.mean_const)
        var = np.full(test_x.shape[0], s2)
    else:
        chol_l, _ = _train_chol(model)
        k_xs = kernel_matrix(model.kernel, model.train_x, test_x)
        a = scipy.linalg.solve_triangular(chol_l, k_xs, lower=True)
        resid = scipy.linalg.solve_triangular(
            chol_l, model.train_y - model.mean_const, lower=True)
        mean = model.mean_const + a.T @ resid
        var = s2 - np.sum(a * a, axis=0)
    var = np.maximum(var, 1e-12)
    if include_noise:
        var = var + model.noise_variance
    return GaussianPrediction(mean, var, include_noise)


def log_marginal_likelihood(model: ExactGpModel) -> float:
    """-1/2 r^T Lam^-1 r - 1/2 log|Lam| - n/2 log 2pi with r = y - mu0."""
    n = model.train_x.shape[0]
    chol_l, _ = _train_chol(model)
    alpha = scipy.linalg.solve_triangular(
        chol_l, model.train_y - model.mean_const, lower=True)
    return float(-0.5 * np.dot(alpha, alpha)
                 - np.sum(np.log(np.diagonal(chol_l)))
                 - 0.5 * n * LOG_2PI)


# ---------------------------------------------------------------------------
# Sparse variational GP
# ---------------------------------------------------------------------------

GP_PARAM_KEYS = ("gp.inducing", "gp.var_mean", "gp.var_chol_raw",
                 "gp.raw_lengthscale", "gp.raw_outputscale", "gp.raw_noise",
                 "gp.mean_const")


@dataclass
class SvgpState:
    """Inducing locations plus a Cholesky-parameterized variational Gaussian.

    The raw covariance factor is unconstrained; its strict lower triangle is
    used as-is and the diagonal passes through softplus, which keeps the
    factor valid for any optimizer iterate.
    """

    inducing: np.ndarray          # (M, m)
    var_mean: np.ndarray          # (M,)
    var_chol_raw: np.ndarray      # (M, M)
    raw_lengthscale: float
    raw_outputscale: float
    raw_noise: float
    mean_const: float

    def __post_init__(self):
        self.inducing = np.atleast_2d(np.asarray(self.inducing, np.float64))
        self.var_mean = np.asarray(self.var_mean, np.float64).reshape(-1)
        self.var_chol_raw = np.asarray(self.var_chol_raw, np.float64)
        m = self.inducing.shape[0]
        if m < 1:
            raise ValueError("at least one inducing point required")
        if self.var_mean.shape != (m,) or self.var_chol_raw.shape != (m, m):
            raise ValueError("variational parameter shapes disagree with M")

    @property
    def num_inducing(self) -> int:
        return self.inducing.shape[0]

    @property
    def kernel(self) -> KernelParams:
        return KernelParams(self.raw_lengthscale, self.raw_outputscale)

    @property
    def noise_variance(self) -> float:
        return float(softplus_np(self.raw_noise))

    @property
    def var_chol(self) -> np.ndarray:
        return _structured_tril_np(self.var_chol_raw)

    @property
    def var_cov(self) -> np.ndarray:
        chol_l = self.var_chol
        return chol_l @ chol_l.T

    def to_params(self) -> dict:
        return {
            "gp.inducing": self.inducing.copy(),
            "gp.var_mean": self.var_mean.copy(),
            "gp.var_chol_raw": self.var_chol_raw.copy(),
            "gp.raw_lengthscale": np.array(self.raw_lengthscale),
            "gp.raw_outputscale": np.array(self.raw_outputscale),
            "gp.raw_noise": np.array(self.raw_noise),
            "gp.mean_const": np.array(self.mean_const),
        }

    @classmethod
    def from_params(cls, params: dict) -> "SvgpState":
        return cls(
            inducing=params["gp.inducing"],
            var_mean=params["gp.var_mean"],
            var_chol_raw=params["gp.var_chol_raw"],
            raw_lengthscale=float(params["gp.raw_lengthscale"]),
            raw_outputscale=float(params["gp.raw_outputscale"]),
            raw_noise=float(params["gp.raw_noise"]),
            mean_const=float(params["gp.mean_const"]),
        )


def _structured_tril_np(raw: np.ndarray) -> np.ndarray:
    out = np.tril(raw, k=-1)
    np.fill_diagonal(out, softplus_np(np.diagonal(raw)))
    return out


def raw_from_chol(chol_l: np.ndarray) -> np.ndarray:
    """Unconstrained raw factor whose structured form equals ``chol_l``."""
    raw = np.tril(chol_l, k=-1)
    diag = [softplus_inverse(v) for v in np.diagonal(chol_l)]
    np.fill_diagonal(raw, diag)
    return raw


def init_svgp_state(inducing: np.ndarray, targets: np.ndarray,
                    latent_dim: int) -> SvgpState:
    """Scale-aware initialization: prior-matched variational distribution,
    mean at the target average, noise at a tenth of the target variance."""
    inducing = np.atleast_2d(np.asarray(inducing, np.float64))
    targets = np.asarray(targets, np.float64).reshape(-1)
    mean_const = float(np.mean(targets)) if targets.size else 0.0
    var = float(np.var(targets)) if targets.size > 1 else 1.0
    noise = max(0.1 * var, 1e-4)
    kernel = KernelParams.create(lengthscale=math.sqrt(latent_dim))
    k_zz = kernel_matrix(kernel, inducing, inducing)
    chol_l, _ = chol_with_jitter(k_zz)
    return SvgpState(
        inducing=inducing,
        var_mean=np.full(inducing.shape[0], mean_const),
        var_chol_raw=raw_from_chol(chol_l),
        raw_lengthscale=kernel.raw_lengthscale,
        raw_outputscale=kernel.raw_outputscale,
        raw_noise=softplus_inverse(noise),
        mean_const=mean_const,
    )


# --- tape-side building blocks ---------------------------------------------

def _kernel_ops(sq_dist: ad.Tensor, ell: ad.Tensor, s2: ad.Tensor) -> ad.Tensor:
    denom = ad.mul(ad.mul(ell, ell), ad.constant(2.0))
    return ad.mul(ad.exp(ad.neg(ad.div(sq_dist, denom))), s2)


def _structured_tril_ops(raw: ad.Tensor) -> ad.Tensor:
    m = raw.shape[0]
    strict = np.tril(np.ones((m, m)), k=-1)
    eye = np.eye(m)
    return ad.add(ad.mul(raw, ad.constant(strict)),
                  ad.mul(ad.softplus(raw), ad.constant(eye)))


def elbo(gp_leaves: dict, latents: ad.Tensor, targets: np.ndarray,
         n_total: int) -> ad.Tensor:
    """Evidence lower bound for one mini-batch, as a differentiable graph.

    ``gp_leaves`` maps GP_PARAM_KEYS to tensors (leaves during training,
    constants at evaluation).  The expected Gaussian log-likelihood term is
    rescaled by n_total / batch and the KL to the inducing prior is exact.
    """
    targets = np.asarray(targets, np.float64).reshape(-1)
    b = targets.shape[0]
    if b < 1:
        raise ValueError("batch must contain at least one target")
    if n_total < b:
        raise ValueError("dataset size smaller than batch size")

    z = gp_leaves["gp.inducing"]
    m = z.shape[0]
    ell = ad.softplus(gp_leaves["gp.raw_lengthscale"])
    s2 = ad.softplus(gp_leaves["gp.raw_outputscale"])
    noise = ad.softplus(gp_leaves["gp.raw_noise"])
    mu0 = gp_leaves["gp.mean_const"]

    k_zz = _kernel_ops(ad.pairwise_sqdist(z, z), ell, s2)
    eps = find_jitter(k_zz.data)
    k_zz = ad.add(k_zz, ad.constant(eps * np.eye(m)))
    chol_zz = ad.cholesky(k_zz)

    k_zh = _kernel_ops(ad.pairwise_sqdist(z, latents), ell, s2)
    a = ad.triangular_solve(chol_zz, k_zh)                      # L^-1 K_zh
    delta = ad.sub(ad.reshape(gp_leaves["gp.var_mean"], (m, 1)), mu0)
    c = ad.triangular_solve(chol_zz, delta)                     # L^-1 (m_v - mu0)
    mean_f = ad.add(ad.matmul(ad.transpose(a), c), mu0)         # (b, 1)

    f = ad.triangular_solve(chol_zz, a, trans=True)             # Kzz^-1 K_zh
    var_chol = _structured_tril_ops(gp_leaves["gp.var_chol_raw"])
    e = ad.matmul(ad.transpose(var_chol), f)                    # (M, b)
    qvar = ad.add(ad.sub(s2, ad.sum_(ad.mul(a, a), axis=0)),
                  ad.sum_(ad.mul(e, e), axis=0))                # (b,)

    resid = ad.sub(ad.constant(targets.reshape(b, 1)), mean_f)  # (b, 1)
    quad = ad.add(ad.sum_(ad.mul(resid, resid)), ad.sum_(qvar))
    log_noise = ad.log(noise)
    ll = ad.sub(
        ad.mul(ad.constant(-0.5 * b), ad.add(log_noise, ad.constant(LOG_2PI))),
        ad.div(quad, ad.mul(noise, ad.constant(2.0))))
    ll = ad.mul(ll, ad.constant(float(n_total) / b))

    g = ad.triangular_solve(chol_zz, var_chol)                  # L^-1 L_v
    kl = ad.mul(ad.constant(0.5), ad.add(
        ad.sub(ad.add(ad.sum_(ad.mul(g, g)), ad.sum_(ad.mul(c, c))),
               ad.constant(float(m))),
        ad.sub(ad.logdet_from_chol(chol_zz), ad.logdet_from_chol(var_chol))))

    return ad.sub(ll, kl)


def elbo_value(state: SvgpState, latents: np.ndarray, targets: np.ndarray,
               n_total: int) -> float:
    """ELBO as a plain number (no gradients recorded)."""
    leaves = {k: ad.constant(v) for k, v in state.to_params().items()}
    return float(elbo(leaves, ad.constant(np.atleast_2d(latents)),
                      targets, n_total).data)


def kl_to_prior(state: SvgpState) -> float:
    """KL divergence from the variational Gaussian to the inducing prior."""
    m = state.num_inducing
    k_zz = kernel_matrix(state.kernel, state.inducing, state.inducing)
    eps = find_jitter(k_zz)
    chol_l = scipy.linalg.cholesky(k_zz + eps * np.eye(m), lower=True)
    var_chol = state.var_chol
    g = scipy.linalg.solve_triangular(chol_l, var_chol, lower=True)
    c = scipy.linalg.solve_triangular(
        chol_l, state.var_mean - state.mean_const, lower=True)
    logdet_k = 2.0 * np.sum(np.log(np.diagonal(chol_l)))
    logdet_s = 2.0 * np.sum(np.log(np.diagonal(var_chol)))
    return float(0.5 * (np.sum(g * g) + np.dot(c, c) - m
                        + logdet_k - logdet_s))


def svgp_predict(state: SvgpState, latents: np.ndarray,
                 include_noise: bool = True) -> GaussianPrediction:
    """Predictive Gaussians at the given latent inputs."""
    h = np.atleast_2d(np.asarray(latents, np.float64))
    kernel = state.kernel
    k_zz = kernel_matrix(kernel, state.inducing, state.inducing)
    eps = find_jitter(k_zz)
    chol_l = scipy.linalg.cholesky(
        k_zz + eps * np.eye(k_zz.shape[0]), lower=True)
    k_zh = kernel_matrix(kernel, state.inducing, h)
    a = scipy.linalg.solve_triangular(chol_l, k_zh, lower=True)
    c = scipy.linalg.solve_triangular(
        chol_l, state.var_mean - state.mean_const, lower=True)
    mean = state.mean_const + a.T @ c
    f = scipy.linalg.solve_triangular(chol_l, a, lower=True, trans="T")
    e = state.var_chol.T @ f
    var = kernel.outputscale - np.sum(a * a, axis=0) + np.sum(e * e, axis=0)
    var = np.maximum(var, 1e-12)
    if include_noise:
        var = var + state.noise_variance
    return GaussianPrediction(mean, var, include_noise)


def optimal_variational_params(inducing: np.ndarray, train_x: np.ndarray,
                               train_y: np.ndarray, kernel: KernelParams,
                               noise_variance: float, mean_const: float):
    """Closed-form ELBO-optimal variational mean and covariance.

    Uses the same jittered inducing covariance as the rest of the sparse
    route, so plugging the result into ``svgp_predict`` is self-consistent.
    Returns (var_mean, var_cov, var_chol_raw).
    """
    z = np.atleast_2d(np.asarray(inducing, np.float64))
    x = np.atleast_2d(np.asarray(train_x, np.float64))
    y = np.asarray(train_y, np.float64).reshape(-1) - mean_const
    mm = z.shape[0]
    k_zz = kernel_matrix(kernel, z, z)
    eps = find_jitter(k_zz)
    k_zz = k_zz + eps * np.eye(mm)
    k_zx = kernel_matrix(kernel, z, x)
    sigma_inv = k_zz + (k_zx @ k_zx.T) / noise_variance
    chol_s, _ = chol_with_jitter(sigma_inv)
    w = scipy.linalg.solve_triangular(chol_s, k_zz, lower=True)
    var_cov = w.T @ w                                   # Kzz Sigma Kzz
    rhs = scipy.linalg.solve_triangular(
        chol_s, k_zx @ y / noise_variance, lower=True)
    var_mean = mean_const + w.T @ rhs
    chol_v, _ = chol_with_jitter(var_cov)
    return var_mean, var_cov, raw_from_chol(chol_v)
