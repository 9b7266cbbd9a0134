"""Fisher scores, Fisher information and Fisher vectors for diagonal
Gaussians and Gaussian mixtures.

For a Gaussian the mean block of the Fisher vector, (x - mu) / sigma, is
exactly the batch-normalizing transform with eps = 0. For a mixture the
k-th mean block is that same standardization against component k, scaled
by nu_k(x) / sqrt(lambda_k).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import gmm

_SQRT2 = math.sqrt(2.0)


class DomainError(ValueError):
    pass


@dataclass
class FisherVec:
    """Mean and deviation blocks. Shapes (..., D) for a Gaussian and
    (..., K, D) for a mixture."""

    g_mu: np.ndarray
    g_sigma: np.ndarray

    def flat(self):
        return np.concatenate([self.g_mu.reshape(-1), self.g_sigma.reshape(-1)])


def _check_sigma(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise DomainError("sigma must be strictly positive")
    return sigma


def gaussian_log_density(x, mu, sigma):
    """Elementwise log N(x; mu, sigma^2)."""
    sigma = _check_sigma(sigma)
    z = (np.asarray(x, dtype=np.float64) - mu) / sigma
    return -0.5 * z * z - np.log(sigma) - 0.5 * math.log(2 * math.pi)


def fisher_score_gaussian(x, mu, sigma):
    """Gradient of log N(x; mu, sigma^2) in (mu, sigma); stacked on axis 0."""
    sigma = _check_sigma(sigma)
    d = np.asarray(x, dtype=np.float64) - mu
    return np.stack([d / sigma**2, -1.0 / sigma + d * d / sigma**3])


def fisher_vector_gaussian(x, mu, sigma):
    sigma = _check_sigma(sigma)
    z = (np.asarray(x, dtype=np.float64) - mu) / sigma
    return FisherVec(z, (z * z - 1.0) / _SQRT2)


def whitening_factor_gaussian(sigma):
    """Diagonal L with L^T L = F^{-1}: (sigma, sigma / sqrt(2))."""
    sigma = _check_sigma(sigma)
    return np.stack([sigma, sigma / _SQRT2])


def fim_gaussian(sigma):
    """Closed-form FIM per dimension, shape (..., 2, 2)."""
    sigma = _check_sigma(sigma)
    out = np.zeros(np.shape(sigma) + (2, 2))
    out[..., 0, 0] = 1.0 / sigma**2
    out[..., 1, 1] = 2.0 / sigma**2
    return out


def fim_gaussian_mc(mu, sigma, n_samples, rng):
    """Monte-Carlo E[G G^T] under N(mu, sigma^2), shape (D, 2, 2).

    The standard error of each diagonal entry is about sqrt(2/n) and
    sqrt(10/n) relative, so n = 1e6 keeps both well inside 2%.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_1d(_check_sigma(sigma))
    x = mu + sigma * rng.standard_normal((int(n_samples), mu.shape[0]))
    g = fisher_score_gaussian(x, mu, sigma)           # (2, n, D)
    est = np.einsum("and,bnd->dab", g, g) / x.shape[0]
    return 0.5 * (est + est.transpose(0, 2, 1))


def fisher_vector_gmm(x, params, nu=None):
    """Per-component Fisher vector of one sample (D,) or a batch (m, D).

    ``nu`` overrides the posteriors computed from ``params``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if nu is None:
        nu = gmm.e_step(xs, params).nu
    sigma = np.sqrt(params.variances)
    z = (xs[:, None, :] - params.means[None]) / sigma[None]       # (m, K, D)
    scale = (np.asarray(nu) / np.sqrt(params.weights))[:, :, None]
    fv = FisherVec(scale * z, scale * (z * z - 1.0) / _SQRT2)
    if single:
        return FisherVec(fv.g_mu[0], fv.g_sigma[0])
    return fv


def gmm_score(x, params):
    """Gradient of log p(x) in (mu_k, sigma_k), each (m, K, D)."""
    xs = np.atleast_2d(np.asarray(x, dtype=np.float64))
    nu = gmm.e_step(xs, params).nu[:, :, None]
    sigma = np.sqrt(params.variances)[None]
    d = xs[:, None, :] - params.means[None]
    return nu * d / sigma**2, nu * (-1.0 / sigma + d * d / sigma**3)


def fim_gmm(params):
    """Closed-form approximation, diag(lambda/sigma^2, 2 lambda/sigma^2),
    per component and dimension, shape (K, D, 2)."""
    lam = params.weights[:, None]
    return np.stack([lam / params.variances, 2 * lam / params.variances], axis=-1)


def fim_gmm_mc(params, n_samples, rng):
    """Monte-Carlo diagonal of the mixture FIM in (mu_k, sigma_k), (K, D, 2)."""
    n = int(n_samples)
    comp = rng.choice(params.K, size=n, p=params.weights)
    x = params.means[comp] + np.sqrt(params.variances[comp]) * rng.standard_normal((n, params.D))
    g_mu, g_sigma = gmm_score(x, params)
    return np.stack([(g_mu**2).mean(axis=0), (g_sigma**2).mean(axis=0)], axis=-1)


def fisher_kernel(fv_a, fv_b):
    """Linear kernel between two Fisher vectors."""
    return float(np.dot(fv_a.flat(), fv_b.flat()))
