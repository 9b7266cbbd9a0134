"""Diagonal-covariance Gaussian mixtures fitted with K-means++ and EM.

The fitting pipeline used by mixture normalization is

    subsample -> K-means++ seeding (best of several trials)
              -> Lloyd iterations -> one-hot GMM initialization
              -> EM iterations (E-step, prune, M-step)

All densities are evaluated in log space.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

VAR_FLOOR = 1e-6
PRUNE_THRESHOLD = 0.01

_LOG_2PI = math.log(2.0 * math.pi)


class InsufficientSamplesError(ValueError):
    pass


@dataclass
class GmmParams:
    """Mixture weights (K,), means (K, D) and diagonal variances (K, D)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.variances.shape != self.means.shape:
            raise ValueError(
                f"inconsistent GMM shapes: weights {self.weights.shape}, "
                f"means {self.means.shape}, variances {self.variances.shape}"
            )

    @property
    def K(self):
        return self.weights.shape[0]

    @property
    def D(self):
        return self.means.shape[1]

    def to_dict(self):
        return {
            "K": self.K,
            "D": self.D,
            "lambda": self.weights.tolist(),
            "mu": self.means.tolist(),
            "sigma2": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        params = cls(d["lambda"], d["mu"], d["sigma2"])
        if params.K != d["K"] or params.D != d["D"]:
            raise ValueError("GMM dict K/D disagree with array shapes")
        return params


@dataclass
class Responsibilities:
    """Posteriors ``nu`` (m, K) and their column-normalized form ``nu_hat``."""

    log_nu: np.ndarray
    nu: np.ndarray = field(init=False)
    nu_hat: np.ndarray = field(init=False)

    def __post_init__(self):
        self.nu = np.exp(self.log_nu)
        self.nu_hat = column_normalize(self.nu)


def column_normalize(nu):
    mass = nu.sum(axis=0)
    safe = np.where(mass > 0, mass, 1.0)
    return np.where(mass > 0, nu / safe, 0.0)


def component_log_density(samples, params):
    """log p_k(x_i) for every sample and component, shape (m, K)."""
    x = np.asarray(samples, dtype=np.float64)
    var = params.variances
    # (m, K, D) is fine for the batch sizes normalization layers see
    diff = x[:, None, :] - params.means[None, :, :]
    maha = np.sum(diff * diff / var[None, :, :], axis=2)
    log_det = np.sum(np.log(var), axis=1)
    return -0.5 * (params.D * _LOG_2PI + log_det[None, :] + maha)


def _weighted_log_density(samples, params):
    with np.errstate(divide="ignore"):
        log_w = np.log(params.weights)
    return component_log_density(samples, params) + log_w[None, :]


def e_step(samples, params):
    joint = _weighted_log_density(samples, params)
    log_norm = logsumexp(joint, axis=1, keepdims=True)
    return Responsibilities(joint - log_norm)


def log_likelihood(samples, params):
    """Mean per-sample log density of the mixture."""
    joint = _weighted_log_density(samples, params)
    return float(np.mean(logsumexp(joint, axis=1)))


def m_step(samples, resp, var_floor=VAR_FLOOR):
    x = np.asarray(samples, dtype=np.float64)
    nu = resp.nu
    mass = nu.sum(axis=0)
    if np.any(mass <= 0):
        raise ValueError("component with zero responsibility mass; prune before m_step")
    nu_hat = resp.nu_hat
    weights = mass / x.shape[0]
    weights = weights / weights.sum()
    means = nu_hat.T @ x
    diff = x[None, :, :] - means[:, None, :]
    variances = np.einsum("mk,kmd->kd", nu_hat, diff * diff)
    return GmmParams(weights, means, np.maximum(variances, var_floor))


def _keep_mask(weights, threshold):
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"prune threshold must lie in [0, 1), got {threshold}")
    keep = weights >= threshold
    if not keep.any():
        keep[np.argmax(weights)] = True
    return keep


def _take(params, keep):
    w = params.weights[keep]
    return GmmParams(w / w.sum(), params.means[keep], params.variances[keep])


def prune_weights(params, threshold=PRUNE_THRESHOLD):
    keep = _keep_mask(params.weights, threshold)
    return params if keep.all() else _take(params, keep)


def prune_components(params, resp, threshold=PRUNE_THRESHOLD):
    """Drop components whose weight falls below ``threshold``.

    Posterior mass of dropped components is redistributed by renormalizing
    each row of ``nu`` over the survivors. If every component is below the
    threshold the heaviest one is kept. Returns (params, resp).
    """
    keep = _keep_mask(params.weights, threshold)
    if keep.all():
        return params, resp
    pruned = _take(params, keep)
    log_nu = resp.log_nu[:, keep]
    log_nu = log_nu - logsumexp(log_nu, axis=1, keepdims=True)
    return pruned, Responsibilities(log_nu)


def sq_distances(samples, centers):
    diff = samples[:, None, :] - centers[None, :, :]
    return np.sum(diff * diff, axis=2)


def wcss(samples, centers):
    """Within-cluster sum of squares under nearest-center assignment."""
    return float(np.sum(sq_distances(samples, centers).min(axis=1)))


def default_trials(k):
    return math.ceil(2.0 + math.log(k))


def _seed_once(x, k, rng):
    m = x.shape[0]
    idx = [int(rng.integers(m))]
    closest = np.sum((x - x[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            j = int(rng.choice(m, p=closest / total))
        else:
            j = int(rng.integers(m))
        idx.append(j)
        closest = np.minimum(closest, np.sum((x - x[j]) ** 2, axis=1))
    return x[idx].copy(), float(closest.sum())


def kmeanspp_seed(samples, k, rng, trials=None):
    """D^2-weighted K-means++ seeding, best of ``trials`` runs by WCSS."""
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < k:
        raise InsufficientSamplesError(f"need at least K={k} samples, got {x.shape[0]}")
    if trials is None:
        trials = default_trials(k)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    best, best_cost = None, np.inf
    for _ in range(trials):
        centers, cost = _seed_once(x, k, rng)
        if cost < best_cost:
            best, best_cost = centers, cost
    return best


def kmeans_iterate(samples, centers, iters):
    """Lloyd updates. An empty cluster is moved to the sample farthest from
    its currently assigned center."""
    x = np.asarray(samples, dtype=np.float64)
    centers = np.array(centers, dtype=np.float64, copy=True)
    if iters < 0:
        raise ValueError("iters must be >= 0")
    k = centers.shape[0]
    for _ in range(iters):
        d2 = sq_distances(x, centers)
        labels = d2.argmin(axis=1)
        own = d2[np.arange(x.shape[0]), labels]
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j] > 0:
                centers[j] = x[labels == j].mean(axis=0)
            else:
                far = int(np.argmax(own))
                centers[j] = x[far]
                own[far] = 0.0
    return centers


def init_from_centers(samples, centers, var_floor=VAR_FLOOR):
    """One-hot GMM initialization from a hard nearest-center assignment.

    Clusters that receive no samples are dropped.
    """
    x = np.asarray(samples, dtype=np.float64)
    labels = sq_distances(x, centers).argmin(axis=1)
    weights, means, variances = [], [], []
    for j in range(centers.shape[0]):
        members = x[labels == j]
        if members.shape[0] == 0:
            continue
        mu = members.mean(axis=0)
        weights.append(members.shape[0] / x.shape[0])
        means.append(mu)
        variances.append(np.maximum(((members - mu) ** 2).mean(axis=0), var_floor))
    return GmmParams(np.array(weights), np.array(means), np.array(variances))


def em_step(samples, params, prune_threshold=PRUNE_THRESHOLD, var_floor=VAR_FLOOR):
    """One E-step, pruning pass and M-step."""
    resp = e_step(samples, params)
    params, resp = prune_components(params, resp, prune_threshold)
    return m_step(samples, resp, var_floor)


def subsample(samples, fraction, rng):
    x = np.asarray(samples, dtype=np.float64)
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"subsample fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return x
    n = max(1, math.ceil(fraction * x.shape[0]))
    idx = np.sort(rng.choice(x.shape[0], size=n, replace=False))
    return x[idx]


def fit_gmm(
    samples,
    k,
    em_iters=1,
    kmeans_iters=None,
    rng=None,
    subsample_fraction=1.0,
    trials=None,
    prune_threshold=PRUNE_THRESHOLD,
    var_floor=VAR_FLOOR,
    trace=None,
):
    """Fit a K-component diagonal GMM.

    ``kmeans_iters`` defaults to ``em_iters``; the pair's sum is what tables
    usually report as the EM iteration count. If ``trace`` is a list, the
    mean log-likelihood after initialization and after every EM iteration
    is appended to it.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    if kmeans_iters is None:
        kmeans_iters = em_iters
    x = subsample(samples, subsample_fraction, rng)
    if x.shape[0] < k:
        raise InsufficientSamplesError(
            f"need at least K={k} samples after subsampling, got {x.shape[0]}"
        )
    centers = kmeanspp_seed(x, k, rng, trials)
    centers = kmeans_iterate(x, centers, kmeans_iters)
    params = init_from_centers(x, centers, var_floor)
    if trace is not None:
        trace.append(log_likelihood(x, params))
    for _ in range(em_iters):
        params = em_step(x, params, prune_threshold, var_floor)
        if trace is not None:
            trace.append(log_likelihood(x, params))
    # final weights can still sit under the threshold after the last M-step
    return prune_weights(params, prune_threshold)


def split_em_budget(total):
    """Split a reported "EM iter." total evenly into (kmeans_iters, em_iters)."""
    if total < 0 or total % 2:
        raise ValueError(f"EM iteration total must be a non-negative even number, got {total}")
    return total // 2, total // 2
