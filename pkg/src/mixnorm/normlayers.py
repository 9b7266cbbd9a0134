"""Batch normalization and mixture normalization, forward and backward.

Everything here works on flattened activations of shape (m, C). Convolutional
layers flatten (N, C, H, W) with `mixnorm.tensor.flatten_batch` first.

Mixture normalization standardizes every sample against each mixture
component's soft statistics and sums the results with weights
nu_k(x) / sqrt(lambda_k). Gradients treat the posterior matrix ``nu`` as a
constant (K-means++ and EM sit outside the graph) and flow through the
nu_hat-weighted moments.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import gmm
from .gmm import GmmParams

EPS = 1e-5

AFFINE_MODES = ("post", "component")
QUEUE_SCALES = ("weight", "literal")


class NotTrainedError(RuntimeError):
    pass


class BatchTooSmallError(ValueError):
    pass


@dataclass
class AffineParams:
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def identity(cls, channels):
        return cls(np.ones(channels), np.zeros(channels))


@dataclass
class BnState:
    momentum: float = 0.1
    eps: float = EPS
    running_mean: np.ndarray = None
    running_var: np.ndarray = None

    @property
    def trained(self):
        return self.running_mean is not None


@dataclass
class EmConfig:
    em_iters: int = 1
    kmeans_iters: int = None
    subsample_fraction: float = 1.0
    prune_threshold: float = gmm.PRUNE_THRESHOLD
    trials: int = None
    var_floor: float = gmm.VAR_FLOOR


def decay_weights(length, zeta=0.9):
    """Geometric decay over a queue of ``length`` entries, oldest first,
    normalized by the series sum so the weights add to one."""
    if length < 1:
        raise ValueError("queue length must be >= 1")
    t = np.arange(length)
    return (1.0 - zeta) / (1.0 - zeta**length) * zeta ** (length - t - 1)


@dataclass
class MnQueue:
    """FIFO of the last ``capacity`` per-batch mixture fits."""

    capacity: int = 10
    zeta: float = 0.9
    entries: deque = field(default_factory=deque)

    def push(self, params):
        self.entries.append(params)
        while len(self.entries) > self.capacity:
            self.entries.popleft()

    def weights(self):
        return decay_weights(len(self.entries), self.zeta)

    def __len__(self):
        return len(self.entries)


def layer_rng(seed, layer_id, step):
    """Independent, reproducible stream per (global seed, layer, step)."""
    return np.random.default_rng([int(seed), int(layer_id), int(step)])


# -- batch normalization ---------------------------------------------------

@dataclass
class BnCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def bn_forward_train(x, state, affine):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (m, C) activations, got {x.shape}")
    m = x.shape[0]
    if m < 2:
        raise BatchTooSmallError("batch normalization needs at least 2 samples")
    mean = x.mean(axis=0)
    diff = x - mean
    var = (diff * diff).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = diff * inv_std
    y = affine.gamma * xhat + affine.beta

    if not state.trained:
        state.running_mean = np.zeros_like(mean)
        state.running_var = np.ones_like(var)
    mom = state.momentum
    state.running_mean = (1 - mom) * state.running_mean + mom * mean
    state.running_var = (1 - mom) * state.running_var + mom * var
    return y, BnCache(xhat, inv_std, np.array(affine.gamma, dtype=np.float64))


def bn_forward_infer(x, state, affine):
    if not state.trained:
        raise NotTrainedError("batch norm running statistics are not populated")
    xhat = (np.asarray(x, dtype=np.float64) - state.running_mean) / np.sqrt(state.running_var + state.eps)
    return affine.gamma * xhat + affine.beta


def bn_backward(grad_y, cache):
    g = np.asarray(grad_y, dtype=np.float64)
    if g.shape != cache.xhat.shape:
        raise ValueError(f"grad shape {g.shape} does not match cache {cache.xhat.shape}")
    grad_beta = g.sum(axis=0)
    grad_gamma = (g * cache.xhat).sum(axis=0)
    gx = g * cache.gamma
    m = g.shape[0]
    grad_x = cache.inv_std / m * (m * gx - gx.sum(axis=0) - cache.xhat * (gx * cache.xhat).sum(axis=0))
    return grad_x, grad_gamma, grad_beta


# -- mixture normalization -------------------------------------------------

@dataclass
class MnCache:
    nu: np.ndarray          # (m, K), constant for backprop
    nu_hat: np.ndarray      # (m, K)
    lam: np.ndarray         # (K,)
    weight: np.ndarray      # (m, K) = nu / sqrt(lam)
    mean: np.ndarray        # (K, C)
    var: np.ndarray         # (K, C)
    diff: np.ndarray        # (K, m, C) = x - mean
    inv_std: np.ndarray     # (K, C)
    xhat: np.ndarray        # (K, m, C) per-component normalized values
    h: np.ndarray           # (m, C) aggregated value before any post affine
    gamma: np.ndarray
    beta: np.ndarray
    affine_mode: str
    relu: bool
    eps: float
    params: GmmParams = None

    @property
    def effective_k(self):
        return self.nu.shape[1]

    def pre_relu(self):
        """Per-component values the ReLU composition rectifies, (K, m, C)."""
        if self.affine_mode == "post":
            return self.gamma * self.xhat + self.beta
        return self.xhat


def _check_mode(affine_mode):
    if affine_mode not in AFFINE_MODES:
        raise ValueError(f"affine_mode must be one of {AFFINE_MODES}, got {affine_mode!r}")


def mn_forward_fixed(x, nu, affine, eps=EPS, affine_mode="post", relu=False):
    """Mixture normalizing transform for given posteriors ``nu`` (m, K).

    ``affine_mode="post"`` applies gamma/beta to the aggregated output like
    batch norm. ``"component"`` instead shifts each component mean by beta
    and scales each component variance by gamma. With ``relu=True`` the
    rectifier is applied per component before aggregation.
    """
    _check_mode(affine_mode)
    x = np.asarray(x, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if nu.ndim != 2 or nu.shape[0] != x.shape[0]:
        raise ValueError(f"posterior shape {nu.shape} does not match batch {x.shape}")
    mass = nu.sum(axis=0)
    if np.any(mass <= 0):
        nu = nu[:, mass > 0]
        mass = mass[mass > 0]
    gamma = np.asarray(affine.gamma, dtype=np.float64)
    beta = np.asarray(affine.beta, dtype=np.float64)

    nu_hat = nu / mass
    lam = mass / x.shape[0]
    weight = nu / np.sqrt(lam)
    mean = nu_hat.T @ x
    diff = x[None, :, :] - mean[:, None, :]
    var = np.einsum("mk,kmc->kc", nu_hat, diff * diff)
    if affine_mode == "post":
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = diff * inv_std[:, None, :]
    else:
        inv_std = 1.0 / np.sqrt(gamma * var + eps)
        xhat = (diff - beta) * inv_std[:, None, :]

    cache = MnCache(nu, nu_hat, lam, weight, mean, var, diff, inv_std, xhat, None,
                    gamma, beta, affine_mode, relu, eps)
    if relu:
        z = cache.pre_relu()
        y = np.einsum("mk,kmc->mc", weight, np.maximum(z, 0.0))
        cache.h = y
        return y, cache
    h = np.einsum("mk,kmc->mc", weight, xhat)
    cache.h = h
    y = gamma * h + beta if affine_mode == "post" else h
    return y, cache


def mn_forward_train(x, k, em_config, affine, queue=None, rng=None, eps=EPS,
                     affine_mode="post", relu=False):
    """Fit a K-component GMM to the batch, then normalize against it.

    The statistics actually used for normalization are pushed onto
    ``queue`` for inference.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < k:
        raise gmm.InsufficientSamplesError(f"need at least K={k} samples, got {x.shape[0]}")
    cfg = em_config or EmConfig()
    params = gmm.fit_gmm(
        x, k,
        em_iters=cfg.em_iters,
        kmeans_iters=cfg.kmeans_iters,
        rng=rng,
        subsample_fraction=cfg.subsample_fraction,
        trials=cfg.trials,
        prune_threshold=cfg.prune_threshold,
        var_floor=cfg.var_floor,
    )
    nu = gmm.e_step(x, params).nu
    y, cache = mn_forward_fixed(x, nu, affine, eps, affine_mode, relu)
    cache.params = params
    if queue is not None:
        queue.push(GmmParams(cache.lam, cache.mean, np.maximum(cache.var, cfg.var_floor)))
    return y, cache


def mn_backward(grad_y, cache):
    """Gradients of `mn_forward_fixed` with ``nu`` held constant."""
    g = np.asarray(grad_y, dtype=np.float64)
    if g.shape != cache.h.shape:
        raise ValueError(f"grad shape {g.shape} does not match cache {cache.h.shape}")
    w = cache.weight.T[:, :, None]          # (K, m, 1)
    post = cache.affine_mode == "post"

    if cache.relu:
        gz = w * g[None] * (cache.pre_relu() > 0)
        if post:
            grad_beta = gz.sum(axis=(0, 1))
            grad_gamma = (gz * cache.xhat).sum(axis=(0, 1))
            G = gz * cache.gamma
        else:
            G = gz
    elif post:
        grad_beta = g.sum(axis=0)
        grad_gamma = (g * cache.h).sum(axis=0)
        G = w * (g * cache.gamma)[None]
    else:
        G = w * g[None]

    nu_hat = cache.nu_hat.T[:, :, None]     # (K, m, 1)
    r = cache.inv_std[:, None, :]
    s1 = G.sum(axis=1, keepdims=True)
    if post:
        s2 = (G * cache.xhat).sum(axis=1, keepdims=True)
        grad_x = (r * (G - nu_hat * (s1 + cache.xhat * s2))).sum(axis=0)
        return grad_x, grad_gamma, grad_beta

    # per-component affine: xhat = (d - beta) / sqrt(gamma * var + eps)
    v = cache.diff - cache.beta
    gv = (G * v).sum(axis=1, keepdims=True)
    r3 = r**3
    grad_x = (r * (G - nu_hat * s1) - r3 * cache.gamma * nu_hat * cache.diff * gv).sum(axis=0)
    grad_beta = -(r * s1).sum(axis=(0, 1))
    grad_gamma = (-0.5 * r3 * cache.var[:, None, :] * gv).sum(axis=(0, 1))
    return grad_x, grad_gamma, grad_beta


def mn_relu(cache):
    """Exact per-component rectified output and the ReLU-after-aggregation
    approximation, both (m, C)."""
    if cache is None:
        raise ValueError("mn_relu needs the cache of a mixture-norm forward pass")
    z = cache.pre_relu()
    exact = np.einsum("mk,kmc->mc", cache.weight, np.maximum(z, 0.0))
    approx = np.maximum(np.einsum("mk,kmc->mc", cache.weight, z), 0.0)
    return exact, approx


def relu_approx_gap(cache):
    exact, approx = mn_relu(cache)
    return float(np.max(np.abs(exact - approx)))


def mixture_normalize(x, params, affine=None, eps=EPS, affine_mode="post", relu=False):
    """Normalize against a stored mixture: posteriors come from ``params``
    and each component uses its own mean and variance."""
    return mn_forward_infer(x, MnQueue(capacity=1, entries=deque([params])), affine,
                            eps=eps, affine_mode=affine_mode, relu=relu)


def mn_forward_infer(x, queue, affine=None, eps=EPS, affine_mode="post", relu=False,
                     scale="weight"):
    """Normalize with every (entry, component) pair of the parameter queue.

    Posteriors run over the double sum with priors tau_t * lambda_tk. Each
    term is scaled by 1/sqrt(lambda_tk) (``scale="weight"``) or by
    1/sqrt(tau_t * lambda_tk) (``scale="literal"``). Only the first keeps a
    queue of identical entries equivalent to a single entry.
    """
    _check_mode(affine_mode)
    if scale not in QUEUE_SCALES:
        raise ValueError(f"scale must be one of {QUEUE_SCALES}, got {scale!r}")
    if queue is None or len(queue) == 0:
        raise NotTrainedError("mixture norm queue is empty")
    x = np.asarray(x, dtype=np.float64)
    entries = list(queue.entries)
    tau = decay_weights(len(entries), queue.zeta)
    weights = np.concatenate([t * p.weights for t, p in zip(tau, entries)])
    means = np.concatenate([p.means for p in entries])
    variances = np.concatenate([p.variances for p in entries])
    if means.shape[1] != x.shape[1]:
        raise ValueError(f"queue dimension {means.shape[1]} does not match input {x.shape[1]}")
    pooled = GmmParams(weights, means, variances)
    post = np.exp(gmm.e_step(x, pooled).log_nu)

    lam = np.concatenate([p.weights for p in entries]) if scale == "weight" else weights
    w = post / np.sqrt(lam)
    c = x.shape[1]
    gamma = np.ones(c) if affine is None else np.asarray(affine.gamma, dtype=np.float64)
    beta = np.zeros(c) if affine is None else np.asarray(affine.beta, dtype=np.float64)

    diff = x[None, :, :] - means[:, None, :]
    if affine_mode == "post":
        z = diff / np.sqrt(variances + eps)[:, None, :]
    else:
        z = (diff - beta) / np.sqrt(gamma * variances + eps)[:, None, :]
    if relu:
        if affine_mode == "post":
            z = gamma * z + beta
        return np.einsum("mk,kmc->mc", w, np.maximum(z, 0.0))
    h = np.einsum("mk,kmc->mc", w, z)
    return gamma * h + beta if affine_mode == "post" else h


def component_moments_check(cache):
    """nu_hat-weighted first and second moments of each component's
    normalized values, each (K, C)."""
    first = np.einsum("mk,kmc->kc", cache.nu_hat, cache.xhat)
    second = np.einsum("mk,kmc->kc", cache.nu_hat, cache.xhat**2)
    return first, second


def sqrt_tau_inflation(length, zeta=0.9):
    """Output scale factor the literal queue weighting gives a queue of
    identical entries relative to a single entry."""
    return float(np.sum(np.sqrt(decay_weights(length, zeta))))

