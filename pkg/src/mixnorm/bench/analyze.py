"""Per-channel activation diagnostics: histogram plus single-Gaussian and
mixture fits, written as JSON, CSV and SVG."""

import csv
import json
import math
from pathlib import Path

import numpy as np

from .. import gmm
from ..checkpoint import load_checkpoint
from ..datagen import DatasetSpec, make_dataset
from ..tensor import flatten_batch


class AnalysisError(ValueError):
    pass


def fit_channel(values, k, seed=0, em_iters=50, kmeans_iters=10):
    """Fit a K-component 1-D mixture; K=1 is the closed-form Gaussian."""
    col = np.asarray(values, dtype=float).reshape(-1, 1)
    if k == 1:
        params = gmm.GmmParams(np.ones(1), col.mean(axis=0, keepdims=True),
                               np.maximum(col.var(axis=0, keepdims=True), gmm.VAR_FLOOR))
    else:
        params = gmm.fit_gmm(col, k, em_iters=em_iters, kmeans_iters=kmeans_iters,
                             rng=np.random.default_rng([seed, k]), prune_threshold=0.0)
    ll = gmm.log_likelihood(col, params)
    n_free = 3 * params.K - 1
    return {
        "K": k,
        "effective_K": params.K,
        "lambda": params.weights.tolist(),
        "mu": params.means[:, 0].tolist(),
        "sigma2": params.variances[:, 0].tolist(),
        "log_likelihood": float(ll),
        "bic": float(-2 * ll * col.shape[0] + n_free * math.log(col.shape[0])),
    }


def analyze_distribution(activations, channels, k_list=(2,), bins=50, seed=0, em_iters=50,
                         max_points=20_000):
    """Histogram and fits for the selected columns of an (m, C) array.
    Rows beyond ``max_points`` are subsampled (seeded, shared by all
    channels)."""
    acts = np.asarray(activations, dtype=float)
    if acts.ndim != 2:
        raise AnalysisError(f"activations must be (m, C), got shape {acts.shape}")
    if acts.shape[0] > max_points:
        keep = np.random.default_rng([seed, 0xA7]).choice(acts.shape[0], max_points, replace=False)
        acts = acts[np.sort(keep)]
    channels = list(channels)
    if not channels:
        raise AnalysisError("empty channel selection")
    bad = [c for c in channels if not 0 <= c < acts.shape[1]]
    if bad:
        raise AnalysisError(f"channels {bad} out of range for {acts.shape[1]} channels")
    ks = sorted({1, *(int(k) for k in k_list)})
    if ks[0] < 1:
        raise AnalysisError("K values must be >= 1")
    out = []
    for c in channels:
        col = acts[:, c]
        density, edges = np.histogram(col, bins=bins, density=True)
        out.append({
            "channel": int(c),
            "n": int(col.size),
            "hist_edges": edges.tolist(),
            "hist_density": density.tolist(),
            "fits": [fit_channel(col, k, seed, em_iters) for k in ks],
        })
    return {"k_list": ks, "channels": out}


def fraction_preferring(result, k=2):
    """Fraction of channels where the K-component fit has strictly higher
    mean log-likelihood than the single Gaussian."""
    wins = 0
    for ch in result["channels"]:
        ll = {f["K"]: f["log_likelihood"] for f in ch["fits"]}
        wins += ll[k] > ll[1]
    return wins / len(result["channels"])


def layer_inputs(net, x, layer):
    """Inputs to ``net.layers[layer]`` as an (m, C) array (conv maps are
    flattened over batch and space)."""
    if not 0 <= layer < len(net.layers):
        raise AnalysisError(f"layer {layer} does not exist (net has {len(net.layers)} layers)")
    h = x
    for lyr in net.layers[:layer]:
        h = lyr.forward(h, False)
    if h.ndim == 4:
        return flatten_batch(h)[0]
    return h.reshape(h.shape[0], -1)


def activations_from_checkpoint(path, layer, n_samples=512):
    net, meta = load_checkpoint(path)
    ds = dict(meta.get("dataset") or {})
    if not ds:
        raise AnalysisError(f"{path}: checkpoint carries no dataset description")
    if ds.get("seed") is None:
        ds["seed"] = meta.get("seed", 0)
    data = make_dataset(DatasetSpec(**ds))
    return layer_inputs(net, data.x_train[:n_samples], layer), meta


def write_analysis(result, out_prefix):
    """Write <prefix>.json, <prefix>.csv and <prefix>.svg."""
    from .plots import plot_distributions

    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    with open(prefix.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "K", "component", "lambda", "mu", "sigma2", "log_likelihood", "bic"])
        for ch in result["channels"]:
            for fit in ch["fits"]:
                for j, (lam, mu, var) in enumerate(zip(fit["lambda"], fit["mu"], fit["sigma2"])):
                    w.writerow([ch["channel"], fit["K"], j, repr(lam), repr(mu), repr(var),
                                repr(fit["log_likelihood"]), repr(fit["bic"])])
    plot_distributions(result, prefix.with_suffix(".svg"))
    return prefix
