"""Sequential networks assembled from layer specs.

A layer spec is a plain dict with a ``kind`` key plus kind-specific fields:

    {"kind": "conv", "out": 16, "kernel": 3, "stride": 1, "pad": 1}
    {"kind": "dense", "units": 10}
    {"kind": "relu"}
    {"kind": "maxpool", "kernel": 3, "stride": 2}
    {"kind": "avgpool", "kernel": 4, "stride": 1}
    {"kind": "bn", "momentum": 0.1}
    {"kind": "mn", "K": 3, "em_iters": 2, "T": 10, "zeta": 0.9}
    {"kind": "mn_relu", ...}          # mixture norm with per-component ReLU

For mixture layers ``em_iters`` is the reported total (K-means plus EM
iterations) and is split evenly between the two phases.
"""

import numpy as np

from .. import gmm
from ..normlayers import EmConfig
from .layers import (
    AvgPool2D,
    BatchNorm,
    Conv2D,
    Dense,
    LayerShapeError,
    MaxPool2D,
    MixtureNorm,
    ReLU,
    _out_size,
)

KINDS = ("conv", "dense", "relu", "maxpool", "avgpool", "bn", "mn", "mn_relu")


def em_config_from_spec(spec):
    kmeans_iters, em_iters = gmm.split_em_budget(int(spec.get("em_iters", 2)))
    return EmConfig(
        em_iters=em_iters,
        kmeans_iters=kmeans_iters,
        subsample_fraction=float(spec.get("subsample", 1.0)),
        prune_threshold=float(spec.get("prune", gmm.PRUNE_THRESHOLD)),
        trials=spec.get("trials"),
    )


def build_layer(spec, in_shape, rng, seed=0, layer_id=0):
    """Instantiate one layer; returns (layer, output shape without batch)."""
    kind = spec["kind"]
    if kind == "dense":
        n_in = int(np.prod(in_shape))
        return Dense(n_in, int(spec["units"]), rng), (int(spec["units"]),)
    if kind == "relu":
        return ReLU(), in_shape
    if kind == "conv":
        if len(in_shape) != 3:
            raise LayerShapeError(f"conv needs (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        k, s, p = int(spec["kernel"]), int(spec.get("stride", 1)), int(spec.get("pad", 0))
        out = (int(spec["out"]), _out_size(h, k, s, p), _out_size(w, k, s, p))
        return Conv2D(c, out[0], k, s, p, rng, spec.get("strategy", "im2col")), out
    if kind in ("maxpool", "avgpool"):
        if len(in_shape) != 3:
            raise LayerShapeError(f"{kind} needs (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        k = int(spec["kernel"])
        s = int(spec.get("stride", k))
        cls = MaxPool2D if kind == "maxpool" else AvgPool2D
        return cls(k, s), (c, _out_size(h, k, s, 0), _out_size(w, k, s, 0))
    channels = in_shape[0]
    if kind == "bn":
        return BatchNorm(channels, float(spec.get("momentum", 0.1)), float(spec.get("eps", 1e-5))), in_shape
    if kind in ("mn", "mn_relu"):
        layer = MixtureNorm(
            channels,
            k=int(spec.get("K", 3)),
            em_config=em_config_from_spec(spec),
            capacity=int(spec.get("T", 10)),
            zeta=float(spec.get("zeta", 0.9)),
            eps=float(spec.get("eps", 1e-5)),
            affine_mode=spec.get("affine", "post"),
            relu=kind == "mn_relu",
            seed=seed,
            layer_id=layer_id,
            queue_scale=spec.get("queue_scale", "weight"),
        )
        return layer, in_shape
    raise ValueError(f"unknown layer kind {kind!r}")


class Net:
    def __init__(self, layers, specs=None, input_shape=None):
        self.layers = layers
        self.specs = specs
        self.input_shape = input_shape

    def forward(self, x, mode="train"):
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        train = mode == "train"
        if self.input_shape is not None and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise LayerShapeError(f"layer 0: expected input {self.input_shape}, got {x.shape[1:]}")
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, train)
            except LayerShapeError as err:
                raise LayerShapeError(f"layer {i} ({layer.kind}): {err}") from None
        return x

    def backward(self, grad_logits):
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def parameters(self):
        """Yield (layer index, name, value, grad, decays) for every parameter."""
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield i, name, value, layer.grads[name], name in layer.decay_keys

    def mixture_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, MixtureNorm)]

    def effective_k(self):
        return [l.effective_k for _, l in self.mixture_layers()]


def build_net(specs, input_shape, seed=0):
    """Build a network; weights are drawn from a generator seeded by ``seed``
    and every mixture layer gets its own stream derived from it."""
    rng = np.random.default_rng([int(seed), 0xC0FFEE])
    layers = []
    shape = tuple(input_shape)
    for i, spec in enumerate(specs):
        if spec.get("kind") not in KINDS:
            raise ValueError(f"layer {i}: unknown kind {spec.get('kind')!r}")
        layer, shape = build_layer(spec, shape, rng, seed=seed, layer_id=i)
        layers.append(layer)
    return Net(layers, [dict(s) for s in specs], tuple(input_shape))
