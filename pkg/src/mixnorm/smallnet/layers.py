"""Layers with hand-written backward passes.

Every layer keeps what its backward pass needs from the last train-mode
forward call. Parameters live in ``layer.params`` and gradients in
``layer.grads`` under the same keys.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import gmm
from ..normlayers import (
    EPS,
    AffineParams,
    BnState,
    EmConfig,
    MnQueue,
    bn_backward,
    bn_forward_infer,
    bn_forward_train,
    layer_rng,
    mn_backward,
    mn_forward_fixed,
    mn_forward_infer,
    mn_forward_train,
)
from ..tensor import flatten_batch, unflatten_batch


class LayerShapeError(ValueError):
    pass


class Layer:
    kind = "layer"
    decay_keys = ()

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Dense(Layer):
    kind = "dense"
    decay_keys = ("W",)

    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self.params["W"] = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        self.params["b"] = np.zeros(n_out)
        self.zero_grad()

    def forward(self, x, train=True):
        self.in_shape = x.shape
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.params["W"].shape[0]:
            raise LayerShapeError(f"dense expects {self.params['W'].shape[0]} inputs, got {x2.shape[1]}")
        self.x = x2
        return x2 @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        self.grads["W"] = self.x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return (grad @ self.params["W"].T).reshape(self.in_shape)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=True):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return grad * self.mask


def _out_size(size, kernel, stride, pad):
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise LayerShapeError(f"kernel {kernel} with stride {stride}, pad {pad} does not fit extent {size}")
    return out


def _windows(x, kernel, stride):
    """(N, C, Ho, Wo, k, k) strided view of all pooling/conv windows."""
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


class Conv2D(Layer):
    kind = "conv"
    decay_keys = ("W",)

    def __init__(self, c_in, c_out, kernel, stride=1, pad=0, rng=None, strategy="im2col"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * kernel * kernel
        self.params["W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel))
        self.params["b"] = np.zeros(c_out)
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.strategy = strategy
        self.zero_grad()

    def _pad(self, x):
        p = self.pad
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.params["W"].shape[1]:
            raise LayerShapeError(f"conv expects (N, {self.params['W'].shape[1]}, H, W), got {x.shape}")
        if self.strategy == "loop":
            return self._forward_loop(x)
        n, c, h, w = x.shape
        k, s = self.kernel, self.stride
        ho, wo = _out_size(h, k, s, self.pad), _out_size(w, k, s, self.pad)
        xp = self._pad(x)
        cols = _windows(xp, k, s)[:, :, :ho, :wo].transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        self.cache = (x.shape, xp.shape, cols, ho, wo)
        wmat = self.params["W"].reshape(self.params["W"].shape[0], -1)
        out = cols @ wmat.T + self.params["b"]
        return np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))

    def _forward_loop(self, x):
        n, c, h, w = x.shape
        k, s = self.kernel, self.stride
        ho, wo = _out_size(h, k, s, self.pad), _out_size(w, k, s, self.pad)
        xp = self._pad(x)
        W, b = self.params["W"], self.params["b"]
        out = np.zeros((n, W.shape[0], ho, wo))
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, :, i * s:i * s + k, j * s:j * s + k]
                out[:, :, i, j] = np.tensordot(patch, W, axes=([1, 2, 3], [1, 2, 3])) + b
        self.loop_cache = (x.shape, xp)
        return out

    def backward(self, grad):
        if self.strategy == "loop":
            return self._backward_loop(grad)
        in_shape, pad_shape, cols, ho, wo = self.cache
        n, c, _, _ = in_shape
        k, s, p = self.kernel, self.stride, self.pad
        W = self.params["W"]
        g = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
        self.grads["W"] = (g.T @ cols).reshape(W.shape)
        self.grads["b"] = g.sum(axis=0)
        dcols = (g @ W.reshape(W.shape[0], -1)).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros(pad_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp

    def _backward_loop(self, grad):
        in_shape, xp = self.loop_cache
        k, s, p = self.kernel, self.stride, self.pad
        W = self.params["W"]
        dW = np.zeros_like(W)
        dxp = np.zeros_like(xp)
        _, _, ho, wo = grad.shape
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, :, i * s:i * s + k, j * s:j * s + k]
                g = grad[:, :, i, j]
                dW += np.tensordot(g, patch, axes=([0], [0]))
                dxp[:, :, i * s:i * s + k, j * s:j * s + k] += np.tensordot(g, W, axes=([1], [0]))
        self.grads["W"] = dW
        self.grads["b"] = grad.sum(axis=(0, 2, 3))
        return dxp[:, :, p:-p, p:-p] if p else dxp


class MaxPool2D(Layer):
    kind = "maxpool"

    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel = kernel
        self.stride = stride or kernel

    def forward(self, x, train=True):
        k, s = self.kernel, self.stride
        n, c, h, w = x.shape
        ho, wo = _out_size(h, k, s, 0), _out_size(w, k, s, 0)
        win = _windows(x, k, s)[:, :, :ho, :wo].reshape(n, c, ho, wo, k * k)
        self.arg = win.argmax(axis=-1)
        self.in_shape = x.shape
        return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        k, s = self.kernel, self.stride
        dx = np.zeros(self.in_shape)
        _, _, ho, wo = grad.shape
        for i in range(k):
            for j in range(k):
                hit = self.arg == i * k + j
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += grad * hit
        return dx


class AvgPool2D(Layer):
    kind = "avgpool"

    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel = kernel
        self.stride = stride or kernel

    def forward(self, x, train=True):
        k, s = self.kernel, self.stride
        n, c, h, w = x.shape
        ho, wo = _out_size(h, k, s, 0), _out_size(w, k, s, 0)
        self.in_shape = x.shape
        return _windows(x, k, s)[:, :, :ho, :wo].mean(axis=(-2, -1))

    def backward(self, grad):
        k, s = self.kernel, self.stride
        dx = np.zeros(self.in_shape)
        _, _, ho, wo = grad.shape
        share = grad / (k * k)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += share
        return dx


class _NormBase(Layer):
    """Flattens (N, C, H, W) to (N*H*W, C) around a 2-D normalization."""

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.zero_grad()

    @property
    def affine(self):
        return AffineParams(self.params["gamma"], self.params["beta"])

    def _flat(self, x):
        if x.ndim == 4:
            flat, shape = flatten_batch(x)
            return flat, shape
        if x.ndim == 2:
            return x, None
        raise LayerShapeError(f"normalization expects 2-D or 4-D input, got {x.shape}")

    def _unflat(self, y, shape):
        return y if shape is None else unflatten_batch(y, shape)

    def forward(self, x, train=True):
        flat, shape = self._flat(x)
        if flat.shape[1] != self.channels:
            raise LayerShapeError(f"{self.kind} expects {self.channels} channels, got {flat.shape[1]}")
        self.shape = shape
        y = self._forward2d(flat) if train else self._infer2d(flat)
        return self._unflat(y, shape)

    def backward(self, grad):
        flat, _ = self._flat(grad)
        gx, gg, gb = self._backward2d(flat)
        self.grads["gamma"], self.grads["beta"] = gg, gb
        return self._unflat(gx, self.shape)


class BatchNorm(_NormBase):
    kind = "bn"

    def __init__(self, channels, momentum=0.1, eps=EPS):
        super().__init__(channels)
        self.state = BnState(momentum=momentum, eps=eps)

    def _forward2d(self, x):
        y, self.cache = bn_forward_train(x, self.state, self.affine)
        return y

    def _infer2d(self, x):
        return bn_forward_infer(x, self.state, self.affine)

    def _backward2d(self, g):
        return bn_backward(g, self.cache)


class MixtureNorm(_NormBase):
    """Mixture normalization; ``relu=True`` gives the fused per-component
    rectifier (kind ``mn_relu``)."""

    def __init__(self, channels, k=3, em_config=None, capacity=10, zeta=0.9, eps=EPS,
                 affine_mode="post", relu=False, seed=0, layer_id=0, queue_scale="weight"):
        super().__init__(channels)
        self.k = k
        self.em_config = em_config or EmConfig()
        self.queue = MnQueue(capacity=capacity, zeta=zeta)
        self.eps = eps
        self.affine_mode = affine_mode
        self.relu = relu
        self.seed = seed
        self.layer_id = layer_id
        self.queue_scale = queue_scale
        self.step = 0
        self.frozen_nu = None
        self.effective_k = None

    @property
    def kind(self):
        return "mn_relu" if self.relu else "mn"

    def freeze(self):
        """Reuse the last posteriors in train-mode forward calls and stop
        pushing to the queue. Used by finite-difference checks."""
        self.frozen_nu = self.cache.nu

    def unfreeze(self):
        self.frozen_nu = None

    def _forward2d(self, x):
        if self.frozen_nu is not None:
            y, self.cache = mn_forward_fixed(x, self.frozen_nu, self.affine, self.eps, self.affine_mode, self.relu)
            return y
        if x.shape[0] < self.k:
            raise gmm.InsufficientSamplesError(f"{x.shape[0]} samples for K={self.k}")
        rng = layer_rng(self.seed, self.layer_id, self.step)
        self.step += 1
        y, self.cache = mn_forward_train(x, self.k, self.em_config, self.affine, self.queue, rng,
                                         self.eps, self.affine_mode, self.relu)
        self.effective_k = self.cache.effective_k
        return y

    def _infer2d(self, x):
        return mn_forward_infer(x, self.queue, self.affine, self.eps, self.affine_mode, self.relu,
                                self.queue_scale)

    def _backward2d(self, g):
        return mn_backward(g, self.cache)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(log_p[np.arange(n), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
