"""Shape bookkeeping for activation tensors.

Activations are plain float64 numpy arrays. A convolutional activation of
shape (N, C, H, W) is flattened to m = N*H*W rows of C-dimensional vectors,
batch-major then row-major over (H, W). That ordering is fixed so EM fits
are reproducible given a seed.
"""

import numpy as np

DTYPE = np.float64

METHODS = ("BN", "LN", "IN", "GN")


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def as_tensor(x):
    return np.ascontiguousarray(x, dtype=DTYPE)


def flatten_batch(x):
    """Flatten (N, C, H, W) into (N*H*W, C).

    Returns the flat array and the original shape, which `unflatten_batch`
    needs to invert the mapping.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"flatten_batch expects a 4-D tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    flat = x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    return np.ascontiguousarray(flat), x.shape


def unflatten_batch(flat, shape):
    n, c, h, w = shape
    flat = np.asarray(flat)
    if flat.shape != (n * h * w, c):
        raise ShapeError(f"cannot unflatten {flat.shape} into {tuple(shape)}")
    return np.ascontiguousarray(flat.reshape(n, h, w, c).transpose(0, 3, 1, 2))


def _check_groups(c, groups):
    if groups is None or groups < 1 or c % groups != 0:
        raise ConfigError(f"GN needs a group count dividing C={c}, got {groups}")


def select_set(shape, method, index, groups=None):
    """Index set over which a normalization method pools statistics.

    ``shape`` is (N, C, L) with the spatial axes already merged, ``index``
    is the site (n, c, l). Returns a sorted array of flat indices into the
    C-order raveled (N, C, L) tensor.
    """
    n_, c_, l_ = shape
    i_n, i_c, _ = index
    method = method.upper()
    if method == "BN":
        ns, cs = np.arange(n_), np.array([i_c])
    elif method == "LN":
        ns, cs = np.array([i_n]), np.arange(c_)
    elif method == "IN":
        ns, cs = np.array([i_n]), np.array([i_c])
    elif method == "GN":
        _check_groups(c_, groups)
        size = c_ // groups
        g = i_c // size
        ns, cs = np.array([i_n]), np.arange(g * size, (g + 1) * size)
    else:
        raise ConfigError(f"unknown normalization method {method!r}")
    nn, cc, ll = np.meshgrid(ns, cs, np.arange(l_), indexing="ij")
    return np.sort(np.ravel_multi_index((nn.ravel(), cc.ravel(), ll.ravel()), shape))


def _reduce_axes(x, method, groups):
    """Reshape x (N, C, L) so one set of axes holds exactly each B_i."""
    n_, c_, l_ = x.shape
    if method == "BN":
        return x, (0, 2)
    if method == "LN":
        return x, (1, 2)
    if method == "IN":
        return x, (2,)
    _check_groups(c_, groups)
    return x.reshape(n_, groups, c_ // groups, l_), (2, 3)


def general_normalize(x, method="BN", groups=None, eps=1e-5):
    """Subtract the set mean and divide by sqrt(set second moment + eps).

    ``x`` has shape (N, C, L). Works for BN, LN, IN and GN(groups).
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"general_normalize expects (N, C, L), got {x.shape}")
    method = method.upper()
    if method not in METHODS:
        raise ConfigError(f"unknown normalization method {method!r}")
    xr, axes = _reduce_axes(x, method, groups)
    mean = xr.mean(axis=axes, keepdims=True)
    v = xr - mean
    var = (v * v).mean(axis=axes, keepdims=True)
    return (v / np.sqrt(var + eps)).reshape(x.shape)
