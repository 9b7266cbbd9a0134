"""Data sources: synthetic generators and small image-file readers.

``rectified_gmm_features`` builds features as random linear combinations of
rectified Gaussian draws, so every feature's marginal carries a lump near
the all-off pattern plus positive modes. That is the kind of input a
normalization layer sees after a ReLU layer.
"""

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ConfigError

KINDS = ("rectified_gmm_features", "blobs", "spirals", "image_idx", "image_csv")

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IngestionError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str
    n_train: int = 1000
    n_test: int = 200
    shape: tuple = (2,)
    classes: int = 2
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.shape, int):
            self.shape = (self.shape,)
        self.shape = tuple(int(s) for s in self.shape)
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind not in ("image_idx", "image_csv"):
            if self.classes < 1 or self.n_train < self.classes or self.n_test < 0:
                raise ConfigError("need at least one training sample per class")
            if any(s < 1 for s in self.shape):
                raise ConfigError(f"invalid sample shape {self.shape}")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int
    augment: object = None

    @property
    def sample_shape(self):
        return tuple(self.x_train.shape[1:])


def _balanced_labels(n, classes, rng):
    y = np.arange(n) % classes
    return rng.permutation(y)


def rectified_gaussian(n, mean, std, rng):
    """ReLU of N(mean, std^2) draws."""
    return np.maximum(rng.normal(mean, std, size=n), 0.0)


def standardize(train, test):
    """Per-feature (or per-channel for images) standardization with train
    statistics."""
    axes = (0,) if train.ndim == 2 else (0,) + tuple(range(2, train.ndim))
    mean = train.mean(axis=axes, keepdims=True)
    std = train.std(axis=axes, keepdims=True)
    std = np.where(std > 0, std, 1.0)
    return (train - mean) / std, (test - mean) / std


def gen_rectified_gmm(spec):
    """Labeled features x = ReLU(z) @ A + noise with class-dependent latent
    means.

    params: latent_dim (default 2 * dim), pre_mean (-0.5), pre_std (1.0),
    class_sep (1.0), noise (0.05), mixing ("random" or "identity"),
    standardize (True).

    ``modes`` > 1 adds label-independent modes of variation: each sample
    draws one of ``modes`` offsets (scale ``mode_shift``) that shift all of
    its features. The class signal then lives within modes, not across them.
    """
    p = spec.params
    rng = np.random.default_rng([int(spec.seed), 0xDA7A])
    dim = int(np.prod(spec.shape))
    mixing = p.get("mixing", "random")
    latent = dim if mixing == "identity" else int(p.get("latent_dim", 2 * dim))
    pre_mean = float(p.get("pre_mean", -0.5))
    pre_std = float(p.get("pre_std", 1.0))
    sep = float(p.get("class_sep", 1.0))
    noise = float(p.get("noise", 0.05))
    modes = int(p.get("modes", 1))
    shift = float(p.get("mode_shift", 0.0))
    if pre_std <= 0 or sep < 0 or noise < 0 or latent < 1:
        raise ConfigError("rectified_gmm_features needs pre_std > 0, class_sep >= 0, noise >= 0")
    if modes < 1 or shift < 0:
        raise ConfigError("rectified_gmm_features needs modes >= 1 and mode_shift >= 0")

    centers = pre_mean + sep * rng.standard_normal((spec.classes, latent))
    if mixing == "identity":
        mix = np.eye(latent)
    elif mixing == "random":
        mix = rng.standard_normal((latent, dim)) / math.sqrt(latent)
    else:
        raise ConfigError(f"unknown mixing {mixing!r}")
    offsets = shift * rng.standard_normal((modes, dim)) if modes > 1 else None

    def draw(n):
        y = _balanced_labels(n, spec.classes, rng)
        z = centers[y] + pre_std * rng.standard_normal((n, latent))
        x = np.maximum(z, 0.0) @ mix
        if offsets is not None:
            x = x + offsets[rng.integers(0, modes, size=n)]
        if noise:
            x = x + noise * rng.standard_normal(x.shape)
        return x, y

    x_tr, y_tr = draw(spec.n_train)
    x_te, y_te = draw(spec.n_test)
    if p.get("standardize", True):
        x_tr, x_te = standardize(x_tr, x_te)
    shape = spec.shape
    return Dataset(x_tr.reshape((-1,) + shape), y_tr, x_te.reshape((-1,) + shape), y_te, spec.classes)


def gen_blobs(spec):
    p = spec.params
    rng = np.random.default_rng([int(spec.seed), 0xB10B])
    dim = int(np.prod(spec.shape))
    std = float(p.get("std", 1.0))
    if std <= 0:
        raise ConfigError("blobs need std > 0")
    centers = float(p.get("center_scale", 5.0)) * rng.standard_normal((spec.classes, dim))

    def draw(n):
        y = _balanced_labels(n, spec.classes, rng)
        return centers[y] + std * rng.standard_normal((n, dim)), y

    x_tr, y_tr = draw(spec.n_train)
    x_te, y_te = draw(spec.n_test)
    return Dataset(x_tr, y_tr, x_te, y_te, spec.classes)


def gen_spirals(spec):
    p = spec.params
    rng = np.random.default_rng([int(spec.seed), 0x5917])
    noise = float(p.get("noise", 0.1))
    turns = float(p.get("turns", 1.5))

    def draw(n):
        y = _balanced_labels(n, spec.classes, rng)
        t = rng.uniform(0.05, 1.0, size=n)
        angle = 2 * math.pi * (turns * t + y / spec.classes)
        x = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
        return x + noise * rng.standard_normal(x.shape), y

    x_tr, y_tr = draw(spec.n_train)
    x_te, y_te = draw(spec.n_test)
    return Dataset(x_tr, y_tr, x_te, y_te, spec.classes)


# -- image files -----------------------------------------------------------

def read_idx(path):
    """Parse an IDX file: two zero bytes, a type code, a dimension count,
    big-endian uint32 extents, then the raw values."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IngestionError(f"{path}: truncated header at byte offset {len(raw)}")
    if raw[0] != 0 or raw[1] != 0:
        raise IngestionError(f"{path}: bad magic bytes at offset 0: {raw[:4].hex()}")
    code, ndim = raw[2], raw[3]
    if code not in IDX_DTYPES:
        raise IngestionError(f"{path}: unknown IDX type code 0x{code:02x} at offset 2")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"{path}: truncated dimension block at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = IDX_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != expected:
        raise IngestionError(
            f"{path}: payload is {len(raw) - header} bytes, header promises {expected} (offset {header})"
        )
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array):
    array = np.asarray(array)
    code = {np.dtype(v).newbyteorder("="): k for k, v in IDX_DTYPES.items()}.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(IDX_DTYPES[code]).tobytes())


def read_image_csv(path, shape):
    """Rows ``label,p0,p1,...``; a non-numeric first row is taken as header."""
    size = int(np.prod(shape))
    labels, pixels = [], []
    with open(path, newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            if row_no == 0 and not row[0].strip().lstrip("-").isdigit():
                continue
            if len(row) != size + 1:
                raise IngestionError(f"{path}: row {row_no} has {len(row) - 1} pixels, expected {size}")
            try:
                labels.append(int(row[0]))
                pixels.append([float(v) for v in row[1:]])
            except ValueError as err:
                raise IngestionError(f"{path}: row {row_no}: {err}") from None
    return np.array(pixels).reshape((-1,) + tuple(shape)), np.array(labels, dtype=np.int64)


def _as_nchw(images):
    images = images.astype(np.float64)
    if images.ndim == 3:
        images = images[:, None]
    return images


def flip_horizontal(images):
    return images[..., ::-1]


def random_crop(images, rng, pad=4):
    """Zero-pad by ``pad`` and crop back to the original size at a random
    offset in [0, 2 * pad] per image."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(offs):
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out, offs


def flip_and_crop(images, rng, pad=4):
    flip = rng.random(images.shape[0]) < 0.5
    images = np.where(flip[:, None, None, None], flip_horizontal(images), images)
    return random_crop(images, rng, pad)[0]


def load_images(spec):
    p = spec.params
    if spec.kind == "image_idx":
        try:
            x_tr, y_tr = read_idx(p["train_images"]), read_idx(p["train_labels"])
            x_te, y_te = read_idx(p["test_images"]), read_idx(p["test_labels"])
        except KeyError as err:
            raise ConfigError(f"image_idx needs param {err}") from None
    else:
        try:
            x_tr, y_tr = read_image_csv(p["train_csv"], spec.shape)
            x_te, y_te = read_image_csv(p["test_csv"], spec.shape)
        except KeyError as err:
            raise ConfigError(f"image_csv needs param {err}") from None
    if x_tr.shape[0] != y_tr.shape[0] or x_te.shape[0] != y_te.shape[0]:
        raise IngestionError("image and label counts differ")
    n_train = int(p.get("limit_train", x_tr.shape[0]))
    n_test = int(p.get("limit_test", x_te.shape[0]))
    x_tr, x_te = standardize(_as_nchw(x_tr[:n_train]), _as_nchw(x_te[:n_test]))
    y_tr, y_te = y_tr[:n_train].astype(np.int64), y_te[:n_test].astype(np.int64)
    classes = int(max(y_tr.max(), y_te.max()) + 1)
    augment = flip_and_crop if p.get("augment", False) else None
    return Dataset(x_tr, y_tr, x_te, y_te, classes, augment)


def make_dataset(spec):
    if spec.kind == "rectified_gmm_features":
        return gen_rectified_gmm(spec)
    if spec.kind == "blobs":
        return gen_blobs(spec)
    if spec.kind == "spirals":
        return gen_spirals(spec)
    return load_images(spec)
