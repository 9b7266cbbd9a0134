import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from mixnorm import gmm
from mixnorm.datagen import (
    DatasetSpec,
    IngestionError,
    flip_horizontal,
    load_images,
    make_dataset,
    random_crop,
    read_idx,
    rectified_gaussian,
    write_idx,
)
from mixnorm.tensor import ConfigError


def test_rectified_zero_fraction_matches_normal_cdf():
    rng = np.random.default_rng(0)
    zeros = (rectified_gaussian(10_000, -1.0, 1.0, rng) == 0).mean()
    assert abs(zeros - norm.cdf(1.0)) < 0.02
    assert abs(norm.cdf(1.0) - 0.841) < 1e-3


def test_rectified_far_positive_has_almost_no_zeros():
    rng = np.random.default_rng(1)
    assert (rectified_gaussian(10_000, 5.0, 1.0, rng) == 0).mean() < 0.001


def _spec(**kw):
    base = dict(kind="rectified_gmm_features", n_train=600, n_test=100, shape=(8,), classes=3, seed=0)
    base.update(kw)
    return DatasetSpec(**base)


@pytest.mark.parametrize("kind", ["rectified_gmm_features", "blobs", "spirals"])
def test_generators_are_deterministic(kind):
    a = make_dataset(_spec(kind=kind, shape=(2,)))
    b = make_dataset(_spec(kind=kind, shape=(2,)))
    c = make_dataset(_spec(kind=kind, shape=(2,), seed=1))
    assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_test, b.y_test)
    assert not np.array_equal(a.x_train, c.x_train)


def test_labels_are_balanced_and_image_shape_respected():
    d = make_dataset(_spec(shape=(2, 4, 4), n_train=601))
    assert d.x_train.shape == (601, 2, 4, 4)
    counts = np.bincount(d.y_train)
    assert counts.max() - counts.min() <= 1


def test_invalid_specs_raise():
    with pytest.raises(ConfigError):
        DatasetSpec("nonsense")
    with pytest.raises(ConfigError):
        DatasetSpec("blobs", n_train=2, classes=3)
    with pytest.raises(ConfigError):
        make_dataset(_spec(params={"pre_std": 0.0}))
    with pytest.raises(ConfigError):
        make_dataset(DatasetSpec("blobs", params={"std": -1.0}))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), pre_mean=st.floats(-1.0, 0.5), sep=st.floats(0.5, 2.0))
def test_rectified_features_prefer_two_components(seed, pre_mean, sep):
    d = make_dataset(_spec(seed=seed, n_train=1000, shape=(4,),
                           params={"pre_mean": pre_mean, "class_sep": sep, "mixing": "identity"}))
    for c in range(d.x_train.shape[1]):
        col = d.x_train[:, c:c + 1]
        one = gmm.fit_gmm(col, 1, em_iters=1, rng=np.random.default_rng(0))
        two = gmm.fit_gmm(col, 2, em_iters=20, rng=np.random.default_rng(0), prune_threshold=0.0)
        assert gmm.log_likelihood(col, two) > gmm.log_likelihood(col, one)


def test_mixed_rectified_features_are_bimodal():
    d = make_dataset(_spec(n_train=2000, shape=(6,)))
    for c in range(6):
        col = d.x_train[:, c:c + 1]
        one = gmm.fit_gmm(col, 1, rng=np.random.default_rng(0))
        two = gmm.fit_gmm(col, 2, em_iters=20, rng=np.random.default_rng(0), prune_threshold=0.0)
        assert gmm.log_likelihood(col, two) > gmm.log_likelihood(col, one)


# -- image files -----------------------------------------------------------

def _write_split(tmp_path, name, images, labels):
    write_idx(tmp_path / f"{name}-images.idx", images)
    write_idx(tmp_path / f"{name}-labels.idx", labels)
    return {f"{name}_images": str(tmp_path / f"{name}-images.idx"),
            f"{name}_labels": str(tmp_path / f"{name}-labels.idx")}


def test_idx_header_is_big_endian(tmp_path):
    arr = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "a.idx", arr)
    raw = (tmp_path / "a.idx").read_bytes()
    assert raw[:4] == bytes.fromhex("00000803")
    assert raw[4:16] == bytes.fromhex("000000020000000300000004")
    assert np.array_equal(read_idx(tmp_path / "a.idx"), arr)
    write_idx(tmp_path / "l.idx", np.array([1, 2, 3], dtype=np.uint8))
    assert (tmp_path / "l.idx").read_bytes()[:4] == bytes.fromhex("00000801")


@pytest.mark.parametrize("raw, offset", [
    (b"\x00\x00", "offset 2"),
    (b"\x01\x00\x08\x01\x00\x00\x00\x01\x05", "offset 0"),
    (b"\x00\x00\x42\x01\x00\x00\x00\x01\x05", "offset 2"),
    (b"\x00\x00\x08\x02\x00\x00", "offset 6"),
    (b"\x00\x00\x08\x01\x00\x00\x00\x03\x05", "offset 8"),
])
def test_corrupt_idx_reports_offset(tmp_path, raw, offset):
    (tmp_path / "bad.idx").write_bytes(raw)
    with pytest.raises(IngestionError, match=offset):
        read_idx(tmp_path / "bad.idx")


def test_load_idx_standardizes_per_channel(tmp_path):
    rng = np.random.default_rng(0)
    params = _write_split(tmp_path, "train", rng.integers(0, 256, (50, 6, 6), dtype=np.uint8),
                          rng.integers(0, 10, 50, dtype=np.uint8))
    params.update(_write_split(tmp_path, "test", rng.integers(0, 256, (20, 6, 6), dtype=np.uint8),
                               rng.integers(0, 10, 20, dtype=np.uint8)))
    d = load_images(DatasetSpec("image_idx", params=params))
    assert d.x_train.shape == (50, 1, 6, 6)
    assert np.abs(d.x_train.mean(axis=(0, 2, 3))).max() < 1e-10
    assert np.abs(d.x_train.var(axis=(0, 2, 3)) - 1).max() < 1e-10


def test_load_csv_standardizes_and_reports_bad_rows(tmp_path):
    rng = np.random.default_rng(1)
    shape = (3, 2, 2)

    def write(path, n):
        rows = ["label," + ",".join(f"p{i}" for i in range(12))]
        for _ in range(n):
            rows.append(",".join([str(rng.integers(0, 3))] + [str(v) for v in rng.integers(0, 256, 12)]))
        path.write_text("\n".join(rows) + "\n")

    write(tmp_path / "train.csv", 40)
    write(tmp_path / "test.csv", 10)
    spec = DatasetSpec("image_csv", shape=shape,
                       params={"train_csv": str(tmp_path / "train.csv"), "test_csv": str(tmp_path / "test.csv")})
    d = load_images(spec)
    assert d.x_train.shape == (40, 3, 2, 2)
    assert np.abs(d.x_train.mean(axis=(0, 2, 3))).max() < 1e-10
    assert np.abs(d.x_train.var(axis=(0, 2, 3)) - 1).max() < 1e-10

    with open(tmp_path / "train.csv", "a") as fh:
        fh.write("1,2,3\n")
    with pytest.raises(IngestionError, match="row 41"):
        load_images(spec)


def test_flip_is_an_involution():
    x = np.random.default_rng(2).normal(size=(3, 3, 5, 7))
    assert np.array_equal(flip_horizontal(flip_horizontal(x)), x)
    assert not np.array_equal(flip_horizontal(x), x)


def test_pad4_crop_keeps_size_and_enumerates_offsets():
    x = np.random.default_rng(3).normal(size=(2000, 1, 32, 32))
    out, offs = random_crop(x, np.random.default_rng(4), pad=4)
    assert out.shape == x.shape
    assert offs.min() == 0 and offs.max() == 8
    assert len({tuple(o) for o in offs}) == 81
    # the centered offset reproduces the input
    centered = np.flatnonzero((offs == 4).all(axis=1))[0]
    assert np.array_equal(out[centered], x[centered])
