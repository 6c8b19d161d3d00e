import struct

import numpy as np
import pytest

from oracles import bilinear_pixel
from seqtune.data_io import (
    CLINICAL_COUNTS,
    Dataset,
    SyntheticSpec,
    generate_synthetic_dataset,
    load_dataset,
    load_weights,
    parse_synthetic_spec,
    read_raster,
    resize_bilinear,
    save_weights,
    source_task_spec,
    split_train_val,
    split_two_fold,
    write_dataset,
    write_raster,
)
from seqtune.errors import ChecksumError, ConfigurationError, ContractError, DataFormatError, ShapeMismatchError
from seqtune.model import DenseNetConfig, build_densenet_lite


# ------------------------------------------------------------------ resize


def test_resize_identity(rng):
    img = rng.random((2, 5, 7))
    out = resize_bilinear(img, 5, 7)
    assert np.array_equal(out, img)


def test_resize_constant():
    out = resize_bilinear(np.full((1, 4, 4), 0.37), 9, 3)
    assert out.shape == (1, 9, 3)
    assert np.all(out == 0.37)


def test_resize_hand_example():
    out = resize_bilinear(np.array([[[0.0, 1.0], [0.0, 1.0]]]), 2, 3)
    np.testing.assert_array_equal(out[0], [[0, 0.5, 1], [0, 0.5, 1]])


def test_resize_matches_pointwise_oracle(rng):
    img = rng.random((1, 5, 6))
    out = resize_bilinear(img, 7, 4)
    grid = img[0].tolist()
    for i in range(7):
        for j in range(4):
            y, x = i * (5 - 1) / (7 - 1), j * (6 - 1) / (4 - 1)
            assert abs(out[0, i, j] - bilinear_pixel(grid, y, x)) < 1e-12
    assert img.min() <= out.min() and out.max() <= img.max()


def test_resize_rejects_bad_size():
    with pytest.raises(ContractError):
        resize_bilinear(np.zeros((1, 2, 2)), 0, 3)


# --------------------------------------------------------------- raster/index


def test_raster_roundtrip(tmp_path, rng):
    img = rng.random((1, 4, 5))
    write_raster(tmp_path / "a.rst", img)
    assert np.array_equal(read_raster(tmp_path / "a.rst"), img)
    write_raster(tmp_path / "b.rst", img, as_uint8=True)
    np.testing.assert_allclose(read_raster(tmp_path / "b.rst"), np.round(img * 255) / 255, atol=1e-15)


def test_raster_byte_layout(tmp_path):
    write_raster(tmp_path / "a.rst", np.array([[[0.0, 1.0]]]), as_uint8=True)
    raw = (tmp_path / "a.rst").read_bytes()
    assert raw[:4] == b"RSTR"
    assert struct.unpack("<BBHII", raw[4:16]) == (1, 0, 1, 1, 2)
    assert raw[16:] == bytes([0, 255])


def test_raster_truncated(tmp_path):
    write_raster(tmp_path / "a.rst", np.zeros((1, 3, 3)))
    raw = (tmp_path / "a.rst").read_bytes()
    (tmp_path / "a.rst").write_bytes(raw[:-3])
    with pytest.raises(DataFormatError):
        read_raster(tmp_path / "a.rst")


@pytest.fixture
def small_dataset():
    return generate_synthetic_dataset(SyntheticSpec(counts=(4, 3, 5), image_size=6, seed=2))


def test_index_roundtrip(tmp_path, small_dataset):
    index = write_dataset(small_dataset, tmp_path)
    loaded = load_dataset(index)
    assert loaded.class_names == small_dataset.class_names
    assert np.array_equal(loaded.labels, small_dataset.labels)
    assert np.array_equal(loaded.images, small_dataset.images)
    resized = load_dataset(index, image_size=(9, 9))
    assert resized.image_shape == (1, 9, 9)


def test_index_unknown_class(tmp_path, small_dataset):
    index = write_dataset(small_dataset, tmp_path)
    lines = index.read_text().splitlines()
    lines[4] = lines[4].rsplit(",", 1)[0] + ",pneumonia"
    index.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError, match=r"index.csv:5.*'pneumonia'"):
        load_dataset(index)


def test_index_malformed_row_and_missing_files(tmp_path, small_dataset):
    index = write_dataset(small_dataset, tmp_path)
    text = index.read_text()
    index.write_text(text + "only-one-column\n")
    with pytest.raises(DataFormatError, match="expected 2 columns"):
        load_dataset(index)
    index.write_text(text + "images/nope.rst,TB\n")
    with pytest.raises(FileNotFoundError):
        load_dataset(index)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing.csv")
    index.write_text(text.split("\n", 1)[1])
    with pytest.raises(DataFormatError, match="classes"):
        load_dataset(index)


# ------------------------------------------------------------------ weights


def test_weights_roundtrip_bitwise(tmp_path, rng):
    net = build_densenet_lite(DenseNetConfig(), 3)
    # move the running statistics away from their initial values
    net.forward(rng.random((8, 1, 16, 16)), training=True)
    save_weights(net, tmp_path / "w.sqw")
    loaded = load_weights(tmp_path / "w.sqw")
    probe = rng.random((3, 1, 16, 16))
    assert np.array_equal(net.forward(probe).data, loaded.forward(probe).data)
    a, b = net.state_dict(), loaded.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_weights_corruption(tmp_path):
    net = build_densenet_lite(DenseNetConfig(), 3)
    path = tmp_path / "w.sqw"
    save_weights(net, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_weights(path)


def test_weights_config_mismatch(tmp_path):
    save_weights(build_densenet_lite(DenseNetConfig(), 0), tmp_path / "w.sqw")
    with pytest.raises(ShapeMismatchError):
        load_weights(tmp_path / "w.sqw", DenseNetConfig(growth_rate=6))
    with pytest.raises(FileNotFoundError):
        load_weights(tmp_path / "absent.sqw")
    (tmp_path / "junk.sqw").write_bytes(b"not a weights file at all")
    with pytest.raises(DataFormatError):
        load_weights(tmp_path / "junk.sqw")


def test_weights_layout(tmp_path):
    net = build_densenet_lite(DenseNetConfig(), 0)
    save_weights(net, tmp_path / "w.sqw")
    raw = (tmp_path / "w.sqw").read_bytes()
    assert raw[:5] == b"SQTW\x01"
    n = struct.unpack_from("<I", raw, 5)[0]
    assert struct.unpack_from("<I", raw, 9 + n)[0] == net.num_groups


# ------------------------------------------------------------------- splits


def _dataset(counts, seed=0):
    labels = np.concatenate([np.full(c, k) for k, c in enumerate(counts)])
    rng = np.random.default_rng(seed)
    labels = rng.permutation(labels)
    n = len(labels)
    return Dataset(np.zeros((n, 1, 2, 2)), labels, [f"id{i}" for i in range(n)],
                   [f"c{k}" for k in range(len(counts))])


def test_two_fold_even():
    a, b = split_two_fold(_dataset((50, 30, 20)), seed=1)
    assert (len(a), len(b)) == (50, 50)


def test_two_fold_clinical_counts():
    ds = _dataset(CLINICAL_COUNTS)
    a, b = split_two_fold(ds, seed=3)
    assert abs(len(a) - len(b)) <= 1
    assert set(a.ids).isdisjoint(b.ids) and set(a.ids) | set(b.ids) == set(ds.ids)
    for part in (a, b):
        for k, c in enumerate(CLINICAL_COUNTS):
            assert abs(part.class_counts()[k] - c / 2) <= 1


@pytest.mark.parametrize("seed", range(5))
def test_two_fold_random_proportions(seed):
    rng = np.random.default_rng(seed)
    counts = tuple(int(c) for c in rng.integers(2, 40, size=3))
    ds = _dataset(counts, seed)
    a, b = split_two_fold(ds, seed)
    assert abs(len(a) - len(b)) <= 1
    for part in (a, b):
        share = len(part) / len(ds)
        for k, c in enumerate(counts):
            assert abs(part.class_counts()[k] - c * share) <= 1


def test_two_fold_rejects_singleton_class():
    with pytest.raises(ConfigurationError, match="c1"):
        split_two_fold(_dataset((5, 1, 5)), 0)


def test_train_val_seventy_thirty():
    train, val = split_train_val(_dataset((4, 3, 3)), 0.7, seed=0)
    assert (len(train), len(val)) == (7, 3)
    assert set(train.ids).isdisjoint(val.ids)


@pytest.mark.parametrize("counts", [(41, 38, 138), (40, 38, 139), (5, 5, 5), (2, 2, 9)])
def test_train_val_partition_and_strata(counts):
    part = _dataset(counts, 4)
    train, val = split_train_val(part, 0.7, seed=9)
    assert len(train) == int(np.floor(0.7 * len(part) + 0.5))
    assert sorted(train.ids + val.ids) == sorted(part.ids)
    for k, c in enumerate(counts):
        assert abs(train.class_counts()[k] - 0.7 * c) < 1


def test_train_val_fraction_bounds():
    with pytest.raises(ConfigurationError):
        split_train_val(_dataset((3, 3)), 1.0)


def test_split_deterministic():
    ds = _dataset(CLINICAL_COUNTS)
    assert split_two_fold(ds, 5)[0].ids == split_two_fold(ds, 5)[0].ids
    assert split_two_fold(ds, 5)[0].ids != split_two_fold(ds, 6)[0].ids


# ---------------------------------------------------------------- synthetic


def test_synthetic_clinical_imbalance():
    ds = generate_synthetic_dataset(SyntheticSpec())
    assert ds.class_counts().tolist() == [81, 76, 277]
    assert ds.image_shape == (1, 16, 16)
    assert 0 <= ds.images.min() and ds.images.max() <= 1


def test_synthetic_deterministic():
    a = generate_synthetic_dataset(SyntheticSpec(seed=4))
    b = generate_synthetic_dataset(SyntheticSpec(seed=4))
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def test_synthetic_rejects_tiny_class():
    with pytest.raises(ConfigurationError):
        SyntheticSpec(counts=(1, 5, 5))


def test_source_task_is_shifted():
    spec = SyntheticSpec()
    src = source_task_spec(spec)
    assert len(src.counts) == 6
    assert not set(src.angles) & set(spec.angles)
    assert src.seed != spec.seed


def test_parse_synthetic_spec():
    spec = parse_synthetic_spec("low;counts=10:10:20;noise=0.2;image_size=8")
    assert spec.counts == (10, 10, 20) and spec.noise == 0.2 and spec.image_size == 8
    assert spec.angle_jitter == parse_synthetic_spec("low").angle_jitter
    with pytest.raises(ConfigurationError):
        parse_synthetic_spec("medium")
    with pytest.raises(ConfigurationError):
        parse_synthetic_spec("high;colour=red")


def test_noise_free_set_is_learnable():
    from seqtune.scheduler import SftSchedule
    from seqtune.training import TrainConfig, fit, predict, restore

    ds = generate_synthetic_dataset(SyntheticSpec(counts=(20, 20, 20), image_size=8, noise=0.0,
                                                  angle_jitter=0.0, contrast=0.45, seed=1))
    cfg = DenseNetConfig(input_size=(8, 8), initial_conv=(3, 1, 4), layers_per_block=(2, 2), growth_rate=4)
    net = build_densenet_lite(cfg, 0)
    ckpt = fit(net, ds, ds, TrainConfig(SftSchedule(25, 1, 1, net.num_groups, "FT_ALL"), seed=0, batch_size=10))
    restore(net, ckpt)
    _, labels = predict(net, ds.images)
    assert np.mean(labels == ds.labels) == 1.0
