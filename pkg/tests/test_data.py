"""IDX ingestion and synthetic dataset tests."""

import struct

import numpy as np
import pytest

from minipod.data import (
    Dataset,
    IdxFormatError,
    class_templates,
    gen_synthetic,
    load_idx,
    write_idx,
)


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(2, 5, 4, 1), dtype=np.uint8)
    labels = np.array([3, 1], dtype=np.uint8)
    ip, lp = tmp_path / "imgs.idx", tmp_path / "lbls.idx"
    write_idx(images, labels, ip, lp)
    return images, labels, ip, lp


def test_load_idx_roundtrip(idx_pair):
    images, labels, ip, lp = idx_pair
    ds = load_idx(ip, lp)
    assert ds.images.shape == (2, 5, 4, 1)
    assert ds.images.dtype == np.float32
    np.testing.assert_array_equal(ds.labels, labels.astype(np.int64))
    np.testing.assert_allclose(ds.images, images.astype(np.float32) / 255.0)
    # byte-level inverse: rewriting what was loaded reproduces the files
    out_i, out_l = ip.parent / "i2.idx", ip.parent / "l2.idx"
    write_idx((ds.images * 255.0).round().astype(np.uint8), ds.labels, out_i, out_l)
    assert out_i.read_bytes() == ip.read_bytes()
    assert out_l.read_bytes() == lp.read_bytes()


def test_load_idx_bad_image_magic(idx_pair):
    _, _, ip, lp = idx_pair
    raw = bytearray(ip.read_bytes())
    raw[:4] = struct.pack(">I", 0x00000999)
    ip.write_bytes(bytes(raw))
    with pytest.raises(IdxFormatError, match="0x00000999"):
        load_idx(ip, lp)


def test_load_idx_bad_label_magic(idx_pair):
    _, _, ip, lp = idx_pair
    raw = bytearray(lp.read_bytes())
    raw[:4] = struct.pack(">I", 0x00000803)
    lp.write_bytes(bytes(raw))
    with pytest.raises(IdxFormatError, match="label magic"):
        load_idx(ip, lp)


def test_load_idx_truncated(idx_pair):
    _, _, ip, lp = idx_pair
    ip.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(ip, lp)


def test_load_idx_count_mismatch(idx_pair, tmp_path):
    images, _, ip, _ = idx_pair
    lp3 = tmp_path / "three.idx"
    with open(lp3, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, 3))
        f.write(bytes([0, 1, 2]))
    with pytest.raises(IdxFormatError, match="count mismatch"):
        load_idx(ip, lp3)


def test_gen_synthetic_deterministic():
    a = gen_synthetic(10, 64, 8, 8, 1, seed=5)
    b = gen_synthetic(10, 64, 8, 8, 1, seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = gen_synthetic(10, 64, 8, 8, 1, seed=6)
    assert a.images.tobytes() != c.images.tobytes()


def test_gen_synthetic_single_class():
    ds = gen_synthetic(1, 16, 4, 4, 1, seed=0)
    assert (ds.labels == 0).all()


def test_gen_synthetic_range_and_shapes():
    ds = gen_synthetic(4, 32, 6, 5, 3, seed=1)
    assert ds.images.shape == (32, 6, 5, 3)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert sorted(set(ds.labels.tolist())) == [0, 1, 2, 3]


def test_noise_streams_share_templates():
    train = gen_synthetic(4, 64, 8, 8, 1, seed=9, noise_stream=0)
    evalset = gen_synthetic(4, 64, 8, 8, 1, seed=9, noise_stream=1)
    assert train.images.tobytes() != evalset.images.tobytes()
    # same class templates underneath: per-class means nearly coincide
    for k in range(4):
        m_train = train.images[train.labels == k].mean(axis=0)
        m_eval = evalset.images[evalset.labels == k].mean(axis=0)
        assert float(np.abs(m_train - m_eval).mean()) < 0.05


def test_nearest_template_classifier_oracle():
    seed = 11
    templates = class_templates(10, 16, 16, 1, seed)
    fresh = gen_synthetic(10, 2000, 16, 16, 1, seed, noise_stream=3)
    flat_t = templates.reshape(10, -1)
    flat_x = fresh.images.reshape(len(fresh), -1)
    d2 = ((flat_x[:, None, :] - flat_t[None, :, :]) ** 2).sum(axis=2)
    pred = d2.argmin(axis=1)
    acc = float((pred == fresh.labels).mean())
    assert acc >= 0.99


def test_dataset_validation():
    with pytest.raises(ValueError, match="labels"):
        Dataset(np.zeros((2, 2, 2, 1), np.float32), np.zeros(3, np.int64), 2)
    with pytest.raises(ValueError, match="lie in"):
        Dataset(np.zeros((2, 2, 2, 1), np.float32), np.array([0, 5]), 2)
