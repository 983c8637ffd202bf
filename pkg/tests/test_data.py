import struct

import numpy as np
import pytest

from dpsyngen.data import (BARS_CLASSES, load_dataset, load_idx, make_bars16, read_pgm, read_tensor,
                           tile, write_idx, write_pgm, write_tensor)
from dpsyngen.errors import CountMismatchError, MagicError, RejectedInputError, TruncatedFileError


def _fixture(tmp_path, n_labels=2, magic=2051, cut=0):
    img = tmp_path / "img.idx"
    lbl = tmp_path / "lbl.idx"
    pixels = bytes([0, 255, 0, 0,  255, 0, 0, 255])  # two 2x2 images
    blob = struct.pack(">iiii", magic, 2, 2, 2) + pixels
    img.write_bytes(blob[:len(blob) - cut])
    lbl.write_bytes(struct.pack(">ii", 2049, n_labels) + bytes(range(n_labels)))
    return img, lbl


def test_idx_fixture_exact_pixels(tmp_path):
    ds = load_idx(*_fixture(tmp_path))
    assert ds.images.shape == (2, 1, 2, 2)
    assert ds.images[0, 0, 0, 1] == 1.0 and ds.images[0, 0, 0, 0] == 0.0
    assert ds.images[1, 0, 1, 1] == 1.0 and ds.images[1, 0, 1, 0] == 0.0
    assert list(ds.labels) == [0, 1]


def test_idx_errors(tmp_path):
    with pytest.raises(CountMismatchError):
        load_idx(*_fixture(tmp_path, n_labels=3))
    with pytest.raises(MagicError):
        load_idx(*_fixture(tmp_path, magic=2049))
    with pytest.raises(TruncatedFileError):
        load_idx(*_fixture(tmp_path, cut=3))


def test_idx_write_read_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    u8 = rng.integers(0, 256, (5, 3, 4), dtype=np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", u8, [1, 2, 3, 4, 5])
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(np.rint(ds.images[:, 0] * 255).astype(np.uint8), u8)
    assert load_dataset(f"{tmp_path / 'i'},{tmp_path / 'l'}", n=2).images.shape == (2, 1, 3, 4)


def test_tensor_round_trip_is_lossless(tmp_path):
    a = np.random.default_rng(1).normal(size=(3, 1, 5, 7))
    write_tensor(tmp_path / "t", a)
    assert np.array_equal(read_tensor(tmp_path / "t"), a)
    raw = (tmp_path / "t").read_bytes()
    assert raw[:8] == b"DPSGTNSR"
    assert struct.unpack_from("<QQ", raw, 8) == (1, 4)


def test_tensor_errors(tmp_path):
    (tmp_path / "x").write_bytes(b"garbage!" + bytes(40))
    with pytest.raises(MagicError):
        read_tensor(tmp_path / "x")
    write_tensor(tmp_path / "t", np.ones(10))
    (tmp_path / "t").write_bytes((tmp_path / "t").read_bytes()[:-8])
    with pytest.raises(TruncatedFileError):
        read_tensor(tmp_path / "t")


def test_pgm_round_trip(tmp_path):
    img = np.arange(12).reshape(3, 4) / 11.0
    write_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")
    back = read_pgm(tmp_path / "a.pgm")
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_tile_layout():
    imgs = np.zeros((3, 1, 2, 2))
    m = tile(imgs, cols=2, pad=1, fill=1.0)
    assert m.shape == (7, 7)
    assert m[1, 1] == 0.0 and m[0, 0] == 1.0


def test_builtin_bars():
    ds = make_bars16(64, 0)
    assert ds.images.shape == (64, 1, 16, 16)
    assert ds.labels.max() < BARS_CLASSES
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert np.array_equal(ds.images, make_bars16(64, 0).images)
    assert load_dataset("builtin:bars16", 10, 0).images.shape[0] == 10
    with pytest.raises(RejectedInputError):
        load_dataset("builtin:nope")
    with pytest.raises(RejectedInputError):
        load_dataset("just-one-path")
