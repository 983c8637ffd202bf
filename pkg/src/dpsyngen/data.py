"""Dataset ingestion, the builtin toy dataset, and on-disk image formats.

Formats:
    IDX      4-byte big-endian magic (2051 images / 2049 labels) and dims, then uint8.
    PGM      binary P5, 8-bit, pixels quantized from [0, 1].
    tensor   b"DPSGTNSR", then little-endian uint64 version, rank and dims,
             then little-endian float64 values (row-major).
"""

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CountMismatchError, MagicError, RejectedInputError, TruncatedFileError
from .rng import stream

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
TENSOR_MAGIC = b"DPSGTNSR"
TENSOR_VERSION = 1

BARS_CLASSES = 8
BARS_NAMES = ("hbar", "vbar", "diag", "antidiag", "plus", "cross", "box", "ell")


@dataclass
class IdxDataset:
    images: np.ndarray  # (n, 1, rows, cols) float64 in [0, 1]
    labels: np.ndarray  # (n,) uint8

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)


def _read_idx(path, magic, ndim):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: header truncated")
    found = struct.unpack(">i", data[:4])[0]
    if found != magic:
        raise MagicError(f"{path}: magic {found}, expected {magic}")
    dims = struct.unpack(f">{ndim}i", data[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    body = data[4 + 4 * ndim:]
    if len(body) < count:
        raise TruncatedFileError(f"{path}: expected {count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair; pixels are rescaled by 1/255."""
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).copy()
    if raw.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    images = raw.astype(np.float64)[:, None, :, :] / 255.0
    return IdxDataset(images, labels)


def write_idx(images_path, labels_path, images_u8, labels):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images_u8.tobytes())
    labels = np.asarray(labels, dtype=np.uint8)
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABELS_MAGIC, labels.size))
        f.write(labels.tobytes())


def write_tensor(path, array):
    a = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack(f"<QQ{a.ndim}Q", TENSOR_VERSION, a.ndim, *a.shape))
        f.write(a.tobytes())


def read_tensor(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != TENSOR_MAGIC:
        raise MagicError(f"{path}: not a tensor container")
    version, rank = struct.unpack_from("<QQ", data, 8)
    if version != TENSOR_VERSION:
        raise RejectedInputError(f"{path}: unsupported tensor version {version}")
    dims = struct.unpack_from(f"<{rank}Q", data, 24)
    offset = 24 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(data) - offset < 8 * count:
        raise TruncatedFileError(f"{path}: payload truncated")
    return np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)


def quantize(image):
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image):
    """Write a 2-d image (or (1, H, W)) in [0, 1] as an 8-bit binary PGM."""
    img = quantize(np.asarray(image).reshape(np.shape(image)[-2:]))
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise MagicError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return pixels.reshape(h, w).astype(np.float64) / maxval


def tile(images, cols=None, pad=1, fill=1.0):
    """Arrange (n, 1, H, W) images into one 2-d mosaic."""
    images = np.asarray(images).reshape(len(images), *np.shape(images)[-2:])
    n, h, w = images.shape
    cols = cols or int(np.ceil(np.sqrt(max(n, 1))))
    rows = int(np.ceil(n / cols)) if n else 1
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), fill)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        out[pad + r * (h + pad):pad + r * (h + pad) + h, pad + c * (w + pad):pad + c * (w + pad) + w] = img
    return out


@lru_cache(maxsize=8)
def _pixel_centers(n):
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    return yy, xx


def _draw_bar(img, r0, c0, r1, c1, width, value):
    yy, xx = _pixel_centers(img.shape[0])
    p0 = np.array([r0, c0], dtype=float)
    d = np.array([r1 - r0, c1 - c0], dtype=float)
    length2 = float(d @ d)
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / length2, 0.0, 1.0)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    img[dist <= width / 2] = np.maximum(img[dist <= width / 2], value)


def bars_image(label, rng, size=16):
    """One 'digits-like bars' glyph of class ``label`` with random jitter."""
    img = np.zeros((size, size))
    v = rng.uniform(0.8, 1.0)
    w = rng.uniform(1.6, 2.6)
    lo = rng.uniform(2.0, 4.0)
    hi = size - rng.uniform(2.0, 4.0)
    mid_r = size / 2 + rng.uniform(-2.5, 2.5)
    mid_c = size / 2 + rng.uniform(-2.5, 2.5)
    if label == 0:
        _draw_bar(img, mid_r, lo, mid_r, hi, w, v)
    elif label == 1:
        _draw_bar(img, lo, mid_c, hi, mid_c, w, v)
    elif label == 2:
        _draw_bar(img, lo, lo, hi, hi, w, v)
    elif label == 3:
        _draw_bar(img, lo, hi, hi, lo, w, v)
    elif label == 4:
        _draw_bar(img, mid_r, lo, mid_r, hi, w, v)
        _draw_bar(img, lo, mid_c, hi, mid_c, w, v)
    elif label == 5:
        _draw_bar(img, lo, lo, hi, hi, w, v)
        _draw_bar(img, lo, hi, hi, lo, w, v)
    elif label == 6:
        for r0, c0, r1, c1 in ((lo, lo, lo, hi), (hi, lo, hi, hi), (lo, lo, hi, lo), (lo, hi, hi, hi)):
            _draw_bar(img, r0, c0, r1, c1, w, v)
    elif label == 7:
        _draw_bar(img, lo, lo + 1, hi, lo + 1, w, v)
        _draw_bar(img, hi, lo + 1, hi, hi, w, v)
    else:
        raise RejectedInputError(f"bars label {label} outside [0, {BARS_CLASSES})")
    return img[None]


def sample_bars(rng, n, size=16):
    """``n`` glyphs with uniform labels drawn from ``rng``; returns (images, labels)."""
    labels = rng.integers(0, BARS_CLASSES, size=int(n))
    images = np.stack([bars_image(int(y), rng, size) for y in labels]) if n else np.zeros((0, 1, size, size))
    return images, labels


def make_bars16(n, seed, size=16):
    """Builtin toy dataset: ``n`` glyphs with uniformly random class labels."""
    images, labels = sample_bars(stream(seed, "data", 16), n, size)
    return IdxDataset(images, labels.astype(np.uint8))


BUILTIN = {"bars16": make_bars16}


def load_dataset(spec, n=None, seed=0):
    """Load ``builtin:<name>`` or ``<images.idx>,<labels.idx>``."""
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in BUILTIN:
            raise RejectedInputError(f"unknown builtin dataset {name!r}")
        return BUILTIN[name](n or 4000, seed)
    try:
        images_path, labels_path = spec.split(",")
    except ValueError:
        raise RejectedInputError("dataset must be builtin:<name> or <images>,<labels>") from None
    ds = load_idx(images_path, labels_path)
    if n:
        ds = IdxDataset(ds.images[:n], ds.labels[:n])
    return ds
