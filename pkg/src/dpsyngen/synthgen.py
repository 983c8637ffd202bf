"""Programmatically generated synthetic images and labels.

Nothing in this module accepts a dataset; the images come from random
processes only.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import RejectedInputError
from .rng import stream

BACKGROUND = 0.5
MAX_DISKS = 1_000_000


@dataclass(frozen=True)
class DeadLeavesParams:
    """Dead-leaves disks with power-law radii and a high-contrast color law.

    Radii follow a density proportional to r**(-radius_exponent) on
    [r_min, r_max] (r_max defaults to half the image side). Colors are 0, 1
    or Uniform[0, 1], each with probability 1/3. With ``full_coverage`` disks
    are added until every pixel is covered; otherwise exactly ``max_shapes``
    disks are drawn.
    """

    size: int = 16
    full_coverage: bool = True
    max_shapes: int = 200
    radius_exponent: float = 3.0
    r_min: float = 2.0
    r_max: float = None
    color_weights: tuple = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        if self.size <= 0:
            raise RejectedInputError("image size must be positive")
        r_max = self.size / 2 if self.r_max is None else self.r_max
        object.__setattr__(self, "r_max", float(r_max))
        if not 0 < self.r_min <= self.r_max:
            raise RejectedInputError("need 0 < r_min <= r_max")
        if not np.isclose(sum(self.color_weights), 1.0) or min(self.color_weights) < 0:
            raise RejectedInputError("color mixture weights must be nonnegative and sum to 1")


@dataclass(frozen=True)
class SaltPepperParams:
    size: int = 16
    p: float = 0.13

    def __post_init__(self):
        if self.size <= 0:
            raise RejectedInputError("image size must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise RejectedInputError("p must lie in [0, 1]")


def _radii(params, rng, n):
    a = 1.0 - params.radius_exponent
    u = rng.random(n)
    if abs(a) < 1e-12:
        return params.r_min * (params.r_max / params.r_min) ** u
    lo, hi = params.r_min**a, params.r_max**a
    return (lo + u * (hi - lo)) ** (1.0 / a)


def _colors(params, rng, n):
    kind = rng.choice(3, size=n, p=params.color_weights)
    uniform = rng.random(n)
    return np.where(kind == 0, 0.0, np.where(kind == 1, 1.0, uniform))


def draw_disks(params, rng, n):
    """``n`` random disks as rows of (cx, cy, radius, color)."""
    centers = rng.random((n, 2)) * params.size
    return np.column_stack([centers, _radii(params, rng, n), _colors(params, rng, n)])


def _disk_mask(disk, yy, xx):
    cx, cy, r, _ = disk
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def dead_leaves(params, seed, return_disks=False):
    """One dead-leaves image of shape (1, size, size).

    Disks are stamped front to back: disk i occludes every later disk, so a
    pixel takes the color of the first disk that covers it. Pixels no disk
    covers keep the background value 0.5.
    """
    if params.size <= 0:
        raise RejectedInputError("zero-size image")
    rng = np.random.default_rng(seed)
    n = params.size
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    img = np.full((n, n), BACKGROUND)
    covered = np.zeros((n, n), dtype=bool)
    disks = []
    chunk = 64
    while True:
        if params.full_coverage:
            if covered.all():
                break
            if len(disks) >= MAX_DISKS:
                raise RuntimeError("dead leaves failed to cover the image")
            batch = draw_disks(params, rng, chunk)
        else:
            remaining = params.max_shapes - len(disks)
            if remaining <= 0:
                break
            batch = draw_disks(params, rng, min(chunk, remaining))
        for disk in batch:
            if params.full_coverage and covered.all():
                break
            visible = _disk_mask(disk, yy, xx) & ~covered
            img[visible] = disk[3]
            covered |= visible
            disks.append(disk)
    out = img.reshape(1, n, n)
    if return_disks:
        return out, np.array(disks).reshape(-1, 4)
    return out


def salt_pepper(params, seed):
    """Binary image with i.i.d. Bernoulli(p) white pixels, shape (1, size, size)."""
    rng = np.random.default_rng(seed)
    return (rng.random((1, params.size, params.size)) < params.p).astype(np.float64)


def random_labels(n, num_classes, seed):
    if num_classes < 1:
        raise RejectedInputError("num_classes must be at least 1")
    return np.random.default_rng(seed).integers(0, num_classes, size=int(n))


def generate_batch(kind, n, seed, size=16, **kw):
    """``n`` synthetic images (n, 1, size, size); image i uses its own derived seed."""
    if kind == "dead-leaves":
        params = DeadLeavesParams(size=size, **kw)
        make = dead_leaves
    elif kind == "salt-pepper":
        params = SaltPepperParams(size=size, **kw)
        make = salt_pepper
    else:
        raise RejectedInputError(f"unknown synthetic kind {kind!r}")
    seeds = stream(seed, "synthetic", zlib.crc32(kind.encode("utf-8"))).integers(0, 2**63 - 1, size=int(n))
    if n == 0:
        return np.zeros((0, 1, size, size))
    return np.stack([make(params, int(s)) for s in seeds])

