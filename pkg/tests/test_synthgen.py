import numpy as np
import pytest
from scipy import stats

from dpsyngen.errors import RejectedInputError
from dpsyngen.synthgen import (BACKGROUND, DeadLeavesParams, SaltPepperParams, _radii, dead_leaves,
                               generate_batch, random_labels, salt_pepper)


def brute_force_render(disks, n):
    """Per pixel, the color of the first (front-most) disk covering it."""
    img = np.full((n, n), BACKGROUND)
    for r in range(n):
        for c in range(n):
            y, x = r + 0.5, c + 0.5
            for cx, cy, rad, color in disks:
                if (x - cx) ** 2 + (y - cy) ** 2 <= rad * rad:
                    img[r, c] = color
                    break
    return img


@pytest.mark.parametrize("seed", range(5))
def test_occlusion_matches_brute_force(seed):
    params = DeadLeavesParams(size=16, full_coverage=False, max_shapes=30)
    img, disks = dead_leaves(params, seed, return_disks=True)
    assert np.array_equal(img[0], brute_force_render(disks, 16))


def test_full_coverage_leaves_no_background():
    img, disks = dead_leaves(DeadLeavesParams(size=16), 3, return_disks=True)
    assert np.array_equal(img[0], brute_force_render(disks, 16))
    covered = np.zeros((16, 16), bool)
    yy, xx = np.mgrid[0:16, 0:16] + 0.5
    for cx, cy, r, _ in disks:
        covered |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    assert covered.all()


def test_dead_leaves_deterministic_and_in_range():
    a = dead_leaves(DeadLeavesParams(), 11)
    assert np.array_equal(a, dead_leaves(DeadLeavesParams(), 11))
    assert a.shape == (1, 16, 16)
    assert a.min() >= 0 and a.max() <= 1


def test_radius_power_law():
    p = DeadLeavesParams(size=32)
    r = _radii(p, np.random.default_rng(0), 50_000)
    assert r.min() >= 2 and r.max() <= 16
    # density proportional to r^-3 on [2, 16]
    lo, hi = 2.0, 16.0
    cdf = lambda x: (lo**-2 - np.clip(x, lo, hi) ** -2) / (lo**-2 - hi**-2)
    assert stats.kstest(r, cdf).pvalue > 1e-3


def test_salt_pepper_rate():
    x = generate_batch("salt-pepper", 400, 1)
    assert set(np.unique(x)) <= {0.0, 1.0}
    p_hat = x.mean()
    assert abs(p_hat - 0.13) < 4 * np.sqrt(0.13 * 0.87 / x.size)


def test_salt_pepper_edge_probabilities():
    assert salt_pepper(SaltPepperParams(p=0.0), 0).sum() == 0
    assert salt_pepper(SaltPepperParams(p=1.0), 0).min() == 1
    with pytest.raises(RejectedInputError):
        SaltPepperParams(p=1.5)


def test_batches_are_deterministic_and_seed_dependent():
    a = generate_batch("dead-leaves", 4, 9)
    assert np.array_equal(a, generate_batch("dead-leaves", 4, 9))
    assert not np.array_equal(a, generate_batch("dead-leaves", 4, 10))
    assert generate_batch("salt-pepper", 0, 1).shape == (0, 1, 16, 16)
    with pytest.raises(RejectedInputError):
        generate_batch("plaid", 1, 0)


def test_random_labels():
    y = random_labels(1000, 8, 0)
    assert y.min() >= 0 and y.max() < 8
    with pytest.raises(RejectedInputError):
        random_labels(3, 0, 0)


def test_zero_size_rejected():
    with pytest.raises(RejectedInputError):
        DeadLeavesParams(size=0)
