"""Monte Carlo checks of the coarse-stage and cleaning-stage results.

Coarse stage: two forward processes started from different data
distributions but driven by the same noise contract towards each other,
||X_n - Y_n|| = sqrt(alpha_bar_n) ||X_0 - Y_0||.

Cleaning stage: with independent noises Z1, Z2,

    X_t - X_0 - (Y_t - Y_0) = (sqrt(a) - 1)(X_0 - Y_0) + sqrt(1 - a)(Z1 - Z2),

and its exceedance probability over nu is bounded by a Markov term plus a
Chernoff chi-squared tail term (see :func:`thm2_gamma`).
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import sample_bars
from .diffusion import ddpm_forward
from .errors import NotFoundError, OutOfRegionError, RejectedInputError

CHERNOFF_MIN_RATIO = math.e
DEFAULT_DRAWS = 20_000


def toy_sampler(name, size=16, p=0.13):
    """Return ``f(rng, m) -> (m, size*size)`` for a builtin toy distribution."""
    d = size * size
    if name == "bars16":
        return lambda rng, m: sample_bars(rng, m, size)[0].reshape(m, d)
    if name == "salt-pepper":
        return lambda rng, m: (rng.random((m, d)) < p).astype(np.float64)
    if name == "zeros":
        return lambda rng, m: np.zeros((m, d))
    raise RejectedInputError(f"unknown toy distribution {name!r}")


@dataclass
class TheoremTrial:
    """Two sampleable distributions plus Monte Carlo settings.

    ``sample_x``/``sample_y`` map ``(rng, m)`` to an (m, d) array. With
    ``identical`` set, Y_0 reuses the X_0 draws exactly.
    """

    sample_x: object
    sample_y: object
    dim: int
    nu: float = 0.5
    gamma: float = 0.05
    draws: int = DEFAULT_DRAWS
    coupling: str = "shared-noise"
    identical: bool = False

    def __post_init__(self):
        if not self.nu > 0:
            raise RejectedInputError("nu must be positive")
        if not 0 < self.gamma < 1:
            raise RejectedInputError("gamma must lie in (0, 1)")
        if self.draws < 1000:
            raise RejectedInputError("need at least 1000 Monte Carlo draws")
        if self.coupling not in ("shared-noise", "independent-noise"):
            raise RejectedInputError(f"unknown coupling {self.coupling!r}")

    def pairs(self, rng, m=None):
        m = self.draws if m is None else m
        x0 = self.sample_x(rng, m)
        y0 = x0.copy() if self.identical else self.sample_y(rng, m)
        return x0, y0


def mc_slack(p_hat, m):
    return 4.0 * math.sqrt(p_hat * (1.0 - p_hat) / m)


@dataclass
class Thm1Result:
    N: int
    steps: np.ndarray
    exceedance: np.ndarray
    identity_error: float
    pair_distance_max: float

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["step", "empirical_p"])
            for n, p in zip(self.steps, self.exceedance):
                w.writerow([int(n), repr(float(p))])


def verify_thm1(trial, schedule, nu=None, gamma=None, rng=None, stride=5, chunk=1000):
    """Smallest sampled step N with exceedance <= gamma for every later sampled step.

    X_n and Y_n are formed explicitly with a shared noise draw per pair at
    steps 1, 1+stride, ..., T (T always included).
    """
    if trial.coupling != "shared-noise":
        raise RejectedInputError("the contraction check needs the shared-noise coupling")
    nu = trial.nu if nu is None else nu
    gamma = trial.gamma if gamma is None else gamma
    rng = np.random.default_rng(rng)
    x0, y0 = trial.pairs(rng)
    eta = rng.standard_normal(x0.shape)
    base = np.linalg.norm(x0 - y0, axis=1)
    steps = np.unique(np.append(np.arange(1, schedule.T + 1, stride), schedule.T))
    counts = np.zeros(steps.size, dtype=np.int64)
    ident = 0.0
    # row chunks keep the working set cache-sized
    for lo in range(0, len(x0), chunk):
        xs, ys, es, bs = x0[lo:lo + chunk], y0[lo:lo + chunk], eta[lo:lo + chunk], base[lo:lo + chunk]
        for j, n in enumerate(steps):
            diff = ddpm_forward(xs, n, schedule, es) - ddpm_forward(ys, n, schedule, es)
            dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            ident = max(ident, float(np.max(np.abs(dist - math.sqrt(schedule.alpha_bar(n)) * bs))))
            counts[j] += int(np.count_nonzero(dist > nu))
    exceed = counts / len(x0)
    bad = np.nonzero(exceed > gamma)[0]
    if bad.size and bad[-1] == steps.size - 1:
        raise NotFoundError(
            f"exceedance {exceed[-1]:.4f} > gamma={gamma} at the final step T={schedule.T}",
            terminal_value=float(exceed[-1]))
    first = 0 if bad.size == 0 else bad[-1] + 1
    return Thm1Result(int(steps[first]), steps, exceed, ident, float(base.max()))


def analytic_thm1_step(schedule, diameter, nu):
    """min{n : sqrt(alpha_bar_n) * diameter <= nu}, or None if never reached."""
    ok = np.nonzero(np.sqrt(schedule.alpha_bars) * diameter <= nu)[0]
    return int(ok[0]) + 1 if ok.size else None


def _pairwise_mean_dist(a, b, exclude_diagonal=False):
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    d = np.sqrt(np.clip(sq, 0.0, None))
    if exclude_diagonal:
        n = len(a)
        return (d.sum() - np.trace(d)) / (n * (n - 1))
    return d.mean()


def energy_distance(x, y):
    """Unbiased estimate of 2E||X-Y|| - E||X-X'|| - E||Y-Y'||."""
    return (2.0 * _pairwise_mean_dist(x, y) - _pairwise_mean_dist(x, x, True)
            - _pairwise_mean_dist(y, y, True))


def marginal_energy_distance(trial, schedule, n, m=2000, rng=None):
    """Energy distance between independently noised X_n and Y_n samples."""
    rng = np.random.default_rng(rng)
    x0 = trial.sample_x(rng, m)
    y0 = trial.sample_y(rng, m)
    xn = ddpm_forward(x0, n, schedule, rng.standard_normal(x0.shape))
    yn = ddpm_forward(y0, n, schedule, rng.standard_normal(y0.shape))
    return float(energy_distance(xn, yn))


def chernoff_ratio(alpha_bar, nu, d):
    return nu * nu / (8.0 * d * (1.0 - alpha_bar))


def thm2_gamma(alpha_bar, nu, d, expected_diff):
    """Markov term plus Chernoff chi-squared tail bound on the cleaning-stage deviation.

        gamma = 2 (1 - sqrt(a)) E||X0 - Y0|| / nu
                + exp(-nu^2 / (16 (1 - a)) + d/2 - (d/2) ln(nu^2 / (8 d (1 - a))))

    Raises :class:`OutOfRegionError` unless nu^2 / (8 d (1 - a)) >= e.
    """
    if not 0.0 < alpha_bar < 1.0:
        raise OutOfRegionError(f"alpha_bar {alpha_bar} outside (0, 1)")
    if not nu > 0:
        raise RejectedInputError("nu must be positive")
    ratio = chernoff_ratio(alpha_bar, nu, d)
    if ratio < CHERNOFF_MIN_RATIO:
        raise OutOfRegionError(
            f"Chernoff ratio {ratio:.4g} below {CHERNOFF_MIN_RATIO:.4g}; bound not asserted")
    markov = 2.0 * (1.0 - math.sqrt(alpha_bar)) / nu * expected_diff
    chernoff = math.exp(-nu * nu / (16.0 * (1.0 - alpha_bar)) + d / 2.0 - d / 2.0 * math.log(ratio))
    return markov + chernoff


@dataclass
class BoundRow:
    alpha_bar: float
    empirical_p: float
    gamma_bound: float
    slack: float
    status: str
    identity_error: float = 0.0
    expected_diff: float = float("nan")


@dataclass
class BoundReport:
    rows: list = field(default_factory=list)
    draws: int = 0

    @property
    def passed(self):
        return all(r.status != "fail" for r in self.rows)

    def valid_rows(self):
        return [r for r in self.rows if r.status != "skipped"]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["alpha_bar", "empirical_p", "gamma_bound", "slack", "status"])
            for r in self.rows:
                w.writerow([repr(r.alpha_bar), repr(r.empirical_p), repr(r.gamma_bound),
                            repr(r.slack), r.status])


def thm2_difference(x0, y0, z1, z2, alpha_bar):
    """Literal X_t - X_0 - (Y_t - Y_0) with independent noises."""
    a = math.sqrt(alpha_bar)
    b = math.sqrt(1.0 - alpha_bar)
    return (a * x0 + b * z1 - x0) - (a * y0 + b * z2 - y0)


def verify_thm2(trial, alpha_grid, nu=None, rng=None, chunk=5000):
    """Empirical exceedance of the cleaning-stage deviation vs :func:`thm2_gamma`."""
    nu = trial.nu if nu is None else nu
    m = trial.draws
    report = BoundReport(draws=m)
    for g, alpha_bar in enumerate(alpha_grid):
        point_rng = np.random.default_rng(None if rng is None else [int(rng), g])
        exceed = 0
        diff_sum = 0.0
        ident = 0.0
        done = 0
        while done < m:
            c = min(chunk, m - done)
            x0, y0 = trial.pairs(point_rng, c)
            z1 = point_rng.standard_normal(x0.shape)
            z2 = point_rng.standard_normal(x0.shape)
            lit = thm2_difference(x0, y0, z1, z2, alpha_bar)
            dec = (math.sqrt(alpha_bar) - 1.0) * (x0 - y0) + math.sqrt(1.0 - alpha_bar) * (z1 - z2)
            ident = max(ident, float(np.max(np.abs(lit - dec))))
            exceed += int(np.sum(np.linalg.norm(lit, axis=1) > nu))
            diff_sum += float(np.linalg.norm(x0 - y0, axis=1).sum())
            done += c
        p_hat = exceed / m
        e_diff = diff_sum / m
        slack = mc_slack(p_hat, m)
        try:
            bound = thm2_gamma(alpha_bar, nu, trial.dim, e_diff)
        except OutOfRegionError:
            report.rows.append(BoundRow(alpha_bar, p_hat, float("nan"), slack, "skipped", ident, e_diff))
            continue
        status = "pass" if p_hat <= bound + slack else "fail"
        report.rows.append(BoundRow(alpha_bar, p_hat, bound, slack, status, ident, e_diff))
    return report
