"""DP-SGD mechanics and a Renyi-DP accountant for the Poisson-subsampled Gaussian.

The accountant follows the standard subsampled-Gaussian analysis: for order
alpha the per-step RDP is log(A_alpha)/(alpha - 1) with

    A_alpha = E_{z ~ N(0, s^2)} [ (1 - q + q * exp((2z - 1) / (2 s^2)))^alpha ].

Integer orders use the finite binomial expansion; fractional orders split the
integral where the two mixture components are equal and expand each side as
a (signed) generalized binomial series.
"""

import csv
import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy import special

from .diffusion import edm_loss_rows
from .errors import ConfigurationError, InfeasibleTargetError, NumericalError, RejectedInputError
from .numerics.grad import GradientVector

DEFAULT_DELTA = 1e-5
DEFAULT_CLIP = 1.0
DEFAULT_MULTIPLICITY = 16
ORDERS = np.array([1.25, 1.5] + list(range(2, 65)) + [128, 256], dtype=np.float64)
MAX_NOISE = 1e4
FRAC_SERIES_TERMS = 20000


@dataclass
class DPConfig:
    epsilon: float
    delta: float = DEFAULT_DELTA
    clip: float = DEFAULT_CLIP
    q: float = 0.01
    steps: int = 1
    noise_multiplier: float = None
    multiplicity: int = DEFAULT_MULTIPLICITY

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ConfigurationError("delta must lie in (0, 1)")
        if not self.clip > 0:
            raise ConfigurationError("clip norm must be positive")
        if not 0 < self.q <= 1:
            raise ConfigurationError("sampling rate q must lie in (0, 1]")
        if int(self.steps) < 1:
            raise ConfigurationError("steps must be a positive integer")
        if int(self.multiplicity) < 1:
            raise ConfigurationError("multiplicity k must be a positive integer")
        if self.noise_multiplier is not None and not self.noise_multiplier > 0:
            raise ConfigurationError("noise multiplier must be positive")

    def calibrated(self, orders=ORDERS):
        """Copy with ``noise_multiplier`` set to hit ``epsilon`` after ``steps``."""
        sigma = calibrate_noise(self.epsilon, self.delta, self.q, self.steps, orders)
        return DPConfig(self.epsilon, self.delta, self.clip, self.q, self.steps,
                        sigma, self.multiplicity)


# -- DP-SGD mechanics -------------------------------------------------------

def clip(g, C):
    """Scale ``g`` by min(1, C/||g||)."""
    if not C > 0:
        raise RejectedInputError("clip norm must be positive")
    values = np.asarray(getattr(g, "values", g), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericalError("cannot clip a non-finite gradient")
    norm = float(np.linalg.norm(values))
    factor = 1.0 if norm <= C else C / norm
    return GradientVector(values * factor)


def noisy_aggregate(grads, C, noise_multiplier, lot_size, rng, dim=None):
    """(sum of clipped gradients + N(0, (noise_multiplier * C)^2 I)) / lot_size.

    ``lot_size`` is the expected lot size, not the realized one. ``dim`` is
    required when ``grads`` is empty.
    """
    if not lot_size > 0:
        raise RejectedInputError("expected lot size must be positive")
    if grads:
        total = np.sum([clip(g, C).values for g in grads], axis=0)
    else:
        if dim is None:
            raise RejectedInputError("dim is required for an empty lot")
        total = np.zeros(dim)
    if noise_multiplier > 0:
        total = total + rng.normal(0.0, noise_multiplier * C, size=total.shape)
    return GradientVector(total / lot_size)


def multiplicity_loss(params, wvars, x0, sigmas, rng, label=None, shared_eta=False, sigma_data=None):
    """Average EDM loss of one example over k noise levels.

    Each level gets its own noise draw unless ``shared_eta`` is set. The
    gradient of this average is clipped as one per-example gradient, so k
    does not change the mechanism's sensitivity.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64).ravel()
    if sigmas.size == 0:
        raise RejectedInputError("need at least one noise level")
    k = sigmas.size
    x0_rows = np.broadcast_to(np.asarray(x0, dtype=np.float64).reshape(1, -1), (k, params.pixels))
    if shared_eta:
        etas = np.repeat(rng.standard_normal((1, params.pixels)), k, axis=0)
    else:
        etas = rng.standard_normal((k, params.pixels))
    labels = None if label is None else np.full(k, label)
    return edm_loss_rows(params, wvars, x0_rows, sigmas, etas, labels, sigma_data)


# -- Renyi DP ---------------------------------------------------------------

def _log_comb_signed(alpha, i):
    i = np.asarray(i, dtype=np.float64)
    logabs = special.gammaln(alpha + 1) - special.gammaln(i + 1) - special.gammaln(alpha - i + 1)
    return logabs, special.gammasgn(alpha - i + 1)


def _log_a_int(q, sigma, alpha):
    k = np.arange(int(alpha) + 1, dtype=np.float64)
    log_terms = (special.gammaln(alpha + 1) - special.gammaln(k + 1) - special.gammaln(alpha - k + 1)
                 + k * math.log(q) + (alpha - k) * math.log1p(-q)
                 + (k * k - k) / (2 * sigma**2))
    return float(special.logsumexp(log_terms))


def _log_a_frac(q, sigma, alpha):
    z0 = sigma**2 * math.log(1.0 / q - 1.0) + 0.5
    i = np.arange(FRAC_SERIES_TERMS, dtype=np.float64)
    j = alpha - i
    log_c, sign = _log_comb_signed(alpha, i)
    log1mq, logq = math.log1p(-q), math.log(q)
    # z < z0: expand around (1-q)^alpha; z > z0: expand around (q r(z))^alpha
    t0 = log_c + i * logq + j * log1mq + (i * i - i) / (2 * sigma**2) + special.log_ndtr((z0 - i) / sigma)
    t1 = log_c + j * logq + i * log1mq + (j * j - j) / (2 * sigma**2) + special.log_ndtr((j - z0) / sigma)
    terms = np.concatenate([t0, t1])
    signs = np.concatenate([sign, sign])
    value, s = special.logsumexp(terms, b=signs, return_sign=True)
    if s <= 0:
        raise NumericalError(f"fractional-order series lost precision at alpha={alpha}")
    return float(value)


def rdp_subsampled_gaussian(q, noise_multiplier, orders=ORDERS):
    """Per-step RDP of the Poisson-subsampled Gaussian mechanism at each order."""
    if not 0 < q <= 1:
        raise RejectedInputError("sampling rate q must lie in (0, 1]")
    if not noise_multiplier > 0:
        raise RejectedInputError("noise multiplier must be positive")
    orders = np.atleast_1d(np.asarray(orders, dtype=np.float64))
    if q == 1.0:
        return orders / (2 * noise_multiplier**2)
    out = np.empty_like(orders)
    for n, alpha in enumerate(orders):
        if float(alpha).is_integer():
            log_a = _log_a_int(q, noise_multiplier, alpha)
        else:
            log_a = _log_a_frac(q, noise_multiplier, alpha)
        out[n] = log_a / (alpha - 1)
    return out


def rdp_to_epsilon(rdp, orders, delta):
    """min over orders of rdp + log(1/delta)/(alpha - 1); returns (eps, order)."""
    rdp = np.asarray(rdp, dtype=np.float64)
    orders = np.asarray(orders, dtype=np.float64)
    eps = rdp + math.log(1.0 / delta) / (orders - 1)
    best = int(np.argmin(eps))
    return max(float(eps[best]), 0.0), float(orders[best])


class PrivacyLedger:
    """Cumulative RDP of the steps taken so far.

    Steps are stored as counts per (q, noise_multiplier) pair, so composing
    ledgers adds integers and the cumulative RDP equals the sum of per-step
    RDP exactly.
    """

    def __init__(self, orders=ORDERS):
        self.orders = np.asarray(orders, dtype=np.float64)
        self._counts = {}
        self._per_step = {}
        self._history = []  # (q, noise, count) runs in step order
        self._lock = threading.Lock()

    def _rdp_for(self, key):
        if key not in self._per_step:
            self._per_step[key] = rdp_subsampled_gaussian(key[0], key[1], self.orders)
        return self._per_step[key]

    def record(self, q, noise_multiplier, count=1):
        count = int(count)
        if count < 0:
            raise RejectedInputError("step count must be nonnegative")
        if count == 0:
            return self
        key = (float(q), float(noise_multiplier))
        self._rdp_for(key)
        with self._lock:
            self._counts[key] = self._counts.get(key, 0) + count
            if self._history and self._history[-1][:2] == key:
                q_, s_, c_ = self._history[-1]
                self._history[-1] = (q_, s_, c_ + count)
            else:
                self._history.append((*key, count))
        return self

    @property
    def steps(self):
        return sum(self._counts.values())

    @property
    def rdp(self):
        with self._lock:
            items = list(self._counts.items())
        total = np.zeros_like(self.orders)
        for key, count in items:
            total = total + count * self._per_step[key]
        return total

    def epsilon(self, delta=DEFAULT_DELTA):
        if self.steps == 0:
            return 0.0
        return rdp_to_epsilon(self.rdp, self.orders, delta)[0]

    def epsilon_and_order(self, delta=DEFAULT_DELTA):
        if self.steps == 0:
            return 0.0, float("nan")
        return rdp_to_epsilon(self.rdp, self.orders, delta)

    def epsilon_after(self, q, noise_multiplier, count=1, delta=DEFAULT_DELTA):
        """Epsilon if ``count`` more steps were recorded (ledger unchanged)."""
        extra = count * self._rdp_for((float(q), float(noise_multiplier)))
        return rdp_to_epsilon(self.rdp + extra, self.orders, delta)[0]

    def compose(self, other):
        if not np.array_equal(self.orders, other.orders):
            raise RejectedInputError("ledgers use different order grids")
        out = PrivacyLedger(self.orders)
        for led in (self, other):
            for q, s, c in led._history:
                out.record(q, s, c)
        return out

    def snapshot(self):
        with self._lock:
            out = PrivacyLedger(self.orders)
            out._per_step = dict(self._per_step)
            out._counts = dict(self._counts)
            out._history = list(self._history)
        return out

    def per_step_rows(self, delta=DEFAULT_DELTA):
        """Yield (step, q, noise_multiplier, cumulative epsilon) per recorded step."""
        total = np.zeros_like(self.orders)
        step = 0
        for q, s, c in self._history:
            per = self._per_step[(q, s)]
            for _ in range(c):
                step += 1
                total = total + per
                yield step, q, s, rdp_to_epsilon(total, self.orders, delta)[0]

    def write_csv(self, path, delta=DEFAULT_DELTA):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["step", "q", "sigma_noise", "epsilon"])
            for step, q, s, eps in self.per_step_rows(delta):
                w.writerow([step, repr(q), repr(s), repr(eps)])


def rdp_account(q, noise_multiplier, steps, orders=ORDERS):
    """Ledger after ``steps`` steps of the subsampled Gaussian mechanism."""
    if not 0 < q <= 1:
        raise RejectedInputError("sampling rate q must lie in (0, 1]")
    if not noise_multiplier > 0:
        raise RejectedInputError("noise multiplier must be positive")
    if steps < 0:
        raise RejectedInputError("steps must be nonnegative")
    return PrivacyLedger(orders).record(q, noise_multiplier, steps)


def compute_epsilon(q, noise_multiplier, steps, delta=DEFAULT_DELTA, orders=ORDERS):
    if steps == 0:
        return 0.0
    rdp = steps * rdp_subsampled_gaussian(q, noise_multiplier, orders)
    return rdp_to_epsilon(rdp, orders, delta)[0]


def calibrate_noise(epsilon, delta, q, steps, orders=ORDERS, rel_tol=1e-3):
    """Smallest-ish noise multiplier whose epsilon lies in [(1 - rel_tol) eps, eps].

    Bisection on log(noise_multiplier); epsilon is continuous and
    nonincreasing in the noise multiplier.
    """
    if not epsilon > 0:
        raise RejectedInputError("epsilon must be positive")
    if steps < 1:
        raise ConfigurationError("calibration needs at least one step")

    def eps_of(s):
        return compute_epsilon(q, s, steps, delta, orders)

    hi = MAX_NOISE
    if eps_of(hi) > epsilon:
        raise InfeasibleTargetError(
            f"epsilon={epsilon} unreachable with noise multiplier <= {MAX_NOISE:g}")
    lo = 1e-2
    while eps_of(lo) <= epsilon:
        lo /= 10.0
        if lo < 1e-8:
            return lo
    for _ in range(200):
        eps_hi = eps_of(hi)
        if eps_hi >= (1.0 - rel_tol) * epsilon:
            return hi
        mid = math.sqrt(lo * hi)
        if eps_of(mid) > epsilon:
            lo = mid
        else:
            hi = mid
    raise NumericalError("noise calibration did not converge")
