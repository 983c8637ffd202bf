"""Stage boundaries on ln(sigma) and the per-variant stage plans.

Everything here depends only on hyperparameters and the noise schedule, never
on a dataset, so thresholds can be chosen without spending privacy budget.
"""

import csv
import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .diffusion import P_MEAN, P_STD, SigmaDistribution, alpha_bar_of_sigma, sigma_of_alpha_bar
from .errors import ConfigurationError, RejectedInputError

T_MIN = 0.002
T_MAX = 80.0

CLEANING_DEFAULTS = (-4.0, -3.0)
COARSE_DEFAULTS = (2.0, 3.0)
CLAMP_DEVIATION = 1.0
FLATNESS_FRACTION = 0.2


class Variant(enum.Enum):
    COARSE = "coarse"
    CLEANING = "cleaning"
    FINETUNE = "finetune"


@dataclass(frozen=True)
class CurveTable:
    ln_sigma: np.ndarray
    alpha_bar: np.ndarray
    snr: np.ndarray

    def __post_init__(self):
        for name in ("ln_sigma", "alpha_bar", "snr"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.ln_sigma.size
        if self.alpha_bar.size != n or self.snr.size != n or n < 3:
            raise RejectedInputError("curve columns must have equal length >= 3")

    def check_monotone(self):
        if not np.all(np.diff(self.ln_sigma) > 0):
            raise RejectedInputError("ln_sigma grid must be strictly increasing")
        if not np.all(np.diff(self.alpha_bar) < 0):
            raise RejectedInputError("alpha_bar column must be strictly decreasing")
        if not np.all(np.diff(self.snr) < 0):
            raise RejectedInputError("SNR column must be strictly decreasing")

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["ln_sigma", "alpha_bar", "snr"])
            for row in zip(self.ln_sigma, self.alpha_bar, self.snr):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path):
        data = np.genfromtxt(path, delimiter=",", names=True)
        return cls(data["ln_sigma"], data["alpha_bar"], data["snr"])


def make_curve(lo=None, hi=None, step=0.01, scale=1.0):
    """Tabulate alpha_bar and SNR on an ln(sigma) grid.

    The default range is [ln T_min, ln T_max] widened to at least [-5, 5].
    ``scale`` rescales sigma (SNR = 1/(sigma/scale)^2) and shifts the grid by
    ln(scale), producing the same curve translated along ln(sigma).
    """
    lo = min(math.log(T_MIN), -5.0) if lo is None else lo
    hi = max(math.log(T_MAX), 5.0) if hi is None else hi
    n = int(round((hi - lo) / step)) + 1
    base = np.linspace(lo, hi, n)
    shift = math.log(scale)
    sigma = np.exp(base)
    return CurveTable(base + shift, alpha_bar_of_sigma(sigma), 1.0 / sigma**2)


def cleaning_thresholds(alpha_targets=(0.9997, 0.998), snap=None):
    """ln(sigma) values where alpha_bar_sigma equals each target.

    ``snap`` rounds both thresholds to the nearest multiple of it; with
    ``snap=1`` the default targets give the cleaning defaults (-4, -3).
    """
    a1, a2 = (float(a) for a in alpha_targets)
    for a in (a1, a2):
        if not 0.0 < a < 1.0:
            raise RejectedInputError(f"alpha_bar target {a} outside (0, 1)")
    if not a1 > a2:
        raise RejectedInputError("first target must exceed the second so that tau1 < tau2")
    taus = [math.log(sigma_of_alpha_bar(a)) for a in (a1, a2)]
    if snap:
        taus = [snap * round(t / snap) for t in taus]
    return tuple(taus)


def chord_distances(curve):
    """Perpendicular distance of each normalized SNR point to the end-to-end chord."""
    x = curve.ln_sigma
    y = curve.snr
    xn = (x - x[0]) / (x[-1] - x[0])
    yn = (y - y.min()) / (y.max() - y.min())
    # chord from (0, yn[0]) to (1, yn[-1])
    dx, dy = 1.0, yn[-1] - yn[0]
    return np.abs(dy * xn - dx * (yn - yn[0])) / math.hypot(dx, dy)


def detect_elbow(curve):
    """Grid index of the SNR elbow (maximum distance to the chord)."""
    curve.check_monotone()
    return int(np.argmax(chord_distances(curve)))


def detect_flattening(curve, elbow_index, fraction=FLATNESS_FRACTION):
    """First grid index past the elbow where normalized SNR <= fraction * its elbow value."""
    y = curve.snr
    yn = (y - y.min()) / (y.max() - y.min())
    target = fraction * yn[elbow_index]
    after = np.nonzero(yn[elbow_index + 1:] <= target)[0]
    if after.size == 0:
        return curve.ln_sigma.size - 1
    return elbow_index + 1 + int(after[0])


def coarse_thresholds(curve=None, defaults=COARSE_DEFAULTS, max_deviation=CLAMP_DEVIATION):
    """(tau1, tau2) for the coarse variant.

    tau1 is the detected SNR elbow and tau2 the point where the curve has
    flattened. Each is replaced by its default when the detection lands more
    than ``max_deviation`` away from it (a warning is issued).
    """
    curve = make_curve() if curve is None else curve
    if curve.ln_sigma[0] > -5.0 or curve.ln_sigma[-1] < 5.0:
        raise RejectedInputError("curve must cover at least [-5, 5] in ln(sigma)")
    i1 = detect_elbow(curve)
    i2 = detect_flattening(curve, i1)
    detected = (float(curve.ln_sigma[i1]), float(curve.ln_sigma[i2]))
    out = []
    for name, d, default in zip(("tau1", "tau2"), detected, defaults):
        if abs(d - default) > max_deviation:
            warnings.warn(f"detected {name} = {d:.3f} deviates from default {default} "
                          f"by more than {max_deviation}; using the default", stacklevel=2)
            out.append(float(default))
        else:
            out.append(d)
    return tuple(out)


@dataclass(frozen=True)
class StagePlan:
    """Which ln(sigma) law each training phase uses."""

    variant: Variant
    tau1: float
    tau2: float
    synthetic_law: SigmaDistribution
    private_law: SigmaDistribution

    def uncovered_band(self):
        """The ln(sigma) interval trained by neither phase, or None."""
        if self.variant is Variant.CLEANING and self.tau2 > self.tau1:
            return (self.tau1, self.tau2)
        if self.variant is not Variant.CLEANING and self.tau2 < self.tau1:
            return (self.tau2, self.tau1)
        return None


def make_stage_plan(variant, tau1, tau2, base=None):
    """Assemble the two truncated sigma laws mandated by ``variant``.

    Coarse and FineTune train synthetic data on ln(sigma) > tau1 and private
    data on ln(sigma) <= tau2 (untruncated when tau2 is +inf). Cleaning trains
    synthetic data on ln(sigma) <= tau1 and private data on ln(sigma) > tau2.
    """
    variant = Variant(variant)
    base = SigmaDistribution(P_MEAN, P_STD) if base is None else base
    tau1, tau2 = float(tau1), float(tau2)
    if math.isnan(tau1) or math.isnan(tau2) or math.isinf(tau1):
        raise ConfigurationError("tau1 must be finite and tau2 must not be NaN")
    if variant is Variant.FINETUNE and not math.isinf(tau2):
        raise ConfigurationError("the finetune variant requires tau2 = +inf")
    m, s = base.p_mean, base.p_std
    if variant in (Variant.COARSE, Variant.FINETUNE):
        if tau1 > tau2:
            raise ConfigurationError(f"coarse plans need tau1 <= tau2, got ({tau1}, {tau2})")
        syn = SigmaDistribution.upper(tau1, m, s)
        priv = SigmaDistribution.lower(tau2, m, s)
    else:
        if math.isinf(tau2):
            raise ConfigurationError("cleaning plans need a finite tau2")
        syn = SigmaDistribution.lower(tau1, m, s)
        priv = SigmaDistribution.upper(tau2, m, s)
        if tau2 > tau1:
            warnings.warn(f"cleaning plan leaves ln(sigma) in ({tau1}, {tau2}] untrained "
                          "by either phase", stacklevel=2)
    return StagePlan(variant, tau1, tau2, syn, priv)


def default_plan(variant, base=None):
    variant = Variant(variant)
    if variant is Variant.COARSE:
        return make_stage_plan(variant, *COARSE_DEFAULTS, base=base)
    if variant is Variant.FINETUNE:
        return make_stage_plan(variant, COARSE_DEFAULTS[0], math.inf, base=base)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return make_stage_plan(variant, *CLEANING_DEFAULTS, base=base)
