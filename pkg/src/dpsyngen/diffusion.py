"""Forward diffusion processes, noise-level bookkeeping and the EDM loss."""

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ConfigurationError, RejectedInputError
from .numerics import autodiff as ad
from .numerics.denoiser import SIGMA_DATA, denoise_graph, weight_vars

P_MEAN = -1.2
P_STD = 1.2
MIN_KEPT_MASS = 1e-12


def alpha_bar_of_sigma(sigma):
    """Signal retention 1/(1+sigma^2) of the EDM forward process."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise RejectedInputError("sigma must be nonnegative")
    out = 1.0 / (1.0 + sigma * sigma)
    return float(out) if out.ndim == 0 else out


def snr_of_sigma(sigma):
    """Signal-to-noise ratio 1/sigma^2."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise RejectedInputError("SNR is infinite at sigma = 0; sigma must be positive")
    out = 1.0 / (sigma * sigma)
    return float(out) if out.ndim == 0 else out


def sigma_of_alpha_bar(alpha_bar):
    a = np.asarray(alpha_bar, dtype=np.float64)
    if np.any((a <= 0) | (a > 1)):
        raise RejectedInputError("alpha_bar must lie in (0, 1]")
    out = np.sqrt(1.0 / a - 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DdpmSchedule:
    """Per-step variances beta_1..beta_T and their cumulative products."""

    betas: np.ndarray
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise RejectedInputError("betas must be a nonempty 1-d array")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise RejectedInputError("betas must lie in [0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    @classmethod
    def linear(cls, T=1000, beta_start=1e-4, beta_end=0.02):
        return cls(np.linspace(beta_start, beta_end, T))

    @property
    def T(self):
        return self.betas.size

    def alpha_bar(self, t):
        """alpha_bar_t for 0 <= t <= T (alpha_bar_0 = 1)."""
        t = int(t)
        if not 0 <= t <= self.T:
            raise RejectedInputError(f"step {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def ln_sigma(self, t):
        """Equivalent EDM noise level of step t, via alpha_bar = 1/(1+sigma^2)."""
        return 0.5 * math.log(1.0 / self.alpha_bar(t) - 1.0)


def ddpm_forward(x0, t, schedule, eta):
    """X_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eta for 1 <= t <= T."""
    x0 = np.asarray(x0, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != x0.shape:
        raise RejectedInputError("eta must have the shape of x0")
    if not 1 <= int(t) <= schedule.T:
        raise RejectedInputError(f"step {t} outside [1, {schedule.T}]")
    a = schedule.alpha_bar(t)
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * eta


def edm_forward(x0, sigma, eta):
    """X_sigma = (x0 + sigma * eta) / sqrt(1 + sigma^2).

    ``sigma`` may be a scalar or an array broadcasting against the leading
    axis of ``x0`` (one level per row).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != x0.shape:
        raise RejectedInputError("eta must have the shape of x0")
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise RejectedInputError("sigma must be nonnegative")
    if sigma.ndim == 1:
        sigma = sigma.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (x0 + sigma * eta) / np.sqrt(1.0 + sigma * sigma)


class Truncation(enum.Enum):
    NONE = "none"
    LOWER = "lower"  # keep ln(sigma) <= tau
    UPPER = "upper"  # keep ln(sigma) > tau


@dataclass(frozen=True)
class SigmaDistribution:
    """Log-normal noise-level law, optionally conditioned on one tail of ln(sigma)."""

    p_mean: float = P_MEAN
    p_std: float = P_STD
    truncation: Truncation = Truncation.NONE
    tau: float = None

    def __post_init__(self):
        object.__setattr__(self, "truncation", Truncation(self.truncation))
        if not self.p_std > 0:
            raise ConfigurationError("p_std must be positive")
        if self.truncation is not Truncation.NONE:
            if self.tau is None or not math.isfinite(self.tau):
                raise ConfigurationError("truncation threshold must be finite")

    @classmethod
    def lower(cls, tau, p_mean=P_MEAN, p_std=P_STD):
        """Keep ln(sigma) <= tau; an infinite tau means no truncation."""
        if math.isinf(tau) and tau > 0:
            return cls(p_mean, p_std)
        return cls(p_mean, p_std, Truncation.LOWER, float(tau))

    @classmethod
    def upper(cls, tau, p_mean=P_MEAN, p_std=P_STD):
        """Keep ln(sigma) > tau; tau = -inf means no truncation."""
        if math.isinf(tau) and tau < 0:
            return cls(p_mean, p_std)
        return cls(p_mean, p_std, Truncation.UPPER, float(tau))

    def untruncated(self):
        return SigmaDistribution(self.p_mean, self.p_std)

    def admits(self, ln_sigma):
        """Truncation predicate, elementwise."""
        ln_sigma = np.asarray(ln_sigma)
        if self.truncation is Truncation.LOWER:
            return ln_sigma <= self.tau
        if self.truncation is Truncation.UPPER:
            return ln_sigma > self.tau
        return np.ones(ln_sigma.shape, dtype=bool)

    def kept_mass(self):
        if self.truncation is Truncation.NONE:
            return 1.0
        z = (self.tau - self.p_mean) / self.p_std
        return float(special.ndtr(z) if self.truncation is Truncation.LOWER else special.ndtr(-z))

    def mean_ln_sigma(self):
        """Analytic mean of ln(sigma) under the (possibly truncated) law."""
        if self.truncation is Truncation.NONE:
            return self.p_mean
        z = (self.tau - self.p_mean) / self.p_std
        pdf = math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        if self.truncation is Truncation.LOWER:
            return self.p_mean - self.p_std * pdf / special.ndtr(z)
        return self.p_mean + self.p_std * pdf / special.ndtr(-z)

    def sample_ln_sigma(self, rng, size=None):
        """Draw ln(sigma) by inverse CDF of the conditioned normal."""
        if self.kept_mass() < MIN_KEPT_MASS:
            raise ConfigurationError(
                f"truncation keeps probability mass {self.kept_mass():.3g} < {MIN_KEPT_MASS}")
        if self.truncation is Truncation.NONE:
            return self.p_mean + self.p_std * rng.standard_normal(size)
        # u in (0, 1]; 1 - random() never returns 0
        u = 1.0 - rng.random(size)
        z_tau = (self.tau - self.p_mean) / self.p_std
        if self.truncation is Truncation.LOWER:
            z = special.ndtri(u * special.ndtr(z_tau))
            ln_sigma = np.minimum(self.p_mean + self.p_std * z, self.tau)
        else:
            # sample the mirrored lower tail so extreme thresholds stay accurate
            z = -special.ndtri(u * special.ndtr(-z_tau))
            ln_sigma = np.maximum(self.p_mean + self.p_std * z, np.nextafter(self.tau, np.inf))
        return ln_sigma

    def sample(self, rng, size=None):
        return np.exp(self.sample_ln_sigma(rng, size))

    def describe(self):
        if self.truncation is Truncation.LOWER:
            return f"ln(sigma) <= {self.tau:g}"
        if self.truncation is Truncation.UPPER:
            return f"ln(sigma) > {self.tau:g}"
        return "untruncated"


def sample_sigma(dist, rng):
    return float(dist.sample(rng))


@dataclass(frozen=True)
class EdmLossConfig:
    sigma_data: float = SIGMA_DATA
    sigma_law: SigmaDistribution = SigmaDistribution()

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise ConfigurationError("sigma_data must be positive")


def loss_weight(sigma, sigma_data=SIGMA_DATA):
    """EDM weighting (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma * sigma + sigma_data**2) / (sigma * sigma_data) ** 2


def edm_loss_rows(params, wvars, x0_rows, sigmas, etas, labels=None, sigma_data=None):
    """Mean over rows of lambda(sigma) * ||D(X_sigma, sigma) - x0||^2.

    All randomness is passed in explicitly, which keeps this function pure.
    """
    x_noisy = edm_forward(x0_rows, sigmas, etas)
    denoised = denoise_graph(params, wvars, x_noisy, sigmas, labels)
    resid = denoised - ad.constant(x0_rows)
    sigma_data = params.sigma_data if sigma_data is None else sigma_data
    w = loss_weight(sigmas, sigma_data)[:, None] / len(sigmas)
    return (ad.square(resid) * ad.constant(w)).sum()


def edm_loss(params, x0, cfg, rng, wvars=None, label=None, sigma_log=None):
    """EDM denoising loss of one example at a sigma drawn from ``cfg.sigma_law``.

    Returns a scalar :class:`Var`; pass ``wvars`` to differentiate with
    respect to existing weight variables. Drawn sigmas are appended to
    ``sigma_log`` when given.
    """
    if wvars is None:
        wvars = weight_vars(params, requires_grad=False)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.size != params.pixels:
        raise RejectedInputError(f"x0 has {x0.size} pixels, model expects {params.pixels}")
    sigma = cfg.sigma_law.sample(rng, 1)
    eta = rng.standard_normal((1, params.pixels))
    if sigma_log is not None:
        sigma_log.append(float(sigma[0]))
    labels = None if label is None else [label]
    return edm_loss_rows(params, wvars, x0.reshape(1, -1), sigma, eta, labels, cfg.sigma_data)
