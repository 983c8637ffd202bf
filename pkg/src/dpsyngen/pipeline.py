"""Two-phase DP-SynGen training, the deterministic sampler and the toy protocols.

Phase 1 trains non-privately on synthetic images with the plan's synthetic
sigma law until the loss stops improving. Phase 2 trains on private images
with the plan's private sigma law, either non-privately (toy experiments) or
with DP-SGD: Poisson lots, k noise levels per example, per-example clipping,
Gaussian noise and Adam on the noisy mean.
"""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import SigmaDistribution, edm_forward, edm_loss_rows
from .errors import BudgetExhaustedError, ConfigurationError, NumericalError, RejectedInputError
from .numerics.checkpoint import save_checkpoint
from .numerics.denoiser import denoise_graph, denoise_rows, flat_grad, init_denoiser, weight_vars
from .numerics.grad import per_sample_gradients
from .numerics.optim import AdamState, adam_step
from .privacy import DPConfig, PrivacyLedger, multiplicity_loss, noisy_aggregate
from .rng import SeedSplitter
from .stages import T_MAX, T_MIN

log = logging.getLogger(__name__)

METRIC_FIELDS = ("phase", "step", "loss", "ln_sigma_mean", "epsilon_so_far")


class DataSource:
    """Read-counting wrapper around an image array (and optional labels)."""

    def __init__(self, images, labels=None, name="data"):
        images = np.asarray(images, dtype=np.float64)
        self.images = images.reshape(len(images), int(np.prod(images.shape[1:])))
        self.image_shape = images.shape[1:]
        self.labels = None if labels is None else np.asarray(labels, dtype=int)
        self.name = name
        self.reads = 0

    def __len__(self):
        return len(self.images)

    def take(self, indices):
        indices = np.asarray(indices, dtype=int)
        self.reads += indices.size
        labels = None if self.labels is None else self.labels[indices]
        return self.images[indices], labels


@dataclass
class PhaseConfig:
    """Non-private Adam training settings."""

    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 40
    min_epochs: int = 5
    window: int = 5
    min_rel_improvement: float = 0.005
    early_stop: bool = True


@dataclass
class TrainRun:
    """Everything one DP-SynGen training run needs.

    ``plan`` may be None, which skips phase 1 and trains the private phase on
    the untruncated law (the DPDM-style baseline). With ``dp`` set, phase 2
    is DP-SGD for ``private_epochs`` epochs; otherwise it is ordinary Adam.
    """

    private: DataSource
    plan: object = None
    synthetic: DataSource = None
    phase1: PhaseConfig = field(default_factory=PhaseConfig)
    phase2: PhaseConfig = field(default_factory=lambda: PhaseConfig(lr=3e-4, early_stop=False))
    dp: DPConfig = None
    private_epochs: int = 250
    base_law: SigmaDistribution = field(default_factory=SigmaDistribution)
    hidden: tuple = (256, 256, 256)
    n_fourier: int = 16
    conditional: bool = False
    num_classes: int = 0
    init: object = None
    checkpoint_path: str = None
    checkpoint_every: int = 0


@dataclass
class TrainResult:
    params: object
    ledger: PrivacyLedger
    metrics: list
    sigma_log: dict
    reads: dict

    def write_metrics(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
            w.writeheader()
            for row in self.metrics:
                w.writerow({k: row[k] for k in METRIC_FIELDS})


def _laws(run):
    if run.plan is None:
        return None, run.base_law
    return run.plan.synthetic_law, run.plan.private_law


def _batch_loss_grad(params, x0, labels, ln_sigma, rng):
    wvars = weight_vars(params)
    sigmas = np.exp(ln_sigma)
    etas = rng.standard_normal(x0.shape)
    loss = edm_loss_rows(params, wvars, x0, sigmas, etas, labels if params.num_classes else None)
    value = float(loss.value)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite training loss {value}")
    loss.backward()
    return value, flat_grad(params, wvars)


def train_nonprivate(params, state, source, law, cfg, rng, phase, metrics, sigma_log,
                     epsilon_so_far=0.0):
    """Minibatch Adam on ``source`` with sigma drawn from ``law``.

    Stops after ``cfg.max_epochs`` or, with early stopping, once the
    ``cfg.window``-epoch moving-average loss improves by less than
    ``cfg.min_rel_improvement`` relative to the previous window.
    """
    n = len(source)
    epoch_losses = []
    step = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            x0, labels = source.take(order[start:start + cfg.batch_size])
            ln_sigma = law.sample_ln_sigma(rng, len(x0))
            sigma_log.append(ln_sigma)
            loss, g = _batch_loss_grad(params, x0, labels, ln_sigma, rng)
            params, state = adam_step(state, params, g)
            step += 1
            losses.append(loss)
            metrics.append({"phase": phase, "step": step, "loss": loss,
                            "ln_sigma_mean": float(ln_sigma.mean()),
                            "epsilon_so_far": epsilon_so_far})
        epoch_losses.append(float(np.mean(losses)))
        if cfg.early_stop and epoch + 1 >= max(cfg.min_epochs, 2 * cfg.window):
            prev = np.mean(epoch_losses[-2 * cfg.window:-cfg.window])
            cur = np.mean(epoch_losses[-cfg.window:])
            if (prev - cur) / abs(prev) < cfg.min_rel_improvement:
                log.info("%s: early stop after %d epochs", phase, epoch + 1)
                break
    return params, state


def train_dp(params, state, source, law, dp, epochs, rng, noise_rng, metrics, sigma_log, ledger):
    """DP-SGD with Poisson lots and noise multiplicity.

    The ledger is checked before every step; a step that would push epsilon
    past the target raises :class:`BudgetExhaustedError` instead.
    """
    n = len(source)
    steps = int(math.ceil(epochs / dp.q - 1e-9))
    lot = dp.q * n
    k = dp.multiplicity

    def loss_fn(p, wvars, example):
        x0, label, sigmas = example
        return multiplicity_loss(p, wvars, x0, sigmas, rng,
                                 label=label if p.num_classes else None)

    for step in range(1, steps + 1):
        eps_next = ledger.epsilon_after(dp.q, dp.noise_multiplier, 1, dp.delta)
        if eps_next > dp.epsilon:
            raise BudgetExhaustedError(
                f"step {step} would reach epsilon {eps_next:.4f} > {dp.epsilon}", ledger.snapshot())
        idx = np.nonzero(rng.random(n) < dp.q)[0]
        x0, labels = source.take(idx)
        ln_sigma = law.sample_ln_sigma(rng, (len(idx), k))
        sigma_log.append(ln_sigma.ravel())
        batch = [(x0[i], None if labels is None else labels[i], np.exp(ln_sigma[i]))
                 for i in range(len(idx))]
        grads = per_sample_gradients(params, loss_fn, batch) if batch else []
        g = noisy_aggregate(grads, dp.clip, dp.noise_multiplier, lot, noise_rng, dim=params.size)
        params, state = adam_step(state, params, g)
        ledger.record(dp.q, dp.noise_multiplier)
        eps = ledger.epsilon(dp.delta)
        metrics.append({"phase": "private", "step": step, "loss": float("nan"),
                        "ln_sigma_mean": float(ln_sigma.mean()) if len(idx) else float("nan"),
                        "epsilon_so_far": eps})
    return params, state


def train_syngen(run, seed=0):
    """Run both phases of DP-SynGen training and return a :class:`TrainResult`."""
    streams = SeedSplitter(seed)
    if len(run.private) == 0:
        raise ConfigurationError("private data source is empty")
    syn_law, priv_law = _laws(run)
    if syn_law is not None and (run.synthetic is None or len(run.synthetic) == 0):
        raise ConfigurationError("the stage plan needs a nonempty synthetic data source")
    num_classes = run.num_classes if run.conditional else 0
    params = run.init.copy() if run.init is not None else init_denoiser(
        run.private.image_shape, run.hidden, run.n_fourier, num_classes, streams("init"))
    metrics, sigma_log = [], {"synthetic": [], "private": []}
    ledger = PrivacyLedger()
    reads = {}

    if syn_law is not None:
        priv_before = run.private.reads
        state = AdamState.zeros(params.size, lr=run.phase1.lr)
        params, state = train_nonprivate(params, state, run.synthetic, syn_law, run.phase1,
                                         streams("sigma", 1), "synthetic", metrics,
                                         sigma_log["synthetic"])
        reads["phase1_private"] = run.private.reads - priv_before
        reads["phase1_synthetic"] = run.synthetic.reads
        if ledger.steps:
            raise AssertionError("phase 1 must not touch the privacy ledger")
        _maybe_checkpoint(run, params, state, "phase1")

    syn_before = run.synthetic.reads if run.synthetic is not None else 0
    if run.dp is not None:
        dp = run.dp if run.dp.noise_multiplier is not None else run.dp.calibrated()
        state = AdamState.zeros(params.size, lr=run.phase2.lr)
        params, state = train_dp(params, state, run.private, priv_law, dp, run.private_epochs,
                                 streams("sigma", 2), streams("dp-noise"), metrics,
                                 sigma_log["private"], ledger)
    else:
        state = AdamState.zeros(params.size, lr=run.phase2.lr)
        cfg = PhaseConfig(**{**run.phase2.__dict__, "max_epochs": max(1, math.ceil(run.private_epochs - 1e-9))})
        params, state = train_nonprivate(params, state, run.private, priv_law, cfg,
                                         streams("sigma", 2), "private", metrics,
                                         sigma_log["private"])
    reads["phase2_synthetic"] = (run.synthetic.reads if run.synthetic is not None else 0) - syn_before
    reads["phase2_private"] = run.private.reads - reads.get("phase1_private", 0)
    _maybe_checkpoint(run, params, state, "final")
    logs = {k: np.concatenate(v) if v else np.zeros(0) for k, v in sigma_log.items()}
    return TrainResult(params, ledger, metrics, logs, reads)


def _maybe_checkpoint(run, params, state, tag):
    if run.checkpoint_path:
        save_checkpoint(f"{run.checkpoint_path}.{tag}.ckpt", params, state, {"tag": tag})


# -- sampling ---------------------------------------------------------------

@dataclass(frozen=True)
class SamplerGrid:
    """Karras-warped decreasing noise levels from sigma_max to sigma_min."""

    sigma_max: float = T_MAX
    sigma_min: float = T_MIN
    steps: int = 64
    rho: float = 7.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise RejectedInputError("need 0 < sigma_min < sigma_max")
        if self.steps < 2:
            raise RejectedInputError("a sampler grid needs at least two levels")

    @property
    def sigmas(self):
        r = 1.0 / self.rho
        i = np.arange(self.steps) / (self.steps - 1)
        s = (self.sigma_max**r + i * (self.sigma_min**r - self.sigma_max**r)) ** self.rho
        s[0], s[-1] = self.sigma_max, self.sigma_min
        return s


def _as_model(params):
    """Wrap params (or a callable) as f(x_rows_scaled, sigma, labels) -> rows."""
    if callable(params):
        return params

    def model(x_rows, sigma, labels):
        return denoise_rows(params, x_rows, np.full(len(x_rows), sigma),
                            labels if params.num_classes else None)

    return model


def _integrate(x_u, sigmas, pick, labels):
    """Euler steps of the probability-flow ODE in unscaled coordinates, then to sigma 0."""
    levels = list(sigmas) + [0.0]
    for i in range(len(levels) - 1):
        s, s_next = levels[i], levels[i + 1]
        model = pick(i, s)
        d = model(x_u / math.sqrt(1.0 + s * s), s, labels)
        x_u = x_u + (s_next - s) * (x_u - d) / s
        if not np.all(np.isfinite(x_u)):
            raise NumericalError(f"non-finite sampler state at step {i}")
    return x_u


def ddim_sample(params, grid, n, rng, labels=None, image_shape=None):
    """Deterministic sampling: start at sigma_max * eta and Euler-step down the grid.

    ``params`` may be :class:`DenoiserParams` or a callable
    ``f(x_rows, sigma, labels)`` returning denoised rows (used for oracles).
    """
    shape = image_shape or params.image_shape
    pixels = int(np.prod(shape))
    if n == 0:
        return np.zeros((0, *shape))
    model = _as_model(params)
    x = grid.sigma_max * rng.standard_normal((n, pixels))
    out = _integrate(x, grid.sigmas, lambda i, s: model, labels)
    return out.reshape(n, *shape)


def band_from_ddpm_steps(lo_step, hi_step, schedule):
    """Map a DDPM step band (lo, hi] to the equivalent ln(sigma) band."""
    return schedule.ln_sigma(lo_step), schedule.ln_sigma(hi_step)


def stage_switch_sample(params_context, params_other, band, grid, n, rng, labels=None):
    """Like :func:`ddim_sample`, but levels with lo < ln(sigma) <= hi use ``params_context``."""
    lo, hi = band
    shape = params_context.image_shape
    if n == 0:
        return np.zeros((0, *shape))
    ctx, other = _as_model(params_context), _as_model(params_other)
    x = grid.sigma_max * rng.standard_normal((n, int(np.prod(shape))))

    def pick(i, s):
        return ctx if lo < math.log(s) <= hi else other

    return _integrate(x, grid.sigmas, pick, labels).reshape(n, *shape)


def forward_then_clean(params, x, tau, grid, rng, labels=None):
    """Noise ``x`` to sigma = e^tau, then denoise down the remaining grid levels.

    ``x`` is a single image or a batch (n, *image_shape).
    """
    if not math.log(grid.sigma_min) <= tau <= math.log(grid.sigma_max):
        raise RejectedInputError(f"tau {tau} outside the sampler grid")
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == tuple(params.image_shape)
    rows = x.reshape(1 if single else len(x), -1)
    sigma = math.exp(tau)
    noisy = edm_forward(rows, sigma, rng.standard_normal(rows.shape))
    x_u = noisy * math.sqrt(1.0 + sigma * sigma)
    rest = [s for s in grid.sigmas if s < sigma]
    model = _as_model(params)
    out = _integrate(x_u, [sigma] + rest, lambda i, s: model, labels)
    return out.reshape(x.shape)
