"""Desk-scale versions of the toy and DP-ordering experiments.

All three protocols run on the builtin 16x16 bars dataset:

* stage switch: swap which model denoises the context band and score the
  samples with a held-out classifier that has an extra "not a glyph" class;
* coarse vs real: a model whose high-noise stage was learned on synthetic
  images should match an all-real model in Frechet feature distance;
* DP ordering: Coarse vs the untruncated DP baseline at equal private steps.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import BARS_CLASSES, make_bars16
from .diffusion import DdpmSchedule
from .evaluation import FeatureExtractor, accuracy, frechet_feature_distance, train_classifier
from .pipeline import (DataSource, PhaseConfig, SamplerGrid, TrainRun, band_from_ddpm_steps,
                       ddim_sample, stage_switch_sample, train_syngen)
from .privacy import DPConfig
from .rng import stream
from .stages import CLEANING_DEFAULTS, COARSE_DEFAULTS, Variant, default_plan
from .synthgen import generate_batch

log = logging.getLogger(__name__)

NON_GLYPH = BARS_CLASSES
# context stage = between the cleaning and coarse thresholds, in ln(sigma)
CONTEXT_BAND = (CLEANING_DEFAULTS[1], COARSE_DEFAULTS[0])
# DDPM step band; at 16x16 its ln(sigma) image (-0.04, 2.8] misses where glyphs form
DDPM_CONTEXT_STEPS = (250, 750)


@dataclass
class ToyConfig:
    n_train: int = 2000
    n_test: int = 1000
    n_samples: int = 1000
    hidden: tuple = (512, 512)
    epochs: int = 60
    lr: float = 2e-3
    batch_size: int = 128
    noise_epochs: int = 15
    synthetic_n: int = 2000
    synthetic_epochs: int = 20
    sampler_steps: int = 32
    classifier_epochs: int = 15


@dataclass
class DPOrderingConfig:
    epsilon: float = 1.0
    delta: float = 1e-5
    clip: float = 1.0
    multiplicity: int = 16
    n_train: int = 4000
    n_test: int = 1000
    n_samples: int = 1000
    q: float = 0.1
    steps: int = 250
    lr: float = 3e-4
    hidden: tuple = (128, 128)
    synthetic_n: int = 4000
    synthetic_epochs: int = 20
    sampler_steps: int = 32


# -- held-out glyph classifier ----------------------------------------------

def non_glyph_images(n, seed, size=16):
    """Mixture of salt-pepper, dead-leaves and uniform-noise images."""
    rng = stream(seed, "data", 99)
    k = n // 3
    parts = [generate_batch("salt-pepper", k, seed + 1, size),
             generate_batch("dead-leaves", k, seed + 2, size),
             rng.random((n - 2 * k, 1, size, size))]
    return np.concatenate(parts)


def train_glyph_classifier(seed, n_per_class=500, epochs=15):
    """MLP over 8 glyph classes plus one non-glyph class, on data no model sees."""
    real = make_bars16(n_per_class * BARS_CLASSES, 10_000 + seed)
    junk = non_glyph_images(n_per_class * 2, 20_000 + seed)
    x = np.concatenate([real.images, junk])
    y = np.concatenate([real.labels.astype(int), np.full(len(junk), NON_GLYPH)])
    return train_classifier(x, y, BARS_CLASSES + 1, "mlp", epochs=epochs, seed=seed)


def glyph_rate(clf, images):
    """Percentage of images assigned to any glyph class."""
    return 100.0 * float(np.mean(clf.predict(images) != NON_GLYPH))


# -- training helpers -------------------------------------------------------

def _phase(cfg, epochs):
    return PhaseConfig(lr=cfg.lr, batch_size=cfg.batch_size, max_epochs=epochs, early_stop=False)


def train_real_model(images, cfg, seed):
    run = TrainRun(private=DataSource(images, name="private"), phase2=_phase(cfg, cfg.epochs),
                   private_epochs=cfg.epochs, hidden=cfg.hidden)
    return train_syngen(run, seed)


def train_noise_model(cfg, seed):
    images = generate_batch("salt-pepper", cfg.n_train, seed)
    run = TrainRun(private=DataSource(images, name="salt-pepper"),
                   phase2=_phase(cfg, cfg.noise_epochs), private_epochs=cfg.noise_epochs,
                   hidden=cfg.hidden)
    return train_syngen(run, seed)


def train_coarse_model(images, cfg, seed):
    synthetic = generate_batch("dead-leaves", cfg.synthetic_n, seed)
    run = TrainRun(private=DataSource(images, name="private"), plan=default_plan(Variant.COARSE),
                   synthetic=DataSource(synthetic, name="synthetic"),
                   phase1=PhaseConfig(lr=cfg.lr, batch_size=cfg.batch_size,
                                      max_epochs=cfg.synthetic_epochs),
                   phase2=_phase(cfg, cfg.epochs), private_epochs=cfg.epochs, hidden=cfg.hidden)
    return train_syngen(run, seed)


# -- protocols --------------------------------------------------------------

@dataclass
class ToySeedResult:
    seed: int
    glyph_rate_real_context: float
    glyph_rate_reversed: float
    ddpm_band_rates: tuple
    fd_real: float
    fd_coarse: float
    fd_reference: float
    seconds: float
    reads: dict = field(default_factory=dict)

    @property
    def margin(self):
        return self.glyph_rate_real_context - self.glyph_rate_reversed


def toy_seed(seed, cfg=None):
    """Stage-switch asymmetry and coarse-vs-real distance for one seed."""
    cfg = cfg or ToyConfig()
    t0 = time.perf_counter()
    train = make_bars16(cfg.n_train, seed)
    test = make_bars16(cfg.n_test, 5_000 + seed)
    grid = SamplerGrid(steps=cfg.sampler_steps)
    real = train_real_model(train.images, cfg, seed)
    noise = train_noise_model(cfg, seed)
    coarse = train_coarse_model(train.images, cfg, seed)
    clf = train_glyph_classifier(seed, epochs=cfg.classifier_epochs)

    half = cfg.n_samples // 2
    rates = {}
    ddpm_band = band_from_ddpm_steps(*DDPM_CONTEXT_STEPS, DdpmSchedule.linear())
    for key, band in (("ctx", CONTEXT_BAND), ("ddpm", ddpm_band)):
        rng = stream(seed, "sampler")
        fwd = stage_switch_sample(real.params, noise.params, band, grid, half, rng)
        rev = stage_switch_sample(noise.params, real.params, band, grid, half, rng)
        rates[key] = (glyph_rate(clf, fwd), glyph_rate(clf, rev))

    extractor = FeatureExtractor.fit(train.images)
    reference = make_bars16(cfg.n_samples, 7_000 + seed).images
    s_real = ddim_sample(real.params, grid, cfg.n_samples, stream(seed, "sampler", 1))
    s_coarse = ddim_sample(coarse.params, grid, cfg.n_samples, stream(seed, "sampler", 1))
    return ToySeedResult(
        seed=seed,
        glyph_rate_real_context=rates["ctx"][0],
        glyph_rate_reversed=rates["ctx"][1],
        ddpm_band_rates=rates["ddpm"],
        fd_real=frechet_feature_distance(extractor, test.images, s_real),
        fd_coarse=frechet_feature_distance(extractor, test.images, s_coarse),
        fd_reference=frechet_feature_distance(extractor, test.images, reference),
        seconds=time.perf_counter() - t0,
        reads={"coarse": coarse.reads},
    )


@dataclass
class DPSeedResult:
    seed: int
    fd_coarse: float
    fd_baseline: float
    eps_coarse: float
    eps_baseline: float
    max_step_eps: float
    steps: int
    noise_multiplier: float
    seconds: float
    reads: dict = field(default_factory=dict)


def dp_run(method, train_images, cfg, seed, synthetic=None):
    """One DP training run; ``method`` is "coarse" or "baseline"."""
    dp = DPConfig(cfg.epsilon, cfg.delta, cfg.clip, cfg.q, cfg.steps,
                  multiplicity=cfg.multiplicity).calibrated()
    phase2 = PhaseConfig(lr=cfg.lr, early_stop=False)
    # train_dp runs ceil(epochs / q) steps; pick epochs so that equals cfg.steps
    epochs = cfg.steps * cfg.q
    private = DataSource(train_images, name="private")
    if method == "baseline":
        run = TrainRun(private=private, dp=dp, phase2=phase2, private_epochs=epochs,
                       hidden=cfg.hidden)
    elif method == "coarse":
        run = TrainRun(private=private, plan=default_plan(Variant.COARSE),
                       synthetic=DataSource(synthetic, name="synthetic"),
                       phase1=PhaseConfig(lr=cfg.lr, max_epochs=cfg.synthetic_epochs),
                       dp=dp, phase2=phase2, private_epochs=epochs, hidden=cfg.hidden)
    else:
        raise ValueError(f"unknown method {method!r}")
    return train_syngen(run, seed), dp


def dp_seed(seed, cfg=None):
    cfg = cfg or DPOrderingConfig()
    t0 = time.perf_counter()
    train = make_bars16(cfg.n_train, seed)
    test = make_bars16(cfg.n_test, 5_000 + seed)
    synthetic = generate_batch("dead-leaves", cfg.synthetic_n, seed)
    extractor = FeatureExtractor.fit(train.images)
    grid = SamplerGrid(steps=cfg.sampler_steps)
    out = {}
    for method in ("coarse", "baseline"):
        res, dp = dp_run(method, train.images, cfg, seed, synthetic)
        samples = ddim_sample(res.params, grid, cfg.n_samples, stream(seed, "sampler", 1))
        step_eps = [r["epsilon_so_far"] for r in res.metrics if r["phase"] == "private"]
        out[method] = (res, frechet_feature_distance(extractor, test.images, samples), step_eps)
        log.info("seed %d %s: fd %.3f", seed, method, out[method][1])
    return DPSeedResult(
        seed=seed,
        fd_coarse=out["coarse"][1],
        fd_baseline=out["baseline"][1],
        eps_coarse=out["coarse"][0].ledger.epsilon(cfg.delta),
        eps_baseline=out["baseline"][0].ledger.epsilon(cfg.delta),
        max_step_eps=max(max(v[2]) for v in out.values()),
        steps=out["coarse"][0].ledger.steps,
        noise_multiplier=dp.noise_multiplier,
        seconds=time.perf_counter() - t0,
        reads={m: v[0].reads for m, v in out.items()},
    )


def scaled(cfg, **overrides):
    return replace(cfg, **overrides)


def mean(values):
    values = list(values)
    return math.fsum(values) / len(values)
