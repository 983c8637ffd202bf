"""Matplotlib figures written next to the CSV outputs (Agg backend, no display)."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import tile  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_curve(curve, path, cleaning=None, coarse=None):
    """alpha_bar and SNR against ln(sigma), with threshold markers."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(curve.ln_sigma, curve.alpha_bar, label="alpha_bar", color="tab:blue")
    ax.set_xlabel("ln sigma")
    ax.set_ylabel("alpha_bar")
    ax2 = ax.twinx()
    ax2.plot(curve.ln_sigma, np.log10(curve.snr), label="log10 SNR", color="tab:orange")
    ax2.set_ylabel("log10 SNR")
    for taus, color in ((cleaning, "tab:green"), (coarse, "tab:red")):
        for tau in taus or ():
            ax.axvline(tau, color=color, ls="--", lw=0.8)
    return _save(fig, path)


def plot_bound_report(report, path):
    rows = report.valid_rows()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    if rows:
        x = [1.0 - r.alpha_bar for r in rows]
        ax.loglog(x, [max(r.gamma_bound, 1e-300) for r in rows], "o-", label="gamma bound")
        ax.loglog(x, [max(r.empirical_p + r.slack, 1e-300) for r in rows], "s--",
                  label="empirical p + slack")
        ax.legend()
    ax.set_xlabel("1 - alpha_bar")
    ax.set_ylabel("probability")
    return _save(fig, path)


def plot_exceedance(result, path, gamma=None):
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(result.steps, result.exceedance)
    ax.axvline(result.N, color="tab:red", ls="--", lw=0.8)
    if gamma is not None:
        ax.axhline(gamma, color="gray", ls=":", lw=0.8)
    ax.set_xlabel("step n")
    ax.set_ylabel("P(||X_n - Y_n|| > nu)")
    return _save(fig, path)


def plot_ledger(rows, path, target=None):
    """Running epsilon per step; ``rows`` as from ``PrivacyLedger.per_step_rows``."""
    fig, ax = plt.subplots(figsize=(5, 3.4))
    rows = list(rows)
    ax.plot([r[0] for r in rows], [r[3] for r in rows])
    if target is not None:
        ax.axhline(target, color="tab:red", ls="--", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("epsilon")
    return _save(fig, path)


def plot_losses(metrics, path):
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for phase in sorted({m["phase"] for m in metrics}):
        loss = [m["loss"] for m in metrics if m["phase"] == phase]
        if any(math.isfinite(v) for v in loss):
            ax.semilogy(loss, label=phase, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if ax.lines:
        ax.legend()
    return _save(fig, path)


def plot_samples(images, path, cols=None):
    mosaic = tile(np.clip(images, 0.0, 1.0), cols)
    h, w = mosaic.shape
    fig, ax = plt.subplots(figsize=(max(2.0, w / 40), max(2.0, h / 40)))
    ax.imshow(mosaic, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.axis("off")
    return _save(fig, path)
