"""The sigma-conditioned MLP denoiser with EDM preconditioning.

The network sees images in the variance-preserving parameterization
``x = (x0 + sigma * eta) / sqrt(1 + sigma^2)``. The EDM preconditioning
constants are defined for the unscaled state ``x0 + sigma * eta``, so the
input is rescaled by ``sqrt(1 + sigma^2)`` before they are applied:

    D(x, sigma) = c_skip * u + c_out * F(c_in * u, c_noise),  u = sqrt(1 + sigma^2) * x
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError, RejectedInputError
from . import autodiff as ad

SIGMA_DATA = 0.5


def edm_coefficients(sigma, sigma_data=SIGMA_DATA):
    """Return ``(c_skip, c_out, c_in, c_noise)`` for noise level(s) ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    s2 = sigma * sigma + sigma_data * sigma_data
    c_skip = sigma_data**2 / s2
    c_out = sigma * sigma_data / np.sqrt(s2)
    c_in = 1.0 / np.sqrt(s2)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


@dataclass
class DenoiserParams:
    """Flat parameter vector of the MLP plus its fixed architecture.

    ``theta`` holds every trainable weight and bias; ``freqs`` are the
    Fourier-feature frequencies of the log-sigma embedding and never change
    after construction.
    """

    image_shape: tuple
    hidden: tuple
    freqs: np.ndarray
    theta: np.ndarray
    num_classes: int = 0
    sigma_data: float = SIGMA_DATA
    _layout: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        self._layout = _layout(self.layer_sizes)
        expected = self._layout[-1][4] if self._layout else 0
        if self.theta.size != expected:
            raise RejectedInputError(
                f"theta has {self.theta.size} entries, architecture needs {expected}")

    @property
    def pixels(self):
        return int(np.prod(self.image_shape))

    @property
    def embed_dim(self):
        return 2 * len(self.freqs)

    @property
    def layer_sizes(self):
        d_in = self.pixels + self.embed_dim + self.num_classes
        return [d_in, *self.hidden, self.pixels]

    @property
    def size(self):
        return self.theta.size

    def layers(self, theta=None):
        """Yield ``(W, b)`` views into ``theta`` (defaults to own parameters)."""
        theta = self.theta if theta is None else theta
        for d_in, d_out, lo, mid, hi in self._layout:
            yield theta[lo:mid].reshape(d_in, d_out), theta[mid:hi].reshape(1, d_out)

    def with_theta(self, theta):
        return DenoiserParams(self.image_shape, self.hidden, self.freqs, theta,
                              self.num_classes, self.sigma_data)

    def copy(self):
        return self.with_theta(self.theta.copy())


def _layout(sizes):
    # one (d_in, d_out, w_start, b_start, end) record per dense layer
    out = []
    offset = 0
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        b_start = offset + d_in * d_out
        out.append((d_in, d_out, offset, b_start, b_start + d_out))
        offset = b_start + d_out
    return out


def init_denoiser(image_shape, hidden=(256, 256, 256), n_fourier=16,
                  num_classes=0, rng=None, fourier_scale=1.0, sigma_data=SIGMA_DATA):
    """Build seed-initialized denoiser parameters.

    Weights are drawn from N(0, 1/fan_in); biases start at zero. The output
    layer is scaled down by 10 so the untrained denoiser starts close to the
    skip connection.
    """
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    freqs = rng.normal(0.0, fourier_scale, size=n_fourier)
    pixels = int(np.prod(image_shape))
    sizes = [pixels + 2 * n_fourier + num_classes, *hidden, pixels]
    chunks = []
    for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
        if i == len(sizes) - 2:
            w *= 0.1
        chunks.extend([w.ravel(), np.zeros(d_out)])
    return DenoiserParams(image_shape, hidden, freqs, np.concatenate(chunks),
                          num_classes, sigma_data)


def zero_params_like(params):
    return params.with_theta(np.zeros_like(params.theta))


def sigma_embedding(params, sigmas):
    """Fourier features of ``c_noise = ln(sigma)/4`` for each row."""
    c_noise = np.log(np.asarray(sigmas, dtype=np.float64)) / 4.0
    phase = 2.0 * np.pi * np.outer(c_noise, params.freqs)
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=1)


def _check_inputs(params, x_rows, sigmas):
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if not np.all(np.isfinite(sigmas)):
        raise RejectedInputError("sigma must be finite")
    if np.any(sigmas <= 0):
        raise RejectedInputError("sigma must be positive")
    if x_rows.ndim != 2 or x_rows.shape[1] != params.pixels:
        raise RejectedInputError(
            f"expected rows of {params.pixels} pixels, got shape {x_rows.shape}")
    return sigmas


def _one_hot(labels, num_classes, n):
    out = np.zeros((n, num_classes))
    if labels is not None:
        out[np.arange(n), np.asarray(labels, dtype=int)] = 1.0
    return out


def denoise_graph(params, weight_vars, x_rows, sigmas, labels=None):
    """Differentiable denoiser over a batch of flattened rows.

    Args:
        params: architecture (weights are taken from ``weight_vars``).
        weight_vars: list of ``(W, b)`` :class:`Var` pairs.
        x_rows: (n, pixels) array of scaled noisy images.
        sigmas: (n,) noise levels, one per row.
        labels: optional (n,) integer class ids for conditional models.

    Returns:
        (n, pixels) :class:`Var` of denoised rows.
    """
    sigmas = _check_inputs(params, x_rows, sigmas)
    n = x_rows.shape[0]
    c_skip, c_out, c_in, _ = edm_coefficients(sigmas, params.sigma_data)
    u = x_rows * np.sqrt(1.0 + sigmas * sigmas)[:, None]
    feats = [u * c_in[:, None], sigma_embedding(params, sigmas)]
    if params.num_classes:
        feats.append(_one_hot(labels, params.num_classes, n))
    h = ad.constant(np.concatenate(feats, axis=1))
    last = len(weight_vars) - 1
    for i, (w, b) in enumerate(weight_vars):
        h = h @ w + b
        if i < last:
            h = ad.silu(h)
    return ad.constant(c_skip[:, None] * u) + h * ad.constant(c_out[:, None])


def weight_vars(params, theta=None, requires_grad=True):
    return [(ad.Var(w, requires_grad), ad.Var(b, requires_grad))
            for w, b in params.layers(theta)]


def flat_grad(params, wvars):
    parts = []
    for w, b in wvars:
        for v in (w, b):
            parts.append(np.zeros(v.value.size) if v.grad is None else v.grad.ravel())
    return np.concatenate(parts)


def denoise_rows(params, x_rows, sigmas, labels=None):
    """Non-differentiable batched forward pass (plain numpy)."""
    x_rows = np.asarray(x_rows, dtype=np.float64)
    sigmas = _check_inputs(params, x_rows, sigmas)
    n = x_rows.shape[0]
    c_skip, c_out, c_in, _ = edm_coefficients(sigmas, params.sigma_data)
    u = x_rows * np.sqrt(1.0 + sigmas * sigmas)[:, None]
    feats = [u * c_in[:, None], sigma_embedding(params, sigmas)]
    if params.num_classes:
        feats.append(_one_hot(labels, params.num_classes, n))
    h = np.concatenate(feats, axis=1)
    layers = list(params.layers())
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = h * (0.5 * (1.0 + np.tanh(0.5 * h)))
    out = c_skip[:, None] * u + c_out[:, None] * h
    if not np.all(np.isfinite(out)):
        raise NumericalError("denoiser produced non-finite output")
    return out


def denoise(params, x, sigma, label=None):
    """Denoise a single image ``x`` (shape ``params.image_shape``) at ``sigma``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != params.image_shape:
        raise RejectedInputError(f"image shape {x.shape} != model shape {params.image_shape}")
    if not np.isfinite(sigma):
        raise RejectedInputError("sigma must be finite")
    labels = None if label is None else [label]
    out = denoise_rows(params, x.reshape(1, -1), [float(sigma)], labels)
    return out.reshape(params.image_shape)
