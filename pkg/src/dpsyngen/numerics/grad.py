"""Gradient carriers and per-example gradient extraction."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError
from .denoiser import flat_grad, weight_vars


@dataclass(frozen=True)
class GradientVector:
    """Flat, parameter-aligned gradient with its Euclidean norm cached."""

    values: np.ndarray
    norm: float = field(init=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "norm", float(np.linalg.norm(values)))

    def __len__(self):
        return self.values.size

    def scaled(self, factor):
        return GradientVector(self.values * factor)


def loss_and_grad(params, loss_fn, example):
    """Evaluate ``loss_fn(params, wvars, example)`` and its flat gradient."""
    wvars = weight_vars(params)
    loss = loss_fn(params, wvars, example)
    value = float(loss.value)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    loss.backward()
    return value, flat_grad(params, wvars)


def per_sample_gradients(params, loss_fn, batch):
    """One gradient per example, each computed from that example's loss alone.

    ``loss_fn(params, wvars, example)`` must return a scalar :class:`Var`
    built from the weight variables ``wvars``.
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    grads = []
    for i, example in enumerate(batch):
        try:
            _, g = loss_and_grad(params, loss_fn, example)
        except NumericalError as exc:
            raise NumericalError(f"example {i}: {exc}") from exc
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"example {i}: non-finite gradient")
        grads.append(GradientVector(g))
    return grads


def finite_difference_grad(f, theta, step=1e-5, coords=None):
    """Central-difference gradient of scalar ``f(theta)`` on selected coordinates."""
    theta = np.array(theta, dtype=np.float64)
    coords = range(theta.size) if coords is None else coords
    out = {}
    for i in coords:
        orig = theta[i]
        theta[i] = orig + step
        up = f(theta)
        theta[i] = orig - step
        down = f(theta)
        theta[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out
