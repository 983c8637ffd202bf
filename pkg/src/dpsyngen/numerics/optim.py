"""Adam with bias correction over flat parameter vectors."""

from dataclasses import dataclass, replace

import numpy as np

from ..errors import RejectedInputError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kw):
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(state, params, grad):
    """Apply one Adam update; returns ``(new_params, new_state)``.

    ``params`` may be a :class:`DenoiserParams` or anything exposing ``theta``
    and ``with_theta``. ``grad`` is a :class:`GradientVector` or flat array.
    """
    g = np.asarray(getattr(grad, "values", grad), dtype=np.float64)
    if g.shape != params.theta.shape or state.m.shape != g.shape:
        raise RejectedInputError(
            f"gradient of length {g.size} does not match {params.theta.size} parameters")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    theta = params.theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_theta(theta), replace(state, m=m, v=v, step=t)
