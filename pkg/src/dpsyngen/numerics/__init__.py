"""Tensors, reverse-mode autodiff, the MLP denoiser and Adam."""

from .autodiff import Var
from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import (
    SIGMA_DATA,
    DenoiserParams,
    denoise,
    denoise_graph,
    denoise_rows,
    edm_coefficients,
    flat_grad,
    init_denoiser,
    weight_vars,
    zero_params_like,
)
from .grad import GradientVector, finite_difference_grad, loss_and_grad, per_sample_gradients
from .optim import AdamState, adam_step

__all__ = [
    "SIGMA_DATA", "AdamState", "DenoiserParams", "GradientVector", "Var", "adam_step",
    "denoise", "denoise_graph", "denoise_rows", "edm_coefficients", "finite_difference_grad",
    "flat_grad", "init_denoiser", "load_checkpoint", "loss_and_grad", "per_sample_gradients",
    "save_checkpoint", "weight_vars", "zero_params_like",
]
