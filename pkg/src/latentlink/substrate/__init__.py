"""Dense-array reverse-mode autodiff engine and the primitives the losses need."""

from . import checkpoint, nn, rng
from .functional import (
    bernoulli_nll,
    categorical_entropy,
    clip_by_global_norm,
    ema_update,
    gaussian_nll,
    kl_balanced,
    kl_categorical,
    sample_categorical,
    straight_through_categorical,
)
from .gradcheck import GradCheckReport, NondeterministicLoss, grad_check
from .optim import Adam
from .params import ParameterSet
from .tensor import (
    Tensor,
    get_default_dtype,
    no_grad,
    precision,
    set_default_dtype,
    stop_gradient,
)

__all__ = [
    "Adam", "GradCheckReport", "NondeterministicLoss", "ParameterSet", "Tensor",
    "bernoulli_nll", "categorical_entropy", "checkpoint", "clip_by_global_norm",
    "ema_update", "gaussian_nll", "get_default_dtype", "grad_check", "kl_balanced",
    "kl_categorical", "nn", "no_grad", "precision", "rng", "sample_categorical",
    "set_default_dtype", "stop_gradient", "straight_through_categorical",
]
