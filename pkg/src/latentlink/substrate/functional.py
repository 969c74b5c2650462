"""Probability and parameter-tracking primitives used by the training losses."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParameterSet
from .tensor import Tensor, stop_gradient


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one class per row of ``probs`` (last axis), returned as one-hot."""
    u = rng.random(probs.shape[:-1] + (1,))
    idx = (np.cumsum(probs, axis=-1) < u).sum(axis=-1)
    idx = np.minimum(idx, probs.shape[-1] - 1)
    out = np.zeros_like(probs)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def straight_through_categorical(logits, rng: np.random.Generator, straight_through: bool = True) -> Tensor:
    """One-hot sample per group (last axis holds classes).

    The forward value is the sample; the backward pass treats it as
    ``softmax(logits)``. With ``straight_through=False`` the sample is a
    constant and no gradient reaches the logits.
    """
    logits = T.as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("logits must be finite")
    probs = T.softmax(logits, axis=-1)
    hard = sample_categorical(probs.data, rng)
    if not straight_through:
        return Tensor(hard, dtype=probs.data.dtype)
    return T.straight_through(probs, hard)


def kl_categorical(q_logits, p_logits) -> Tensor:
    """KL(softmax(q) || softmax(p)) over the last axis, summed over the group axis.

    Inputs of shape (..., groups, classes) give an output of shape (...).
    """
    q_logits, p_logits = T.as_tensor(q_logits), T.as_tensor(p_logits)
    if q_logits.shape != p_logits.shape:
        raise ValueError(f"shape mismatch: {q_logits.shape} vs {p_logits.shape}")
    log_q = T.log_softmax(q_logits, axis=-1)
    log_p = T.log_softmax(p_logits, axis=-1)
    per_group = T.sum_(T.exp(log_q) * (log_q - log_p), axis=-1)
    return T.sum_(per_group, axis=-1)


def kl_balanced(q_logits, p_logits, mix: float) -> Tensor:
    """``mix * KL(sg(q)||p) + (1 - mix) * KL(q||sg(p))``.

    The value equals KL(q||p) for any ``mix``; the prior receives ``mix`` of
    the gradient and the posterior the remainder.
    """
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    toward_prior = kl_categorical(stop_gradient(q_logits), p_logits)
    toward_post = kl_categorical(q_logits, stop_gradient(p_logits))
    return mix * toward_prior + (1.0 - mix) * toward_post


def categorical_entropy(logits) -> Tensor:
    log_p = T.log_softmax(logits, axis=-1)
    return -T.sum_(T.exp(log_p) * log_p, axis=-1)


def ema_update(target: ParameterSet, online: ParameterSet, decay: float) -> ParameterSet:
    """In place: ``target <- decay * target + (1 - decay) * online``."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    target.check_compatible(online)
    for name, t in target.items():
        t.data = (decay * t.data + (1.0 - decay) * online[name].data).astype(t.data.dtype)
    target.bump()
    return target


def clip_by_global_norm(params: ParameterSet, max_norm: float) -> float:
    """Rescale gradients so their joint L2 norm is at most ``max_norm``; return the pre-clip norm."""
    grads = [t.grad for t in params.values() if t.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


def gaussian_nll(pred, target) -> Tensor:
    """Negative log-likelihood of ``target`` under N(pred, 1)."""
    diff = T.as_tensor(pred) - target
    return 0.5 * diff * diff + 0.5 * np.log(2.0 * np.pi)


def bernoulli_nll(logits, target) -> Tensor:
    """Binary cross-entropy from logits; ``target`` may be a soft label in [0, 1]."""
    logits = T.as_tensor(logits)
    return T.softplus(logits) - logits * target
