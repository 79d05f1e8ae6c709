"""Composite differentiable operations built on the autodiff primitives."""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ConfigurationError


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be > 0, got {eps}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / ad.sqrt(var + eps)
    return normed * gamma + beta


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5,
               channel_axis: int = 1) -> Tensor:
    """Batch normalization with per-channel statistics.

    In training mode statistics are computed over all axes except
    ``channel_axis`` and the running buffers are updated in place; in
    inference mode the running buffers are used.  A training batch of one
    sample falls back to per-instance statistics (same reduction) with a
    warning.
    """
    if eps <= 0:
        raise ConfigurationError(f"batch_norm eps must be > 0, got {eps}")
    axes = tuple(i for i in range(x.ndim) if i != channel_axis)
    shape = [1] * x.ndim
    shape[channel_axis] = x.shape[channel_axis]
    if training:
        if x.shape[0] == 1:
            warnings.warn("batch_norm with batch size 1 in training mode: "
                          "falling back to per-instance statistics")
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu.data.reshape(-1)
        running_var *= (1.0 - momentum)
        running_var += momentum * var.data.reshape(-1)
        normed = centered / ad.sqrt(var + eps)
    else:
        mu = Tensor(running_mean.reshape(shape))
        var = Tensor(running_var.reshape(shape))
        normed = (x - mu) / ad.sqrt(var + eps)
    return normed * gamma.reshape(shape) + beta.reshape(shape)


def normalize(x: Tensor, mode: str, gamma: Tensor, beta: Tensor,
              eps: float = 1e-6, **kwargs) -> Tensor:
    """Dispatch between layer and batch normalization by name."""
    if mode == "layer":
        return layer_norm(x, gamma, beta, eps)
    if mode == "batch":
        return batch_norm(x, gamma, beta, eps=eps, **kwargs)
    raise ConfigurationError(f"unknown normalization mode {mode!r}")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale to unit L2 norm along ``axis``; inputs below ``eps`` map near zero."""
    if eps <= 0:
        raise ConfigurationError(f"l2_normalize eps must be > 0, got {eps}")
    norm = ad.sqrt((x * x).sum(axis=axis, keepdims=True))
    return x / ad.maximum(norm, eps)
