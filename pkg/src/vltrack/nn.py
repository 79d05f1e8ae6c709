"""Small neural-network layer toolkit on top of the autodiff core.

Parameters are named hierarchically and initialized from streams derived
per parameter name, so initialization is independent of construction order.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import functional as F
from .autodiff import ConfigurationError, Tensor
from .rng import derive_rng


class Parameter(Tensor):
    """A trainable tensor with an attached initialization spec."""

    def __init__(self, shape, init=("zeros",)):
        super().__init__(np.zeros(shape), requires_grad=True)
        self.init = init


class Module:
    """Base class with parameter/buffer discovery and train/eval mode."""

    def __init__(self):
        self.training = True
        self._buffers = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float64)

    def _children(self):
        for name in sorted(vars(self)):
            value = getattr(self, name)
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, Parameter):
                yield name, value

    def named_parameters(self, prefix: str = ""):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(f"{full}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, value in sorted(self._buffers.items()):
            yield f"{prefix}{name}", value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def initialize(self, seed: int) -> None:
        """Fill every parameter from a stream derived from (seed, its name)."""
        for name, p in self.named_parameters():
            rng = derive_rng(seed, "param", name)
            kind = p.init[0]
            if kind == "zeros":
                p.data[...] = 0.0
            elif kind == "ones":
                p.data[...] = 1.0
            elif kind == "normal":
                p.data[...] = rng.normal(0.0, p.init[1], size=p.shape)
            else:
                raise ConfigurationError(f"unknown init spec {p.init!r} for {name}")
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_arrays(self) -> dict:
        """All parameters and buffers as a flat name -> ndarray dict."""
        out = {f"param.{n}": p.data for n, p in self.named_parameters()}
        out.update({f"buffer.{n}": b for n, b in self.named_buffers()})
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for n, p in self.named_parameters():
            src = arrays[f"param.{n}"]
            if src.shape != p.data.shape:
                raise ConfigurationError(
                    f"checkpoint shape mismatch for {n}: {src.shape} vs {p.data.shape}")
            p.data[...] = src
        for n, b in self.named_buffers():
            b[...] = arrays[f"buffer.{n}"]


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._modules = list(modules)
        for i, m in enumerate(self._modules):
            setattr(self, f"{i:03d}", m)

    def __iter__(self):
        return iter(self._modules)

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return self._modules[i]


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.weight = Parameter((in_dim, out_dim), init=("normal", 1.0 / np.sqrt(in_dim)))
        self.bias = Parameter((out_dim,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, groups: int = 1, bias: bool = True):
        super().__init__()
        if in_channels % groups != 0 or out_channels % groups != 0:
            raise ConfigurationError(
                f"channels ({in_channels}->{out_channels}) not divisible by groups {groups}")
        fan_in = (in_channels // groups) * kernel * kernel
        self.weight = Parameter((out_channels, in_channels // groups, kernel, kernel),
                                init=("normal", 1.0 / np.sqrt(fan_in)))
        self.bias = Parameter((out_channels,)) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.conv2d(x, self.weight, self.stride, self.padding, self.groups)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = Parameter((dim,), init=("ones",))
        self.beta = Parameter((dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm(Module):
    """Per-channel batch normalization; ``channel_axis`` selects the layout."""

    def __init__(self, channels: int, channel_axis: int = 1,
                 momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter((channels,), init=("ones",))
        self.beta = Parameter((channels,))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.channel_axis = channel_axis
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta,
                            self._buffers["running_mean"], self._buffers["running_var"],
                            training=self.training, momentum=self.momentum,
                            eps=self.eps, channel_axis=self.channel_axis)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int):
        super().__init__()
        self.weight = Parameter((num_embeddings, dim), init=("normal", 0.02))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.embedding(self.weight, ids)


class Mlp(Module):
    """Two-layer feed-forward block with ReLU and a hidden expansion ratio."""

    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = max(1, int(round(dim * ratio)))
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         mask: np.ndarray | None = None):
    """Scaled dot-product attention over (B, N, D) projections.

    Returns (output, attention weights), weights shaped (B, heads, N, M).

    ``mask`` is a boolean (B, M) array marking valid key positions; invalid
    keys receive an additive -1e30 logit, which zeroes their weights exactly
    after the stabilized softmax.
    """
    b, n, d = q.shape
    m = k.shape[1]
    if d % heads != 0:
        raise ConfigurationError(f"dim {d} not divisible by heads {heads}")
    dh = d // heads
    qh = q.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(b, m, heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(b, m, heads, dh).transpose(0, 2, 1, 3)
    logits = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        bias = np.where(mask[:, None, None, :], 0.0, -1e30)
        logits = logits + Tensor(bias)
    weights = ad.softmax(logits, axis=-1)
    out = weights @ vh
    out = out.transpose(0, 2, 1, 3).reshape(b, n, d)
    return out, weights


def global_max_pool(x: Tensor) -> Tensor:
    """Max over all spatial positions of (B, C, H, W) -> (B, C)."""
    b, c = x.shape[0], x.shape[1]
    return x.reshape(b, c, -1).max(axis=-1)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm
