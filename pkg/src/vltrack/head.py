"""Corner prediction head: spatial probability maps and their expectation.

Two parallel Conv-BN-ReLU stacks map the final search feature to top-left
and bottom-right corner logit maps; a softmax over all positions turns each
into a probability map, and the box is the expectation of the cell-center
coordinates (half-pixel offsets, so cell (j) maps to (j + 0.5) / W).  The
head never clamps or reorders coordinates: a degenerate box early in
training is handed to the loss as-is to keep the map differentiable.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


class CornerHead(nn.Module):
    """Two stacks of Conv-BN-ReLU halving channels down to one logit map."""

    def __init__(self, in_channels: int, depth: int = 4):
        super().__init__()
        self.tl_stack = nn.ModuleList(self._build_stack(in_channels, depth))
        self.br_stack = nn.ModuleList(self._build_stack(in_channels, depth))

    @staticmethod
    def _build_stack(in_channels: int, depth: int):
        layers = []
        ch = in_channels
        for i in range(depth - 1):
            nxt = max(1, ch // 2)
            layers.append(nn.Conv2d(ch, nxt, 3, padding=1))
            layers.append(nn.BatchNorm(nxt))
            ch = nxt
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        return layers

    @staticmethod
    def _run_stack(stack, x: Tensor) -> Tensor:
        n = len(stack)
        for i in range(0, n - 1, 2):
            x = ad.relu(stack[i + 1](stack[i](x)))
        return stack[n - 1](x)

    def __call__(self, search_feat: Tensor):
        """Returns (tl_prob, br_prob), each (B, H, W) and summing to 1."""
        b = search_feat.shape[0]
        h, w = search_feat.shape[2], search_feat.shape[3]
        tl_logits = self._run_stack(self.tl_stack, search_feat).reshape(b, h * w)
        br_logits = self._run_stack(self.br_stack, search_feat).reshape(b, h * w)
        tl = ad.softmax(tl_logits, axis=-1).reshape(b, h, w)
        br = ad.softmax(br_logits, axis=-1).reshape(b, h, w)
        return tl, br


def soft_argmax(prob: Tensor) -> Tensor:
    """Expectation of cell-center coordinates under a (B, H, W) probability map.

    Returns (B, 2) normalized (x, y) in [0, 1].
    """
    b, h, w = prob.shape
    xs = Tensor((np.arange(w) + 0.5) / w)
    ys = Tensor((np.arange(h) + 0.5) / h)
    x = (prob * xs.reshape(1, 1, w)).sum(axis=(1, 2))
    y = (prob * ys.reshape(1, h, 1)).sum(axis=(1, 2))
    return ad.concat([x.reshape(b, 1), y.reshape(b, 1)], axis=1)


def corner_boxes(tl_prob: Tensor, br_prob: Tensor) -> Tensor:
    """Assemble (B, 4) boxes (x_tl, y_tl, x_br, y_br) from two corner maps."""
    tl = soft_argmax(tl_prob)
    br = soft_argmax(br_prob)
    return ad.concat([tl, br], axis=1)
