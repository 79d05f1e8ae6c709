"""Box regression and dense image-text matching losses.

Boxes are (x_tl, y_tl, x_br, y_br) in normalized search coordinates.  The
dense matching score is the cosine similarity between every location of the
final search feature and the sentence vector (CLS token by default),
bilinearly upsampled; its supervision is an inside-the-box binary mask and
a temperature-scaled binary cross-entropy, reduced by mean so the weight is
stable across upsample sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import functional as F
from .autodiff import ConfigurationError, Tensor


@dataclass
class LossWeights:
    """Loss mixing weights and dense matching hyperparameters."""
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0
    lambda_dm: float = 1.0
    tau: float = 0.07
    up_h: int = 40
    up_w: int = 40
    text_pooling: str = "cls"  # or "mean"

    def __post_init__(self):
        if min(self.lambda_giou, self.lambda_l1, self.lambda_dm) < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.tau <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.tau}")


def l1_box_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute coordinate difference, averaged over batch and coords."""
    diff = pred - gt
    return ad.maximum(diff, -diff).mean()


def _box_area(box: Tensor) -> Tensor:
    w = ad.relu(box[:, 2] - box[:, 0])
    h = ad.relu(box[:, 3] - box[:, 1])
    return w * h


def giou_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """1 - GIoU, averaged over the batch; tolerates degenerate predictions
    (negative extents count as zero area)."""
    ix_tl = ad.maximum(pred[:, 0], gt[:, 0])
    iy_tl = ad.maximum(pred[:, 1], gt[:, 1])
    ix_br = ad.minimum(pred[:, 2], gt[:, 2])
    iy_br = ad.minimum(pred[:, 3], gt[:, 3])
    inter = ad.relu(ix_br - ix_tl) * ad.relu(iy_br - iy_tl)
    union = _box_area(pred) + _box_area(gt) - inter
    iou = inter / ad.maximum(union, 1e-12)

    cx_tl = ad.minimum(pred[:, 0], gt[:, 0])
    cy_tl = ad.minimum(pred[:, 1], gt[:, 1])
    cx_br = ad.maximum(pred[:, 2], gt[:, 2])
    cy_br = ad.maximum(pred[:, 3], gt[:, 3])
    enclosing = (cx_br - cx_tl) * (cy_br - cy_tl)
    giou = iou - (enclosing - union) / ad.maximum(enclosing, 1e-12)
    return (1.0 - giou).mean()


def dense_matching_score(search_feat: Tensor, text_feat: Tensor,
                         weights: LossWeights) -> Tensor:
    """Per-location cosine map between search features and the sentence vector,
    upsampled to (up_h, up_w).  Returns (B, up_h, up_w) in [-1, 1]."""
    b, c = search_feat.shape[0], search_feat.shape[1]
    if text_feat.shape[-1] != c:
        raise ConfigurationError(
            f"channel mismatch: search {c} vs text {text_feat.shape[-1]}")
    if weights.text_pooling == "cls":
        sentence = text_feat[:, 0, :]
    elif weights.text_pooling == "mean":
        sentence = text_feat.mean(axis=1)
    else:
        raise ConfigurationError(f"unknown text pooling {weights.text_pooling!r}")
    sentence = F.l2_normalize(sentence, axis=-1)
    feat = F.l2_normalize(search_feat, axis=1)
    cos = (feat * sentence.reshape(b, c, 1, 1)).sum(axis=1)  # (B, H, W)
    up = ad.bilinear_resize(cos.reshape(b, 1, cos.shape[1], cos.shape[2]),
                            weights.up_h, weights.up_w)
    return up.reshape(b, weights.up_h, weights.up_w)


def dense_label(gt_box: np.ndarray, up_h: int, up_w: int) -> np.ndarray:
    """Binary (B, up_h, up_w) mask: 1 where the cell center falls inside the
    half-open box [x_tl, x_br) x [y_tl, y_br)."""
    gt_box = np.atleast_2d(np.asarray(gt_box, dtype=np.float64))
    b = gt_box.shape[0]
    cx = (np.arange(up_w) + 0.5) / up_w
    cy = (np.arange(up_h) + 0.5) / up_h
    in_x = (cx[None, None, :] >= gt_box[:, 0, None, None]) & \
           (cx[None, None, :] < gt_box[:, 2, None, None])
    in_y = (cy[None, :, None] >= gt_box[:, 1, None, None]) & \
           (cy[None, :, None] < gt_box[:, 3, None, None])
    return (in_x & in_y).astype(np.float64).reshape(b, up_h, up_w)


def dense_matching_loss(score: Tensor, gt_box: np.ndarray,
                        weights: LossWeights) -> Tensor:
    """Mean binary cross-entropy between sigmoid(score / tau) and the
    inside-the-box mask, over every upsampled cell."""
    label = dense_label(gt_box, score.shape[1], score.shape[2])
    z = score * (1.0 / weights.tau)
    # BCE(sigmoid(z), y) = softplus(z) - y * z, stable in both tails
    return (ad.softplus(z) - Tensor(label) * z).mean()


def total_loss(pred_box: Tensor, gt_box: np.ndarray, score: Tensor | None,
               weights: LossWeights) -> tuple:
    """Weighted sum of GIoU, L1 and dense matching losses.

    Returns (total, components dict of floats).  The dense term is skipped
    entirely when its weight is zero.
    """
    gt = Tensor(np.atleast_2d(gt_box))
    l_giou = giou_loss(pred_box, gt)
    l_l1 = l1_box_loss(pred_box, gt)
    total = weights.lambda_giou * l_giou + weights.lambda_l1 * l_l1
    components = {"giou": l_giou.item(), "l1": l_l1.item()}
    if weights.lambda_dm > 0:
        if score is None:
            raise ConfigurationError("dense matching weight is nonzero but no score given")
        l_dm = dense_matching_loss(score, gt_box, weights)
        total = total + weights.lambda_dm * l_dm
        components["dm"] = l_dm.item()
    else:
        components["dm"] = 0.0
    components["total"] = total.item()
    return total, components
