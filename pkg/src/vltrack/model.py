"""The full tracker model: backbone, corner head and dense matching score."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .autodiff import Tensor
from .backbone import Backbone, BackboneConfig, desk_config, full_scale_config
from .head import CornerHead, corner_boxes
from .losses import LossWeights, dense_matching_score
from .text import Vocabulary


@dataclass
class TrackerConfig:
    backbone: BackboneConfig = field(default_factory=desk_config)
    head_depth: int = 4
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig.from_dict(self.backbone)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        return cls(**d)


def desk_tracker_config() -> TrackerConfig:
    cfg = TrackerConfig()
    # desk dense map is 2x the 4x4 final search grid, mirroring the
    # full-scale 20 -> 40 upsample ratio
    cfg.loss.up_h = cfg.loss.up_w = 8
    return cfg


def full_scale_tracker_config() -> TrackerConfig:
    return TrackerConfig(backbone=full_scale_config())


class Tracker(nn.Module):
    """End-to-end model mapping (template, search, text) to a box and score map."""

    def __init__(self, cfg: TrackerConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.backbone = Backbone(cfg.backbone, len(vocab))
        self.head = CornerHead(cfg.backbone.stages[-1].channels, cfg.head_depth)

    def __call__(self, template_img: Tensor, search_img: Tensor,
                 ids: np.ndarray, mask: np.ndarray,
                 compute_score: bool = True,
                 collect_diagnostics: bool = False) -> dict:
        template_feat, search_feat, text_feat, diagnostics = self.backbone(
            template_img, search_img, ids, mask,
            collect_diagnostics=collect_diagnostics)
        tl_prob, br_prob = self.head(search_feat)
        box = corner_boxes(tl_prob, br_prob)
        out = {
            "box": box,
            "tl_prob": tl_prob,
            "br_prob": br_prob,
            "template_feat": template_feat,
            "search_feat": search_feat,
            "text_feat": text_feat,
            "diagnostics": diagnostics,
        }
        if compute_score:
            out["score"] = dense_matching_score(search_feat, text_feat, self.cfg.loss)
            if collect_diagnostics:
                diagnostics["dense_score"] = out["score"].data
        return out


def build_tracker(cfg: TrackerConfig | None = None,
                  vocab: Vocabulary | None = None,
                  seed: int = 0) -> Tracker:
    """Construct and deterministically initialize a tracker."""
    cfg = cfg or desk_tracker_config()
    vocab = vocab or Vocabulary.default()
    model = Tracker(cfg, vocab)
    model.initialize(seed)
    return model
