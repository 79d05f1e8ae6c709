"""End-to-end training loop with deterministic, resumable checkpoints.

All per-epoch randomness (pair sampling, crop jitter) is drawn from a
stream derived from (seed, epoch), so resuming from any epoch checkpoint
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ConfigurationError, Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import CropConfig, make_sample
from .losses import total_loss
from .model import Tracker, TrackerConfig, build_tracker, desk_tracker_config
from .nn import clip_grad_norm
from .optim import AdamW, param_groups_for
from .rng import derive_rng
from .text import Vocabulary


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr_backbone: float = 1e-3
    lr_head: float = 1e-3
    lr_decay_epoch: int = 16
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    seed: int = 0
    max_frame_gap: int = 16
    samples_per_sequence: int = 4
    tracker: TrackerConfig = field(default_factory=desk_tracker_config)
    crop: CropConfig = field(default_factory=CropConfig)

    def __post_init__(self):
        if isinstance(self.tracker, dict):
            self.tracker = TrackerConfig.from_dict(self.tracker)
        if isinstance(self.crop, dict):
            self.crop = CropConfig(**self.crop)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.samples_per_sequence < 1:
            raise ConfigurationError("samples_per_sequence must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def full_scale_train_config() -> TrainConfig:
    """The published schedule: 200 epochs, decay to one tenth after epoch 160,
    backbone lr 1e-5, head lr 1e-4, weight decay 1e-4, batch 16."""
    from .model import full_scale_tracker_config
    return TrainConfig(epochs=200, batch_size=16, lr_backbone=1e-5, lr_head=1e-4,
                       lr_decay_epoch=160, weight_decay=1e-4,
                       tracker=full_scale_tracker_config())


def collate(samples: list) -> dict:
    return {
        "template": Tensor(np.stack([s.template for s in samples])),
        "search": Tensor(np.stack([s.search for s in samples])),
        "ids": np.stack([s.tokens.ids for s in samples]),
        "mask": np.stack([s.tokens.mask for s in samples]),
        "gt": np.stack([s.gt_box for s in samples]),
        "sample_ids": [s.sample_id for s in samples],
    }


def train_step(model: Tracker, batch: dict, optimizer: AdamW,
               grad_clip: float) -> dict:
    """One forward/backward/update step; returns the loss components."""
    weights = model.cfg.loss
    out = model(batch["template"], batch["search"], batch["ids"], batch["mask"],
                compute_score=weights.lambda_dm > 0)
    loss, components = total_loss(out["box"], batch["gt"], out.get("score"), weights)
    if not np.isfinite(loss.item()):
        raise RuntimeError(
            f"non-finite loss {components}; offending batch: {batch['sample_ids']}")
    optimizer.zero_grad()
    loss.backward()
    params = [p for g in optimizer.groups for _, p in g["params"]]
    components["grad_norm"] = clip_grad_norm(params, grad_clip)
    optimizer.step()
    return components


def _epoch_samples(sequences: list, cfg: TrainConfig, vocab: Vocabulary,
                   epoch: int) -> list:
    """Deterministic sample list for one epoch: ``samples_per_sequence``
    frame pairs drawn from each sequence, in shuffled sequence order."""
    rng = derive_rng(cfg.seed, "epoch", str(epoch))
    order = rng.permutation(np.repeat(np.arange(len(sequences)),
                                      cfg.samples_per_sequence))
    bcfg = cfg.tracker.backbone
    samples = []
    for idx in order:
        seq = sequences[idx]
        n = len(seq)
        t_frame = int(rng.integers(0, n))
        lo = max(0, t_frame - cfg.max_frame_gap)
        hi = min(n, t_frame + cfg.max_frame_gap + 1)
        s_frame = int(rng.integers(lo, hi))
        samples.append(make_sample(seq, t_frame, s_frame, cfg.crop,
                                   bcfg.template_size, bcfg.search_size,
                                   vocab, bcfg.text_plan.max_len,
                                   train=True, rng=rng))
    return samples


def _set_epoch_lr(optimizer: AdamW, cfg: TrainConfig, epoch: int) -> None:
    base = {"backbone": cfg.lr_backbone, "head": cfg.lr_head}
    for group in optimizer.groups:
        lr = base[group["name"]]
        group["lr"] = lr / 10.0 if epoch > cfg.lr_decay_epoch else lr


def _save(stem, model, optimizer, cfg, epoch):
    arrays = model.state_arrays()
    arrays.update(optimizer.state_arrays())
    save_checkpoint(stem, arrays, meta={
        "epoch": epoch,
        "train_config": cfg.to_dict(),
    })


def load_model(stem: str, vocab: Vocabulary | None = None) -> tuple:
    """Rebuild a tracker (and its TrainConfig) from a checkpoint stem."""
    arrays, meta = load_checkpoint(stem)
    cfg = TrainConfig.from_dict(meta["train_config"])
    vocab = vocab or Vocabulary.default()
    model = Tracker(cfg.tracker, vocab)
    model.load_state_arrays(arrays)
    model.eval()
    return model, cfg, arrays, meta


def fit(cfg: TrainConfig, sequences: list, out_dir: str,
        vocab: Vocabulary | None = None,
        resume_from: str | None = None,
        keep_epoch_checkpoints: bool = True) -> tuple:
    """Train a tracker; returns (model, final checkpoint stem).

    A checkpoint (parameters, batch-norm buffers, optimizer state) is
    written each epoch; ``resume_from`` continues a run so that the final
    state is bit-identical to the uninterrupted one.
    """
    if not sequences:
        raise ConfigurationError("training dataset is empty")
    os.makedirs(out_dir, exist_ok=True)
    vocab = vocab or Vocabulary.default()
    model = build_tracker(cfg.tracker, vocab, seed=cfg.seed)
    optimizer = AdamW(param_groups_for(model, cfg.lr_backbone, cfg.lr_head),
                      weight_decay=cfg.weight_decay)
    start_epoch = 1
    if resume_from is not None:
        arrays, meta = load_checkpoint(resume_from)
        # normalize through JSON so tuple/list differences do not matter
        if meta["train_config"] != json.loads(json.dumps(cfg.to_dict())):
            raise CheckpointError("resume config does not match checkpoint config")
        model.load_state_arrays(arrays)
        optimizer.load_state_arrays(arrays)
        start_epoch = meta["epoch"] + 1

    log_path = os.path.join(out_dir, "loss_log.csv")
    if start_epoch == 1:
        with open(log_path, "w") as fh:
            fh.write("epoch,step,giou,l1,dm,total\n")

    model.train()
    for epoch in range(start_epoch, cfg.epochs + 1):
        _set_epoch_lr(optimizer, cfg, epoch)
        samples = _epoch_samples(sequences, cfg, vocab, epoch)
        with open(log_path, "a") as fh:
            for step, lo in enumerate(range(0, len(samples), cfg.batch_size)):
                batch = collate(samples[lo:lo + cfg.batch_size])
                comps = train_step(model, batch, optimizer, cfg.grad_clip)
                fh.write(f"{epoch},{step},{comps['giou']:.6f},{comps['l1']:.6f},"
                         f"{comps['dm']:.6f},{comps['total']:.6f}\n")
        if keep_epoch_checkpoints:
            _save(os.path.join(out_dir, f"checkpoint_{epoch:04d}"),
                  model, optimizer, cfg, epoch)

    final_stem = os.path.join(out_dir, "checkpoint_final")
    _save(final_stem, model, optimizer, cfg, cfg.epochs)
    model.eval()
    return model, final_stem
