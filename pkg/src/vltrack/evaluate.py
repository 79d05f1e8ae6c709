"""One-pass tracking inference and one-pass-evaluation (OPE) metrics.

Tracking initializes from the ground-truth box of frame 0 and predicts a
box for every later frame; metrics exclude frame 0 (it is given, not
predicted).  Sequences are independent, so evaluation can fan out over a
thread pool (``VLTRACK_THREADS``) without changing the results.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ConfigurationError, Tensor
from .data import CropConfig, Sequence, back_project, crop_region
from .model import Tracker
from .text import Vocabulary, tokenize

SUCCESS_THRESHOLDS = np.arange(21) * 0.05           # IoU 0.00 .. 1.00
NORM_PREC_THRESHOLDS = np.arange(21) * 0.025        # 0.000 .. 0.500
PRECISION_PX = 20.0


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two corner-form boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def center_error(a: np.ndarray, b: np.ndarray) -> float:
    ca = ((a[0] + a[2]) / 2, (a[1] + a[3]) / 2)
    cb = ((b[0] + b[2]) / 2, (b[1] + b[3]) / 2)
    return float(np.hypot(ca[0] - cb[0], ca[1] - cb[1]))


def normalized_center_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Center distance with each axis scaled by the ground-truth box size."""
    w = max(gt[2] - gt[0], 1e-9)
    h = max(gt[3] - gt[1], 1e-9)
    dx = ((pred[0] + pred[2]) - (gt[0] + gt[2])) / 2 / w
    dy = ((pred[1] + pred[3]) - (gt[1] + gt[3])) / 2 / h
    return float(np.hypot(dx, dy))


def _sanitize(box: np.ndarray, h: int, w: int) -> np.ndarray:
    """Ordered, minimum-size box used to place the next search crop."""
    x1, x2 = sorted((box[0], box[2]))
    y1, y2 = sorted((box[1], box[3]))
    cx = np.clip((x1 + x2) / 2, 0, w)
    cy = np.clip((y1 + y2) / 2, 0, h)
    bw = max(x2 - x1, 2.0)
    bh = max(y2 - y1, 2.0)
    return np.array([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2])


def track_sequence(model: Tracker, seq: Sequence, crop: CropConfig,
                   vocab: Vocabulary) -> np.ndarray:
    """Run the tracker over one sequence; returns (N, 4) predicted boxes.

    Row 0 is the given ground-truth initialization.  Each later search
    crop is centered on the previous prediction and scaled by its size.
    """
    if len(seq) < 1:
        raise ConfigurationError(f"sequence {seq.name} has no frames")
    bcfg = model.cfg.backbone
    model.eval()

    init = seq.boxes[0]
    if init[2] <= init[0] or init[3] <= init[1]:
        raise ConfigurationError(f"sequence {seq.name}: degenerate initial box")
    h, w = seq.frames[0].shape[:2]
    tcx, tcy = (init[0] + init[2]) / 2, (init[1] + init[3]) / 2
    t_sz = crop.template_context_factor * np.sqrt(
        (init[2] - init[0]) * (init[3] - init[1]))
    template_img, _ = crop_region(seq.frames[0], tcx, tcy, t_sz, bcfg.template_size)
    template = Tensor(template_img.transpose(2, 0, 1)[None])
    tokens = tokenize(seq.description, vocab, bcfg.text_plan.max_len)
    ids = tokens.ids[None]
    mask = tokens.mask[None]

    preds = np.empty((len(seq), 4))
    preds[0] = init
    prev = _sanitize(init, h, w)
    for i in range(1, len(seq)):
        cx, cy = (prev[0] + prev[2]) / 2, (prev[1] + prev[3]) / 2
        size = crop.search_context_factor * np.sqrt(
            (prev[2] - prev[0]) * (prev[3] - prev[1]))
        search_img, meta = crop_region(seq.frames[i], cx, cy, size,
                                       bcfg.search_size)
        search = Tensor(search_img.transpose(2, 0, 1)[None])
        out = model(template, search, ids, mask, compute_score=False)
        box = back_project(out["box"].data[0], meta)
        preds[i] = box
        prev = _sanitize(box, h, w)
    return preds


@dataclass
class EvalReport:
    success_auc: float
    precision: float
    norm_precision_auc: float
    num_frames: int
    num_sequences: int
    per_sequence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "success_auc": self.success_auc,
            "precision": self.precision,
            "norm_precision_auc": self.norm_precision_auc,
            "num_frames": self.num_frames,
            "num_sequences": self.num_sequences,
            "per_sequence": self.per_sequence,
        }


def _thread_count() -> int:
    raw = os.environ.get("VLTRACK_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"VLTRACK_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def ope_from_tracks(sequences: list, all_preds: list) -> EvalReport:
    """Metrics from already-computed track outputs (frame 0 excluded)."""
    ious, cerrs, nerrs = [], [], []
    per_sequence = {}
    for seq, preds in zip(sequences, all_preds):
        seq_ious = [box_iou(preds[i], seq.boxes[i]) for i in range(1, len(seq))]
        ious.extend(seq_ious)
        cerrs.extend(center_error(preds[i], seq.boxes[i])
                     for i in range(1, len(seq)))
        nerrs.extend(normalized_center_error(preds[i], seq.boxes[i])
                     for i in range(1, len(seq)))
        per_sequence[seq.name] = float(np.mean(seq_ious))

    ious = np.asarray(ious)
    cerrs = np.asarray(cerrs)
    nerrs = np.asarray(nerrs)
    success_curve = [(ious >= t).mean() for t in SUCCESS_THRESHOLDS]
    norm_curve = [(nerrs <= t).mean() for t in NORM_PREC_THRESHOLDS]
    return EvalReport(
        success_auc=float(np.mean(success_curve)),
        precision=float((cerrs <= PRECISION_PX).mean()),
        norm_precision_auc=float(np.mean(norm_curve)),
        num_frames=int(ious.size),
        num_sequences=len(sequences),
        per_sequence=per_sequence,
    )


def evaluate_ope(model: Tracker, sequences: list, crop: CropConfig,
                 vocab: Vocabulary) -> EvalReport:
    """Aggregate success / precision / normalized precision over all
    predicted frames (frame 0 of each sequence is excluded)."""
    if not sequences:
        raise ConfigurationError("evaluation set is empty")
    usable = [s for s in sequences if len(s) >= 2]
    if not usable:
        raise ConfigurationError("no sequence has a frame to predict")

    def run(seq):
        return track_sequence(model, seq, crop, vocab)

    threads = _thread_count()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            all_preds = list(pool.map(run, usable))
    else:
        all_preds = [run(s) for s in usable]
    return ope_from_tracks(usable, all_preds)
