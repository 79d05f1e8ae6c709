"""Synthetic tracking sequences, dataset directory IO and region cropping.

A sequence is a textured-noise background with one moving target shape and
optional same-shape distractors that differ in color, so the language
description ("the red square moving left") is what disambiguates the
target.  Sequences are rendered anti-aliased and are fully determined by
(seed, sequence id).  The on-disk format (imgs/ + groundtruth.txt +
language.txt) is shared between the generator and the loader, so synthetic
and real data are interchangeable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .rng import derive_rng
from .text import TokenizedText, Vocabulary, tokenize


class DataError(ValueError):
    pass


COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.80),
}
SHAPES = ("circle", "square", "triangle")
DIRECTIONS = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1)}


@dataclass
class GeneratorSpec:
    frame_size: int = 64
    num_frames: int = 32
    distractor_count: int = 2
    occluder_count: int = 0
    min_half_size: float = 5.0
    max_half_size: float = 9.0
    speed: float = 1.5
    distractors_share_color: bool = False

    def __post_init__(self):
        if self.distractor_count > 0 and self.distractors_share_color:
            raise DataError(
                "distractors identical in every attribute cannot be "
                "disambiguated by the description")


@dataclass
class Sequence:
    frames: list          # H x W x 3 float arrays in [0, 1]
    boxes: np.ndarray     # (N, 4) corner-form pixel coordinates
    description: str
    attributes: dict = field(default_factory=dict)
    name: str = ""

    def __len__(self):
        return len(self.frames)


def _coverage(shape: str, cx: float, cy: float, r: float, h: int, w: int,
              subsamples: int = 4) -> np.ndarray:
    """Anti-aliased coverage mask of a shape, via subpixel sampling."""
    y0 = max(0, int(np.floor(cy - r)) - 1)
    y1 = min(h, int(np.ceil(cy + r)) + 2)
    x0 = max(0, int(np.floor(cx - r)) - 1)
    x1 = min(w, int(np.ceil(cx + r)) + 2)
    cov = np.zeros((h, w))
    if y0 >= y1 or x0 >= x1:
        return cov
    offs = (np.arange(subsamples) + 0.5) / subsamples
    ys = (y0 + np.add.outer(np.arange(y1 - y0), offs)).reshape(-1)  # pixel top + sub
    xs = (x0 + np.add.outer(np.arange(x1 - x0), offs)).reshape(-1)
    dy = ys[:, None] - cy
    dx = xs[None, :] - cx
    if shape == "circle":
        inside = dx ** 2 + dy ** 2 <= r ** 2
    elif shape == "square":
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif shape == "triangle":
        # apex (cx, cy - r), base corners (cx -/+ r, cy + r)
        inside = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    else:
        raise DataError(f"unknown shape {shape!r}")
    block = inside.reshape(y1 - y0, subsamples, x1 - x0, subsamples)
    cov[y0:y1, x0:x1] = block.mean(axis=(1, 3))
    return cov


def _paint(frame: np.ndarray, cov: np.ndarray, color) -> None:
    frame *= (1.0 - cov)[..., None]
    frame += cov[..., None] * np.asarray(color)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.75, size=(8, 8, 3))
    img = np.array(Image.fromarray((coarse * 255).astype(np.uint8)).resize(
        (size, size), Image.BILINEAR), dtype=np.float64) / 255.0
    img += rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _random_walk(rng, size, r, speed, n, direction=None):
    """Smooth bouncing walk; returns (n, 2) centers and the dominant direction."""
    margin = r + 1.0
    pos = rng.uniform(margin, size - margin, size=2)
    if direction is None:
        angle = rng.uniform(0, 2 * np.pi)
    else:
        base = np.arctan2(*DIRECTIONS[direction][::-1])
        angle = base + rng.uniform(-0.6, 0.6)
    vel = np.array([np.cos(angle), np.sin(angle)]) * speed
    centers = np.empty((n, 2))
    for i in range(n):
        centers[i] = pos
        vel += rng.normal(0, 0.15, size=2)
        norm = np.linalg.norm(vel)
        if norm > 1e-9:
            vel *= speed / norm
        pos = pos + vel
        for axis in range(2):
            if pos[axis] < margin:
                pos[axis] = 2 * margin - pos[axis]
                vel[axis] = abs(vel[axis])
            elif pos[axis] > size - margin:
                pos[axis] = 2 * (size - margin) - pos[axis]
                vel[axis] = -abs(vel[axis])
    return centers


def generate_sequence(seed: int, seq_id: int,
                      spec: GeneratorSpec | None = None) -> Sequence:
    """Render one synthetic sequence, fully determined by (seed, seq_id)."""
    spec = spec or GeneratorSpec()
    rng = derive_rng(seed, "sequence", seq_id)
    size = spec.frame_size
    color_name = str(rng.choice(list(COLORS)))
    shape = str(rng.choice(SHAPES))
    direction = str(rng.choice(list(DIRECTIONS)))
    r = rng.uniform(spec.min_half_size, spec.max_half_size)
    centers = _random_walk(rng, size, r, spec.speed, spec.num_frames, direction)

    distractors = []
    other_colors = [c for c in COLORS if c != color_name]
    for _ in range(spec.distractor_count):
        d_color = str(rng.choice(other_colors))
        d_r = rng.uniform(spec.min_half_size, spec.max_half_size)
        d_centers = _random_walk(rng, size, d_r, spec.speed, spec.num_frames)
        distractors.append((d_color, d_r, d_centers))

    occluders = []
    for _ in range(spec.occluder_count):
        ox, oy = rng.uniform(r, size - r, size=2)
        ow, oh = rng.uniform(4, 10, size=2)
        occluders.append((ox, oy, ow, oh, rng.uniform(0.2, 0.8, size=3)))

    background = _background(rng, size)
    frames, boxes = [], []
    for i in range(spec.num_frames):
        frame = background.copy()
        for d_color, d_r, d_centers in distractors:
            cov = _coverage(shape, d_centers[i, 0], d_centers[i, 1], d_r, size, size)
            _paint(frame, cov, COLORS[d_color])
        cx, cy = centers[i]
        _paint(frame, _coverage(shape, cx, cy, r, size, size), COLORS[color_name])
        for ox, oy, ow, oh, oc in occluders:
            cov = _coverage("square", ox, oy, max(ow, oh) / 2, size, size)
            _paint(frame, cov * 0.9, oc)
        frames.append(np.clip(frame, 0.0, 1.0))
        boxes.append([cx - r, cy - r, cx + r, cy + r])

    description = f"the {color_name} {shape} moving {direction}"
    attributes = {"color": color_name, "shape": shape, "motion": direction,
                  "distractor_count": spec.distractor_count}
    return Sequence(frames, np.array(boxes), description, attributes,
                    name=f"seq{seq_id:04d}")


# -- dataset directory IO ------------------------------------------------------

def save_sequence(seq: Sequence, root: str) -> str:
    path = os.path.join(root, seq.name)
    os.makedirs(os.path.join(path, "imgs"), exist_ok=True)
    for i, frame in enumerate(seq.frames):
        img = Image.fromarray((np.clip(frame, 0, 1) * 255).round().astype(np.uint8))
        img.save(os.path.join(path, "imgs", f"{i + 1:08d}.png"))
    with open(os.path.join(path, "groundtruth.txt"), "w") as fh:
        for x1, y1, x2, y2 in seq.boxes:
            fh.write(f"{x1:.4f},{y1:.4f},{x2 - x1:.4f},{y2 - y1:.4f}\n")
    with open(os.path.join(path, "language.txt"), "w") as fh:
        fh.write(seq.description + "\n")
    return path


def generate_dataset(root: str, seed: int, count: int,
                     spec: GeneratorSpec | None = None) -> list:
    os.makedirs(root, exist_ok=True)
    paths = []
    for i in range(count):
        paths.append(save_sequence(generate_sequence(seed, i, spec), root))
    return paths


def _load_sequence(path: str, name: str) -> Sequence:
    img_dir = os.path.join(path, "imgs")
    if not os.path.isdir(img_dir):
        raise DataError(f"sequence {name}: missing imgs/ directory")
    img_files = sorted(f for f in os.listdir(img_dir)
                       if f.lower().endswith((".png", ".ppm", ".jpg", ".jpeg")))
    boxes = []
    gt_path = os.path.join(path, "groundtruth.txt")
    with open(gt_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.replace("\t", ",").split(",")
            try:
                x, y, w, h = (float(p) for p in parts)
            except ValueError:
                raise DataError(
                    f"sequence {name}: malformed box at groundtruth.txt line {lineno}: "
                    f"{line!r}") from None
            boxes.append([x, y, x + w, y + h])
    if len(boxes) != len(img_files):
        raise DataError(
            f"sequence {name}: {len(img_files)} frames but {len(boxes)} annotations")
    lang_path = os.path.join(path, "language.txt")
    description = ""
    if os.path.isfile(lang_path):
        with open(lang_path) as fh:
            description = fh.read().strip()
    frames = [np.asarray(Image.open(os.path.join(img_dir, f)).convert("RGB"),
                         dtype=np.float64) / 255.0
              for f in img_files]
    return Sequence(frames, np.array(boxes), description, name=name)


def load_dataset(root: str) -> list:
    """Load every sequence directory under ``root``, sorted by name."""
    names = sorted(d for d in os.listdir(root)
                   if os.path.isdir(os.path.join(root, d)))
    if not names:
        raise DataError(f"no sequence directories under {root}")
    return [_load_sequence(os.path.join(root, n), n) for n in names]


# -- cropping ------------------------------------------------------------------

@dataclass
class CropConfig:
    template_context_factor: float = 2.0
    search_context_factor: float = 5.0
    center_jitter: float = 1.0   # in units of sqrt(box area)
    scale_jitter: float = 0.25   # lognormal sigma on the crop size

    def __post_init__(self):
        if self.template_context_factor < 1 or self.search_context_factor < 1:
            raise DataError("context factors must be >= 1")


@dataclass
class CropMeta:
    """Mapping from normalized crop coordinates back to frame pixels."""
    origin_x: float
    origin_y: float
    size_px: float


@dataclass
class TrackSample:
    template: np.ndarray   # (3, Ht, Wt)
    search: np.ndarray     # (3, Hs, Ws)
    tokens: TokenizedText
    gt_box: np.ndarray     # normalized search-crop coordinates
    meta: CropMeta
    description: str = ""
    sample_id: str = ""


def np_bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-numpy bilinear resize (half-pixel centers) of an (H, W, C) image."""
    h, w = img.shape[:2]

    def coords(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        lo = np.minimum(np.floor(src).astype(int), max(n_in - 2, 0))
        return lo, np.minimum(lo + 1, n_in - 1), src - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    return (img[y0][:, x0] * (1 - fy) * (1 - fx) + img[y0][:, x1] * (1 - fy) * fx
            + img[y1][:, x0] * fy * (1 - fx) + img[y1][:, x1] * fy * fx)


def crop_region(frame: np.ndarray, cx: float, cy: float, size_px: float,
                out_size: int) -> tuple:
    """Square crop centered near (cx, cy), resized to out_size.

    Out-of-frame regions are filled with the per-channel frame mean.  The
    returned CropMeta maps normalized crop coordinates to frame pixels via
    ``frame = origin + norm * size_px``.
    """
    size_px = max(2, int(round(size_px)))
    x0 = int(round(cx - size_px / 2))
    y0 = int(round(cy - size_px / 2))
    h, w = frame.shape[:2]
    fill = frame.reshape(-1, 3).mean(axis=0)
    padded = np.empty((size_px, size_px, 3))
    padded[...] = fill
    sx0, sy0 = max(0, x0), max(0, y0)
    sx1, sy1 = min(w, x0 + size_px), min(h, y0 + size_px)
    if sx0 < sx1 and sy0 < sy1:
        padded[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = frame[sy0:sy1, sx0:sx1]
    crop = np_bilinear_resize(padded, out_size, out_size)
    return crop, CropMeta(origin_x=float(x0), origin_y=float(y0),
                          size_px=float(size_px))


def back_project(box_norm: np.ndarray, meta: CropMeta) -> np.ndarray:
    """Map a normalized crop-coordinate box back to frame pixels."""
    box = np.asarray(box_norm, dtype=np.float64)
    out = np.empty_like(box)
    out[..., 0::2] = meta.origin_x + box[..., 0::2] * meta.size_px
    out[..., 1::2] = meta.origin_y + box[..., 1::2] * meta.size_px
    return out


def _box_center_wh(box):
    x1, y1, x2, y2 = box
    return (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1


def make_sample(seq: Sequence, template_frame: int, search_frame: int,
                crop: CropConfig, template_size: int, search_size: int,
                vocab: Vocabulary, max_text_len: int,
                train: bool = False,
                rng: np.random.Generator | None = None) -> TrackSample:
    """Build one training/eval item from a pair of frames.

    The template crop is centered on its ground-truth box; the search crop
    center and scale are jittered in training mode, clamped so the target
    box stays fully inside the crop.
    """
    t_box = seq.boxes[template_frame]
    s_box = seq.boxes[search_frame]
    for b in (t_box, s_box):
        if b[2] <= b[0] or b[3] <= b[1]:
            raise DataError(f"sequence {seq.name}: zero-area ground-truth box")

    tcx, tcy, tw, th = _box_center_wh(t_box)
    t_sz = crop.template_context_factor * np.sqrt(tw * th)
    template, _ = crop_region(seq.frames[template_frame], tcx, tcy, t_sz, template_size)

    scx, scy, sw, sh = _box_center_wh(s_box)
    base = np.sqrt(sw * sh)
    s_sz = crop.search_context_factor * base
    if train and rng is not None:
        s_sz *= np.exp(rng.normal(0, crop.scale_jitter))
        scx += rng.uniform(-1, 1) * crop.center_jitter * base
        scy += rng.uniform(-1, 1) * crop.center_jitter * base
    s_sz = max(s_sz, max(sw, sh) + 2)
    # clamp the center so the gt box stays inside the crop
    scx = np.clip(scx, s_box[2] - s_sz / 2 + 1, s_box[0] + s_sz / 2 - 1)
    scy = np.clip(scy, s_box[3] - s_sz / 2 + 1, s_box[1] + s_sz / 2 - 1)
    search, meta = crop_region(seq.frames[search_frame], scx, scy, s_sz, search_size)

    gt_norm = np.array([
        (s_box[0] - meta.origin_x) / meta.size_px,
        (s_box[1] - meta.origin_y) / meta.size_px,
        (s_box[2] - meta.origin_x) / meta.size_px,
        (s_box[3] - meta.origin_y) / meta.size_px,
    ])
    tokens = tokenize(seq.description, vocab, max_text_len)
    return TrackSample(
        template=template.transpose(2, 0, 1),
        search=search.transpose(2, 0, 1),
        tokens=tokens,
        gt_box=gt_norm,
        meta=meta,
        description=seq.description,
        sample_id=f"{seq.name}:{template_frame}->{search_frame}",
    )
