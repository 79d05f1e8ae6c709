"""Dump internal model signals (attention maps, fusion gates, score maps,
corner heatmaps) as 8-bit PGM images plus raw CSV matrices."""

from __future__ import annotations

import os

import numpy as np

from .autodiff import Tensor
from .data import CropConfig, Sequence, make_sample
from .model import Tracker
from .text import Vocabulary


def write_pgm(path: str, matrix: np.ndarray) -> None:
    """Write a 2-D array as a binary 8-bit PGM, min-max normalized."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {m.shape}")
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())


def write_csv_matrix(path: str, matrix: np.ndarray) -> None:
    np.savetxt(path, np.asarray(matrix, dtype=np.float64),
               delimiter=",", fmt="%.10g")


def _dump_array(out_dir: str, name: str, arr: np.ndarray) -> list:
    """Split an array into 2-D slices and write each as PGM + CSV."""
    arr = np.asarray(arr)
    written = []
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim == 2:
        slices = [("", arr)]
    else:
        # flatten leading axes (batch, heads, ...) into separate slices
        lead = arr.reshape((-1,) + arr.shape[-2:])
        slices = [(f".{k}", lead[k]) for k in range(lead.shape[0])]
    for suffix, mat in slices:
        base = os.path.join(out_dir, name + suffix)
        write_pgm(base + ".pgm", mat)
        write_csv_matrix(base + ".csv", mat)
        written.append(base)
    return written


def inspect_sample(model: Tracker, seq: Sequence, template_frame: int,
                   search_frame: int, crop: CropConfig, vocab: Vocabulary,
                   out_dir: str) -> list:
    """Run one forward pass and dump every internal signal; returns the
    list of written file stems."""
    os.makedirs(out_dir, exist_ok=True)
    bcfg = model.cfg.backbone
    sample = make_sample(seq, template_frame, search_frame, crop,
                         bcfg.template_size, bcfg.search_size, vocab,
                         bcfg.text_plan.max_len, train=False)
    model.eval()
    out = model(Tensor(sample.template[None]), Tensor(sample.search[None]),
                sample.tokens.ids[None], sample.tokens.mask[None],
                compute_score=True, collect_diagnostics=True)
    written = []
    for name, arr in sorted(out["diagnostics"].items()):
        written.extend(_dump_array(out_dir, name.replace("/", "_"), arr))
    for key in ("tl_prob", "br_prob"):
        written.extend(_dump_array(out_dir, key, out[key].data))
    with open(os.path.join(out_dir, "box.csv"), "w") as fh:
        fh.write(",".join(f"{v:.10g}" for v in out["box"].data[0]) + "\n")
    written.append(os.path.join(out_dir, "box"))
    return written
