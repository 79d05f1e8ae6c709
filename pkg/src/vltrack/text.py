"""Tokenization and the staged text encoder.

The language description is tokenized into [CLS] tokens... [SEP] with
padding, then encoded by a small trainable transformer that is split into
three contiguous stages so the textual features advance together with the
visual stages.  The hidden dimension of each stage matches the visual
fusion dimension of that stage; linear adapters bridge stage transitions.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ConfigurationError, Tensor

CLS_ID, SEP_ID, PAD_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[PAD]", "[UNK]")

_WORD_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


class Vocabulary:
    """Token to id map with the four special tokens at fixed ids 0..3."""

    def __init__(self, words):
        self.token_to_id = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for word in words:
            if word not in self.token_to_id:
                self.token_to_id[word] = len(self.token_to_id)

    def __len__(self):
        return len(self.token_to_id)

    def lookup(self, word: str) -> int:
        return self.token_to_id.get(word, UNK_ID)

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls(line.strip() for line in fh if line.strip())

    @classmethod
    def default(cls) -> "Vocabulary":
        """The packaged word list (generator lexicon plus common words)."""
        text = resources.files("vltrack").joinpath("vocab.txt").read_text("utf-8")
        return cls(line.strip() for line in text.splitlines() if line.strip())

    def save(self, path) -> None:
        words = sorted(self.token_to_id, key=self.token_to_id.get)[len(SPECIAL_TOKENS):]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(words) + "\n")


@dataclass
class TokenizedText:
    """Fixed-length token ids with a validity mask (True = real token)."""
    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)


def tokenize(description: str, vocab: Vocabulary, max_len: int = 30) -> TokenizedText:
    """Lowercased word tokenization into [CLS] tokens [SEP] padded to ``max_len``."""
    if max_len < 3:
        raise ConfigurationError(f"max_len must be >= 3 to fit [CLS]/[SEP], got {max_len}")
    words = _WORD_RE.findall(description.lower())
    words = words[:max_len - 2]
    ids = [CLS_ID] + [vocab.lookup(w) for w in words] + [SEP_ID]
    mask = [True] * len(ids)
    while len(ids) < max_len:
        ids.append(PAD_ID)
        mask.append(False)
    return TokenizedText(np.array(ids), np.array(mask))


@dataclass
class TextStagePlan:
    """Layer counts and hidden dims for the three encoder stages."""
    layers_per_stage: tuple = (1, 1, 2)
    dims: tuple = (8, 16, 32)
    heads: tuple = (1, 2, 4)
    mlp_ratio: float = 2.0
    max_len: int = 30

    def __post_init__(self):
        if len(self.layers_per_stage) != 3 or len(self.dims) != 3 or len(self.heads) != 3:
            raise ConfigurationError("text plan needs exactly three stages")
        for d, h in zip(self.dims, self.heads):
            if d % h != 0:
                raise ConfigurationError(f"text dim {d} not divisible by heads {h}")


class TextEncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer with masked self-attention."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.mlp = nn.Mlp(dim, mlp_ratio)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.norm1(x)
        attn, _ = nn.multi_head_attention(self.q(h), self.k(h), self.v(h),
                                          self.heads, mask=mask)
        x = x + self.proj(attn)
        return x + self.mlp(self.norm2(x))


class TextEncoder(nn.Module):
    """Embedding plus three stages of encoder layers with stage adapters.

    ``stage_forward(feats, stage, mask)`` must be called in order 1 -> 3;
    stage 1 accepts token ids and performs the embedding lookup internally.
    """

    def __init__(self, vocab_size: int, plan: TextStagePlan):
        super().__init__()
        self.plan = plan
        self.embed = nn.Embedding(vocab_size, plan.dims[0])
        self.pos = nn.Parameter((plan.max_len, plan.dims[0]), init=("normal", 0.02))
        self.stages = nn.ModuleList([
            nn.ModuleList([TextEncoderLayer(plan.dims[s], plan.heads[s], plan.mlp_ratio)
                           for _ in range(plan.layers_per_stage[s])])
            for s in range(3)
        ])
        self.adapters = nn.ModuleList([
            nn.Linear(plan.dims[s], plan.dims[s + 1]) if plan.dims[s] != plan.dims[s + 1]
            else nn.Module()
            for s in range(2)
        ])

    def stage_forward(self, feats, stage: int, ids: np.ndarray | None = None,
                      mask: np.ndarray | None = None) -> Tensor:
        if stage not in (1, 2, 3):
            raise ConfigurationError(f"text stage must be 1, 2 or 3, got {stage}")
        if stage == 1:
            if ids is None:
                raise ConfigurationError("stage 1 needs token ids for embedding lookup")
            feats = self.embed(ids) + self.pos
        else:
            adapter = self.adapters[stage - 2]
            if isinstance(adapter, nn.Linear):
                feats = adapter(feats)
        for layer in self.stages[stage - 1]:
            feats = layer(feats, mask)
        return feats

    def forward_all(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Run all three stages back to back (asynchronous text mode)."""
        feats = None
        for stage in (1, 2, 3):
            feats = self.stage_forward(feats, stage, ids=ids, mask=mask)
        return feats
