"""Three-stage dual-stream backbone with synchronized text encoding.

Each stage runs: strided convolutional token embedding -> a stack of
attention blocks where the template attends only to itself while the
search region attends to both branches -> the matching text-encoder stage
-> a fusion block where template-queried text attention gates the search
channels and the pooled template updates the text features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ConfigurationError, Tensor
from .text import TextEncoder, TextStagePlan

ATTENTION_MODES = ("asymmetric", "symmetric", "self_only")
TEXT_MODES = ("synchronous", "asynchronous")


@dataclass
class StageConfig:
    """Per-stage schedule: token embedding geometry and attention shape."""
    cte_kernel: int
    cte_stride: int
    channels: int
    depth: int
    heads: int
    mlp_ratio: float = 4.0
    kv_stride: int = 2

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ConfigurationError(
                f"stage channels {self.channels} not divisible by heads {self.heads}")
        if self.cte_stride < 1 or self.kv_stride < 1:
            raise ConfigurationError("strides must be positive")


@dataclass
class BackboneConfig:
    stages: list
    template_size: int = 32
    search_size: int = 64
    attention_mode: str = "asymmetric"
    sam_enabled: bool = True
    sam_start_stage: int = 1
    text_mode: str = "synchronous"
    text_update_enabled: bool = True
    cvt_prenorm: bool = False
    text_plan: TextStagePlan = field(default_factory=TextStagePlan)

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s)
                       for s in self.stages]
        if isinstance(self.text_plan, dict):
            self.text_plan = TextStagePlan(**{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in self.text_plan.items()})
        if len(self.stages) != 3:
            raise ConfigurationError("backbone requires exactly 3 stages")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigurationError(
                f"attention_mode {self.attention_mode!r} not in {ATTENTION_MODES}")
        if self.text_mode not in TEXT_MODES:
            raise ConfigurationError(f"text_mode {self.text_mode!r} not in {TEXT_MODES}")
        if self.sam_start_stage not in (1, 2, 3):
            raise ConfigurationError("sam_start_stage must be 1, 2 or 3")
        if tuple(self.text_plan.dims) != tuple(s.channels for s in self.stages):
            raise ConfigurationError(
                "text stage dims must match visual stage channels: "
                f"{self.text_plan.dims} vs {[s.channels for s in self.stages]}")
        total_stride = 1
        for s in self.stages:
            total_stride *= s.cte_stride
        for name, size in (("template", self.template_size), ("search", self.search_size)):
            if size % total_stride != 0:
                raise ConfigurationError(
                    f"{name} size {size} not divisible by cumulative stride {total_stride}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def shape_schedule(self) -> list:
        """Per-stage (search_hw, template_hw, channels) after each CTE."""
        out = []
        s_hw, t_hw = self.search_size, self.template_size
        for s in self.stages:
            s_hw //= s.cte_stride
            t_hw //= s.cte_stride
            out.append((s_hw, t_hw, s.channels))
        return out


def desk_config() -> BackboneConfig:
    """Small configuration sized for CPU experiments and gradient checking."""
    return BackboneConfig(
        stages=[
            StageConfig(cte_kernel=7, cte_stride=4, channels=8, depth=1, heads=1, mlp_ratio=2.0),
            StageConfig(cte_kernel=3, cte_stride=2, channels=16, depth=1, heads=2, mlp_ratio=2.0),
            StageConfig(cte_kernel=3, cte_stride=2, channels=32, depth=1, heads=4, mlp_ratio=2.0),
        ],
        template_size=32, search_size=64,
        text_plan=TextStagePlan(layers_per_stage=(1, 1, 2), dims=(8, 16, 32),
                                heads=(1, 2, 4), max_len=16),
    )


def full_scale_config() -> BackboneConfig:
    """The full-scale schedule: search 80/40/20, template 32/16/8,
    dims 64/192/384, heads 1/3/6, depths 1/4/16, text split 1/4/7 layers."""
    return BackboneConfig(
        stages=[
            StageConfig(cte_kernel=7, cte_stride=4, channels=64, depth=1, heads=1),
            StageConfig(cte_kernel=3, cte_stride=2, channels=192, depth=4, heads=3),
            StageConfig(cte_kernel=3, cte_stride=2, channels=384, depth=16, heads=6),
        ],
        template_size=128, search_size=320,
        text_plan=TextStagePlan(layers_per_stage=(1, 4, 7), dims=(64, 192, 384),
                                heads=(1, 3, 6), max_len=30),
    )


def _to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    b, n, c = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(b, c, h, w)


def _to_tokens(fmap: Tensor) -> Tensor:
    b, c, h, w = fmap.shape
    return fmap.reshape(b, c, h * w).transpose(0, 2, 1)


class TokenEmbed(nn.Module):
    """Strided convolution re-tokenizing a feature map, then per-token layer norm."""

    def __init__(self, in_channels: int, stage: StageConfig):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, stage.channels, stage.cte_kernel,
                              stride=stage.cte_stride, padding=stage.cte_kernel // 2)
        self.norm = nn.LayerNorm(stage.channels)

    def __call__(self, fmap: Tensor) -> Tensor:
        out = self.conv(fmap)
        return _to_map(self.norm(_to_tokens(out)), out.shape[2], out.shape[3])


class ConvProjection(nn.Module):
    """Depthwise 3x3 convolution (optionally strided) followed by a linear map."""

    def __init__(self, channels: int, stride: int):
        super().__init__()
        self.dw = nn.Conv2d(channels, channels, 3, stride=stride, padding=1,
                            groups=channels, bias=False)
        self.linear = nn.Linear(channels, channels)

    def __call__(self, fmap: Tensor) -> Tensor:
        return self.linear(_to_tokens(self.dw(fmap)))


class DualAttentionBlock(nn.Module):
    """Attention block over the template/search pair.

    In asymmetric mode the template attends to its own keys/values only
    while the search tokens attend to the concatenation of both branches;
    symmetric mode lets both branches attend to the concatenation;
    self_only restricts each branch to itself.
    """

    def __init__(self, stage: StageConfig, mode: str, prenorm: bool):
        super().__init__()
        c = stage.channels
        self.heads = stage.heads
        self.mode = mode
        self.prenorm = prenorm
        self.q_proj = ConvProjection(c, 1)
        self.k_proj = ConvProjection(c, stage.kv_stride)
        self.v_proj = ConvProjection(c, stage.kv_stride)
        self.out = nn.Linear(c, c)
        self.norm_attn = nn.LayerNorm(c) if prenorm else None
        self.norm_mlp = nn.LayerNorm(c)
        self.mlp = nn.Mlp(c, stage.mlp_ratio)

    def __call__(self, template: Tensor, search: Tensor, diag: dict | None = None):
        t_in, s_in = _to_tokens(template), _to_tokens(search)
        if self.prenorm:
            t_map = _to_map(self.norm_attn(t_in), *template.shape[2:])
            s_map = _to_map(self.norm_attn(s_in), *search.shape[2:])
        else:
            t_map, s_map = template, search
        q_t, k_t, v_t = self.q_proj(t_map), self.k_proj(t_map), self.v_proj(t_map)
        q_s, k_s, v_s = self.q_proj(s_map), self.k_proj(s_map), self.v_proj(s_map)

        if self.mode == "symmetric":
            k_c, v_c = ad.concat([k_t, k_s], axis=1), ad.concat([v_t, v_s], axis=1)
            attn_t, w_t = nn.multi_head_attention(q_t, k_c, v_c, self.heads)
            attn_s, w_s = nn.multi_head_attention(q_s, k_c, v_c, self.heads)
        elif self.mode == "asymmetric":
            attn_t, w_t = nn.multi_head_attention(q_t, k_t, v_t, self.heads)
            k_c, v_c = ad.concat([k_t, k_s], axis=1), ad.concat([v_t, v_s], axis=1)
            attn_s, w_s = nn.multi_head_attention(q_s, k_c, v_c, self.heads)
        elif self.mode == "self_only":
            attn_t, w_t = nn.multi_head_attention(q_t, k_t, v_t, self.heads)
            attn_s, w_s = nn.multi_head_attention(q_s, k_s, v_s, self.heads)
        else:
            raise ConfigurationError(f"unknown attention mode {self.mode!r}")
        if diag is not None:
            diag["attn_template"] = w_t.data
            diag["attn_search"] = w_s.data

        def finish(x_tokens, attn):
            y = x_tokens + self.out(attn)
            return y + self.mlp(self.norm_mlp(y))

        t_out = finish(t_in, attn_t)
        s_out = finish(s_in, attn_s)
        return (_to_map(t_out, *template.shape[2:]),
                _to_map(s_out, *search.shape[2:]))


class SemanticFusion(nn.Module):
    """Cross-modal fusion: text gates search channels, template prompts text.

    Visual stream: a 1x1 convolution projects the template into a common
    space; its global max pool forms a single query over the (linearly
    projected) text tokens; the multi-head attention output, squashed by a
    sigmoid, is a per-channel gate multiplied into the search feature,
    followed by batch norm, a 1x1 convolution and a residual connection to
    the original search feature.  The template passes through unchanged.

    Textual stream: project text, add the pooled template to every real
    token, project again and add residually to the input text.  Disabled
    when ``update_text`` is False.
    """

    def __init__(self, channels: int, heads: int, update_text: bool):
        super().__init__()
        self.heads = heads
        self.update_text = update_text
        self.vis_proj = nn.Conv2d(channels, channels, 1)
        self.text_proj = nn.Linear(channels, channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.gate_out = nn.Linear(channels, channels)
        self.bn = nn.BatchNorm(channels)
        self.post_conv = nn.Conv2d(channels, channels, 1)
        self.text_in = nn.Linear(channels, channels)
        self.text_out = nn.Linear(channels, channels)

    def __call__(self, template: Tensor, search: Tensor, text: Tensor,
                 text_mask: np.ndarray, diag: dict | None = None):
        b, c = template.shape[0], template.shape[1]
        pooled = nn.global_max_pool(self.vis_proj(template))  # (B, C)
        common_text = self.text_proj(text)
        attn, _ = nn.multi_head_attention(
            self.q(pooled.reshape(b, 1, c)), self.k(common_text), self.v(common_text),
            self.heads, mask=text_mask)
        gate = ad.sigmoid(self.gate_out(attn)).reshape(b, c, 1, 1)
        if diag is not None:
            diag["gate"] = gate.data.reshape(b, c)
        gated = search * gate
        search_out = search + self.post_conv(self.bn(gated))

        if self.update_text:
            t1 = self.text_in(text)
            fused = t1 + pooled.reshape(b, 1, c) * Tensor(text_mask[..., None].astype(float))
            text_out = text + self.text_out(fused)
        else:
            text_out = text
        return template, search_out, text_out


class Backbone(nn.Module):
    """The full synchronized dual-stream backbone (owns the text encoder)."""

    def __init__(self, cfg: BackboneConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = TextEncoder(vocab_size, cfg.text_plan)
        in_ch = 3
        embeds, blocks, fusions = [], [], []
        for i, stage in enumerate(cfg.stages):
            embeds.append(TokenEmbed(in_ch, stage))
            blocks.append(nn.ModuleList([
                DualAttentionBlock(stage, cfg.attention_mode, cfg.cvt_prenorm)
                for _ in range(stage.depth)]))
            if cfg.sam_enabled and (i + 1) >= cfg.sam_start_stage:
                fusions.append(SemanticFusion(stage.channels, stage.heads,
                                              cfg.text_update_enabled))
            else:
                fusions.append(nn.Module())
            in_ch = stage.channels
        self.embeds = nn.ModuleList(embeds)
        self.blocks = nn.ModuleList(blocks)
        self.fusions = nn.ModuleList(fusions)
        if cfg.text_mode == "asynchronous":
            d3 = cfg.stages[2].channels
            self.async_adapters = nn.ModuleList([
                nn.Linear(d3, s.channels) if s.channels != d3 else nn.Module()
                for s in cfg.stages])

    def __call__(self, template_img: Tensor, search_img: Tensor,
                 ids: np.ndarray, mask: np.ndarray,
                 collect_diagnostics: bool = False):
        """Returns (template feature, search feature, text features, diagnostics)."""
        cfg = self.cfg
        diagnostics = {} if collect_diagnostics else None
        template, search = template_img, search_img
        text = None
        final_text = None
        if cfg.text_mode == "asynchronous":
            final_text = self.text_encoder.forward_all(ids, mask)

        for i in range(3):
            template = self.embeds[i](template)
            search = self.embeds[i](search)
            for j, block in enumerate(self.blocks[i]):
                diag = {} if collect_diagnostics else None
                template, search = block(template, search, diag)
                if collect_diagnostics:
                    for k, v in diag.items():
                        diagnostics[f"stage{i + 1}.block{j}.{k}"] = v
            if cfg.text_mode == "synchronous":
                text = self.text_encoder.stage_forward(text, i + 1, ids=ids, mask=mask)
                stage_text = text
            else:
                adapter = self.async_adapters[i]
                stage_text = adapter(final_text) if isinstance(adapter, nn.Linear) \
                    else final_text
            fusion = self.fusions[i]
            if isinstance(fusion, SemanticFusion):
                diag = {} if collect_diagnostics else None
                template, search, stage_text = fusion(template, search, stage_text,
                                                      mask, diag)
                if collect_diagnostics:
                    for k, v in diag.items():
                        diagnostics[f"stage{i + 1}.fusion.{k}"] = v
                if cfg.text_mode == "synchronous":
                    text = stage_text
        final = stage_text if cfg.text_mode == "asynchronous" else text
        return template, search, final, diagnostics
