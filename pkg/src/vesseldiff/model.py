"""The full conditional noise predictor with its ablation tiers.

``A``   denoising UNet over [x_t | CT block]
``AB``  + timestep-dependent CT encoder added at the bottleneck
``ABC`` + graph-attention node features fused with the CT embedding
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import DenoiserNet, DynamicEncoderNet, FeaturePyramid
from .graph_attention import FusedCondition, GraphBatch, GraphConditioner, fuse

TIERS = ("A", "AB", "ABC")


@dataclass
class ModelConfig:
    tier: str = "ABC"
    image_size: int = 256
    depths: int = 4
    base_width: int = 32
    cond_width: int = 8  # per slice group
    temb_dim: int = 64
    node_grid: Tuple[int, int, int] = (3, 32, 32)  # (depth, height, width)
    node_dim: int = 16
    attn_dim: int = 16
    leaky_slope: float = 0.2
    gat_concat: bool = False
    merge_levels: Optional[Tuple[int, ...]] = None  # None = every depth
    graph_levels: Optional[Tuple[int, ...]] = None  # None = every depth
    graph_injection: str = "bottleneck"  # or "all"
    self_loops: str = "isolated"  # or "all"

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"tier must be one of {TIERS}, got {self.tier!r}")
        if self.image_size % (2 ** (self.depths - 1)):
            raise ValueError("image size must be divisible by 2^(depths-1)")
        if self.graph_injection not in ("bottleneck", "all"):
            raise ValueError("graph_injection must be 'bottleneck' or 'all'")
        if self.self_loops not in ("isolated", "all"):
            raise ValueError("self_loops must be 'isolated' or 'all'")
        self.node_grid = tuple(int(v) for v in self.node_grid)
        for name in ("merge_levels", "graph_levels"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, tuple(int(k) for k in v))

    @property
    def bottleneck_hw(self) -> Tuple[int, int]:
        s = self.image_size >> (self.depths - 1)
        return (s, s)

    @property
    def block_shape(self) -> Tuple[int, int, int]:
        return (3, self.image_size, self.image_size)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    eps: torch.Tensor
    node_probs: Optional[torch.Tensor] = None
    fused: Optional[FusedCondition] = None
    pyramid: Optional[FeaturePyramid] = None


class VesselDiffusionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.denoiser = DenoiserNet(cfg.base_width, cfg.depths, cfg.temb_dim)
        self.encoder = None
        self.graph = None
        if cfg.tier in ("AB", "ABC"):
            self.encoder = DynamicEncoderNet(
                cfg.cond_width, cfg.depths, cfg.temb_dim, self.denoiser.widths, cfg.merge_levels
            )
            self.cond_proj = nn.Conv2d(self.encoder.channels[-1], self.denoiser.bottleneck_channels, 1)
        if cfg.tier == "ABC":
            self.graph = GraphConditioner(
                self.encoder.slice_widths, cfg.node_dim, cfg.attn_dim, self.denoiser.bottleneck_channels,
                cfg.leaky_slope, cfg.gat_concat, cfg.graph_levels,
            )
            if cfg.graph_injection == "all":
                self.level_proj = nn.ModuleList(
                    [nn.Conv2d(self.denoiser.bottleneck_channels, w, 1) for w in self.denoiser.widths[:-1]]
                )

    @property
    def uses_graph(self) -> bool:
        return self.graph is not None

    def condition(self, feats, cond, t, graphs: Optional[GraphBatch], graph_enabled: bool = True):
        """Build the bottleneck condition from the denoiser's encoder features."""
        pyramid = self.encoder(cond, t, feats)
        f_c = self.cond_proj(pyramid.levels[-1])
        if not (self.uses_graph and graph_enabled):
            return fuse(f_c, None), None, pyramid
        if graphs is None:
            raise ValueError("graph conditioning is enabled but no graph was given")
        volumes = [self.encoder.as_volume(level) for level in pyramid.levels]
        f_v, probs = self.graph(volumes, graphs, self.cfg.bottleneck_hw)
        return fuse(f_c, f_v), probs, pyramid

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor,
                graphs: Optional[GraphBatch] = None, use_condition: bool = True) -> ModelOutput:
        """``use_condition=False`` drops every bottleneck condition (A-only path)."""
        temb = self.denoiser.time(t)
        feats = self.denoiser.encode(x_t, cond, temb)
        if self.encoder is None or not use_condition:
            return ModelOutput(self.denoiser.decode(feats, temb))
        fused, probs, pyramid = self.condition(feats, cond, t, graphs)
        level_add = None
        if self.uses_graph and self.cfg.graph_injection == "all":
            level_add = {
                k: proj(F.interpolate(fused.f_v, size=feats[k].shape[-2:], mode="nearest"))
                for k, proj in enumerate(self.level_proj)
            }
        eps = self.denoiser.decode(feats, temb, fused.f, level_add)
        return ModelOutput(eps, probs, fused, pyramid)

    @torch.no_grad()
    def attention(self, x_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor, graphs: GraphBatch):
        """Per-level attention coefficients of the graph branch at one denoising step."""
        if not self.uses_graph:
            raise ValueError("this model has no graph branch")
        temb = self.denoiser.time(t)
        pyramid = self.encoder(cond, t, self.denoiser.encode(x_t, cond, temb))
        volumes = [self.encoder.as_volume(level) for level in pyramid.levels]
        _, attn = self.graph.node_features(volumes, graphs, return_attention=True)
        return attn
