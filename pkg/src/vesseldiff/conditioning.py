"""
Denoising UNet over [noisy mask | 3 CT slices] and the timestep-dependent
CT encoder that feeds it.

The encoder keeps one channel group per CT slice (grouped convolutions) and
receives the denoiser's encoder features at every depth, so its embedding of
the CT block follows the noise level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ConditionBlock:
    """Three consecutive CT slices (channel-stacked) around an annotated slice."""

    slices: np.ndarray  # (3, H, W) float, already clipped and normalised
    spacing: tuple = (1.0, 1.0, 1.0)
    center_index: int = 0

    def __post_init__(self):
        arr = np.asarray(self.slices)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValueError(f"condition block needs exactly 3 slices, got shape {arr.shape}")

    def tensor(self) -> torch.Tensor:
        return torch.as_tensor(np.asarray(self.slices, dtype=np.float32))


@dataclass
class FeaturePyramid:
    levels: List[torch.Tensor]
    t: Optional[torch.Tensor] = None

    def __len__(self):
        return len(self.levels)

    def check(self, size: Sequence[int]) -> None:
        for k, f in enumerate(self.levels):
            expect = (size[0] >> k, size[1] >> k)
            if tuple(f.shape[-2:]) != expect:
                raise ValueError(f"level {k} has spatial size {tuple(f.shape[-2:])}, expected {expect}")
            if not torch.isfinite(f).all():
                raise ValueError(f"level {k} has non-finite values")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.SiLU(), nn.Linear(dim * 2, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.dim)
        return self.mlp(emb.to(self.mlp[0].weight.dtype))


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    # never let a normalisation group straddle two slice groups
    per = channels // groups
    return nn.GroupNorm(groups * math.gcd(per, 4), channels)


class ConvBlock(nn.Module):
    """conv-norm-act twice with an additive timestep bias and a residual path."""

    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, groups=groups)
        self.norm1 = _norm(cout, groups)
        self.temb = nn.Linear(temb_dim, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, groups=groups)
        self.norm2 = _norm(cout, groups)
        self.skip = nn.Conv2d(cin, cout, 1, groups=groups) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class DenoiserNet(nn.Module):
    """UNet predicting the noise on the central-slice mask."""

    in_channels = 4

    def __init__(self, base_width: int = 32, depths: int = 4, temb_dim: int = 64):
        super().__init__()
        self.widths = [base_width * 2 ** k for k in range(depths)]
        w = self.widths
        self.time = TimeEmbedding(temb_dim)
        self.enc = nn.ModuleList([ConvBlock(self.in_channels, w[0], temb_dim)])
        self.down = nn.ModuleList()
        for k in range(1, depths):
            self.down.append(nn.Conv2d(w[k - 1], w[k - 1], 3, stride=2, padding=1))
            self.enc.append(ConvBlock(w[k - 1], w[k], temb_dim))
        self.mid = ConvBlock(w[-1], w[-1], temb_dim)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for k in range(depths - 2, -1, -1):
            self.up.append(nn.Conv2d(w[k + 1], w[k + 1], 3, padding=1))
            self.dec.append(ConvBlock(w[k + 1] + w[k], w[k], temb_dim))
        self.out_norm = _norm(w[0], 1)
        self.out = nn.Conv2d(w[0], 1, 1)

    @property
    def bottleneck_channels(self) -> int:
        return self.widths[-1]

    def encode(self, x_t: torch.Tensor, cond: torch.Tensor, temb: torch.Tensor) -> List[torch.Tensor]:
        if x_t.shape[-2:] != cond.shape[-2:]:
            raise ValueError("noisy mask and CT block are not spatially aligned")
        h = torch.cat([x_t, cond], dim=1)
        if h.shape[1] != self.in_channels:
            raise ValueError(f"denoiser expects {self.in_channels} input channels, got {h.shape[1]}")
        feats = [self.enc[0](h, temb)]
        for down, block in zip(self.down, self.enc[1:]):
            feats.append(block(down(feats[-1]), temb))
        return feats

    def decode(self, feats: List[torch.Tensor], temb: torch.Tensor, bottleneck_add=None, level_add=None):
        """``level_add`` optionally maps a decoder level index to an additive tensor."""
        h = feats[-1]
        if bottleneck_add is not None:
            h = h + bottleneck_add
        h = self.mid(h, temb)
        for i, (up, block) in enumerate(zip(self.up, self.dec)):
            k = len(feats) - 2 - i
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, feats[k]], dim=1), temb)
            if level_add is not None and k in level_add:
                h = h + level_add[k]
        return self.out(F.silu(self.out_norm(h)))

    def forward(self, x_t, cond, t, fused=None):
        temb = self.time(t)
        return self.decode(self.encode(x_t, cond, temb), temb, fused)


class DynamicEncoderNet(nn.Module):
    """Slice-grouped CT encoder that absorbs the denoiser's noisy features."""

    groups = 3

    def __init__(self, slice_width: int = 8, depths: int = 4, temb_dim: int = 64,
                 denoiser_widths: Sequence[int] = (), merge_levels: Optional[Sequence[int]] = None):
        super().__init__()
        self.slice_widths = [slice_width * 2 ** k for k in range(depths)]
        ch = [self.groups * c for c in self.slice_widths]
        self.channels = ch
        self.time = TimeEmbedding(temb_dim)
        self.stem = nn.Conv2d(self.groups, ch[0], 3, padding=1, groups=self.groups, bias=False)
        self.blocks = nn.ModuleList([ConvBlock(ch[0], ch[0], temb_dim, self.groups)])
        self.down = nn.ModuleList()
        for k in range(1, depths):
            self.down.append(nn.Conv2d(ch[k - 1], ch[k - 1], 3, stride=2, padding=1, groups=self.groups))
            self.blocks.append(ConvBlock(ch[k - 1], ch[k], temb_dim, self.groups))
        if merge_levels is None:
            merge_levels = range(depths)
        self.merge_levels = sorted(int(k) for k in merge_levels)
        self.merge = nn.ModuleDict(
            {str(k): nn.Conv2d(denoiser_widths[k], ch[k], 1) for k in self.merge_levels} if denoiser_widths else {}
        )

    def first_stage(self, cond: torch.Tensor) -> torch.Tensor:
        return self.stem(cond)

    def forward(self, cond: torch.Tensor, t: torch.Tensor, noisy_feats: Optional[Sequence[torch.Tensor]] = None):
        if cond.shape[1] != self.groups:
            raise ValueError("CT block must have 3 slices")
        if noisy_feats is not None and len(noisy_feats) != len(self.blocks):
            raise ValueError(f"pyramid depth mismatch: {len(noisy_feats)} vs {len(self.blocks)}")
        temb = self.time(t)
        levels = []
        h = self.stem(cond)
        for k, block in enumerate(self.blocks):
            if k:
                h = self.down[k - 1](h)
            h = block(h, temb)
            if noisy_feats is not None and str(k) in self.merge:
                h = h + self.merge[str(k)](noisy_feats[k])
            levels.append(h)
        return FeaturePyramid(levels, t)

    def as_volume(self, level: torch.Tensor) -> torch.Tensor:
        """(B, 3*C, H, W) -> (B, C, 3, H, W): slice groups become a depth axis."""
        b, c, h, w = level.shape
        return level.view(b, self.groups, c // self.groups, h, w).transpose(1, 2)
