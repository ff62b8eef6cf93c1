"""Quality Rating Generator.

A small residual backbone (stride-2 stem, four stride-2 stages) takes each
projection concatenated with the stochastic feature. The last three stage
outputs are reduced to K2 channels, pooled to the deepest resolution,
concatenated and fused by a 3x3 convolution. The fused map is averaged
spatially, summed over views, and a linear head gives one rating.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from . import ndiff


@dataclass
class BackboneConfig:
    stage_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: int = 1
    input_channels: int = 7

    def __post_init__(self):
        if len(self.stage_channels) != 4:
            raise ValueError("the backbone has exactly four stages")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")


class QualityRatingGenerator(nn.Module):
    def __init__(self, backbone: BackboneConfig, k2: int = 32, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.cfg = backbone
        self.k2 = k2
        ch = backbone.stage_channels
        ndiff.conv_param(self, "stem", ch[0], backbone.input_channels, 3, gen)
        c_prev = ch[0]
        for s, c in enumerate(ch):
            for b in range(backbone.blocks_per_stage):
                c_in = c_prev if b == 0 else c
                ndiff.conv_param(self, f"s{s}b{b}a", c, c_in, 3, gen)
                ndiff.conv_param(self, f"s{s}b{b}b", c, c, 3, gen)
                if b == 0:
                    ndiff.conv_param(self, f"s{s}skip", c, c_in, 1, gen)
            c_prev = c
        for lvl, c in zip((2, 3, 4), ch[1:]):
            ndiff.conv_param(self, f"reduce{lvl}", k2, c, 1, gen)
        ndiff.conv_param(self, "fuse", k2, 3 * k2, 3, gen)
        ndiff.linear_param(self, "head", k2, 1, gen)

    # -- pieces -----------------------------------------------------------

    def _block(self, x, s, b):
        stride = 2 if b == 0 else 1
        y = ndiff.conv2d(x, getattr(self, f"s{s}b{b}a"), stride, 1, "relu")
        y = ndiff.conv2d(y, getattr(self, f"s{s}b{b}b"), 1, 1, "none")
        skip = ndiff.conv2d(x, getattr(self, f"s{s}skip"), stride, 0) if b == 0 else x
        return ndiff.relu(y + skip)

    def backbone_features(self, x):
        """(N, 4+K1, H, W) -> feature maps of stages 2, 3 and 4."""
        if x.shape[-3] != self.cfg.input_channels:
            raise ValueError(
                f"backbone expects {self.cfg.input_channels} channels, got {x.shape[-3]}"
            )
        h = ndiff.conv2d(x, self.stem, 2, 1, "relu")
        levels = []
        for s in range(4):
            for b in range(self.cfg.blocks_per_stage):
                h = self._block(h, s, b)
            levels.append(h)
        return levels[1:]

    def fuse_multiscale(self, f2, f3, f4):
        target = f4.shape[-1]
        maps = []
        for lvl, f in zip((2, 3, 4), (f2, f3, f4)):
            r = ndiff.conv2d(f, getattr(self, f"reduce{lvl}"), 1, 0)
            if f.shape[-1] % target or f.shape[-2] % f4.shape[-2]:
                raise ValueError(
                    f"level {lvl} size {tuple(f.shape[-2:])} is not an integer multiple of "
                    f"{tuple(f4.shape[-2:])}"
                )
            maps.append(ndiff.avg_pool(r, f.shape[-1] // target))
        return ndiff.conv2d(ndiff.concat_channels(*maps), self.fuse, 1, 1)

    def forward(self, views, fs):
        """``views`` (B, N_v, 4, H, W), ``fs`` (B, K1, H, W) -> ratings (B,)."""
        b, nv, c, h, w = views.shape
        if fs.shape[-2:] != (h, w):
            raise ValueError(f"stochastic feature {tuple(fs.shape[-2:])} != view size {(h, w)}")
        fs = fs.unsqueeze(1).expand(b, nv, *fs.shape[1:])
        x = torch.cat([views, fs], dim=2).reshape(b * nv, -1, h, w)
        fused = self.fuse_multiscale(*self.backbone_features(x))
        v = ndiff.spatial_avg(fused).reshape(b, nv, -1)
        v = ndiff.sum_views(v)
        return ndiff.linear(v, self.head)[..., 0]


@dataclass
class RatingSample:
    value: float  # normalized scale
    latent: object = None  # LatentSample that produced it, if any


def rate(views, fs, qrg: QualityRatingGenerator):
    return qrg(views, fs)
