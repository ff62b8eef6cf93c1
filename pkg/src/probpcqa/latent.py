"""Prior and posterior modules, reparameterized sampling and spatial expansion.

Both encoders share one architecture (five stride-2 3x3 convolutions, spatial
average per view, order-independent sum over views, two linear layers) but
never share parameters. The posterior additionally sees the normalized MOS as
a constant fifth input plane.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import ndiff

LOG_SIGMA_BOUND = 7.0


@dataclass
class GaussianStat:
    mu: torch.Tensor  # (..., K1)
    sigma: torch.Tensor  # (..., K1), strictly positive

    @property
    def k1(self) -> int:
        return self.mu.shape[-1]


@dataclass
class LatentSample:
    z: torch.Tensor
    epsilon: torch.Tensor


class GaussianEncoder(nn.Module):
    def __init__(
        self,
        in_channels: int,
        k1: int = 3,
        channels=(8, 16, 32, 64, 64),
        hidden: int = 32,
        seed: int = 0,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.in_channels = in_channels
        self.k1 = k1
        c_prev = in_channels
        self.n_conv = len(channels)
        for i, c in enumerate(channels):
            ndiff.conv_param(self, f"conv{i}", c, c_prev, 3, gen)
            c_prev = c
        ndiff.linear_param(self, "fc0", c_prev, hidden, gen)
        ndiff.linear_param(self, "fc1", hidden, 2 * k1, gen)

    def forward(self, x: torch.Tensor) -> GaussianStat:
        """``x``: (B, N_v, C, H, W) -> stat with (B, K1) entries."""
        if x.dim() != 5 or x.shape[2] != self.in_channels:
            raise ValueError(
                f"expected (B, N_v, {self.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        b, nv = x.shape[:2]
        h = x.reshape(b * nv, *x.shape[2:])
        for i in range(self.n_conv):
            h = ndiff.conv2d(h, getattr(self, f"conv{i}"), stride=2, padding=1, activation="relu")
        v = ndiff.spatial_avg(h).reshape(b, nv, -1)
        v = ndiff.sum_views(v)
        v = ndiff.linear(v, self.fc0, activation="relu")
        out = ndiff.linear(v, self.fc1)
        mu, log_sigma = out[..., : self.k1], out[..., self.k1 :]
        sigma = torch.exp(torch.clamp(log_sigma, -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND))
        return GaussianStat(mu, sigma)


def encode_prior(views: torch.Tensor, prior: GaussianEncoder) -> GaussianStat:
    return prior(views)


def encode_posterior(views: torch.Tensor, mos, posterior: GaussianEncoder) -> GaussianStat:
    """``mos`` holds one normalized score in [0, 1] per batch item."""
    mos = torch.as_tensor(mos, dtype=views.dtype).reshape(-1)
    if torch.any(mos < 0) or torch.any(mos > 1):
        raise ValueError("normalized MOS must lie in [0, 1]")
    b, nv, _, h, w = views.shape
    plane = mos.reshape(b, 1, 1, 1, 1).expand(b, nv, 1, h, w)
    return posterior(torch.cat([views, plane], dim=2))


def reparameterize(
    stat: GaussianStat,
    gen: torch.Generator | None = None,
    epsilon: torch.Tensor | None = None,
) -> LatentSample:
    """z = sigma * epsilon + mu; pass ``epsilon`` to force the noise draw."""
    if epsilon is None:
        epsilon = torch.randn(stat.mu.shape, generator=gen, dtype=stat.mu.dtype)
    else:
        epsilon = torch.as_tensor(epsilon, dtype=stat.mu.dtype)
    return LatentSample(stat.sigma * epsilon + stat.mu, epsilon)


def expand_spatial(z, h: int, w: int) -> torch.Tensor:
    if isinstance(z, LatentSample):
        z = z.z
    return ndiff.tile(z, h, w)
