"""The full probabilistic rating model: prior, posterior and a shared QRG."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .latent import GaussianEncoder
from .qrg import BackboneConfig, QualityRatingGenerator


@dataclass
class ModelConfig:
    k1: int = 3
    k2: int = 32
    encoder_channels: list = field(default_factory=lambda: [8, 16, 32, 64, 64])
    encoder_hidden: int = 32
    stage_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: int = 1
    stochastic: bool = True
    seed: int = 0


class ProbQualityModel(nn.Module):
    """Parameters live under three disjoint prefixes: ``prior.`` (theta),
    ``posterior.`` (phi) and ``qrg.`` (omega). The deterministic variant has
    only ``qrg.``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        seeds = torch.Generator().manual_seed(cfg.seed)
        s_prior, s_post, s_qrg = torch.randint(0, 2**31 - 1, (3,), generator=seeds).tolist()
        if cfg.stochastic:
            self.prior = GaussianEncoder(4, cfg.k1, cfg.encoder_channels, cfg.encoder_hidden, s_prior)
            self.posterior = GaussianEncoder(
                5, cfg.k1, cfg.encoder_channels, cfg.encoder_hidden, s_post
            )
        backbone = BackboneConfig(list(cfg.stage_channels), cfg.blocks_per_stage, 4 + cfg.k1)
        self.qrg = QualityRatingGenerator(backbone, cfg.k2, s_qrg)

    @property
    def stochastic(self) -> bool:
        return self.cfg.stochastic

    def zero_feature(self, views: torch.Tensor) -> torch.Tensor:
        b, _, _, h, w = views.shape
        return torch.zeros(b, self.cfg.k1, h, w, dtype=views.dtype)
