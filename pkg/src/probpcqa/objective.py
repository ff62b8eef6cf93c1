"""Loss terms: Gaussian KL, MAE reconstruction, KL annealing and the
alpha-weighted combination of the posterior (CVAE) and prior (GSNN) branches."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from . import ndiff
from .latent import GaussianStat, encode_posterior, encode_prior, expand_spatial, reparameterize
from .model import ProbQualityModel


def kl_diag_gauss(q: GaussianStat, p: GaussianStat) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mu.shape[-1] != p.mu.shape[-1]:
        raise ValueError(f"dimension mismatch: {q.mu.shape[-1]} vs {p.mu.shape[-1]}")
    term = (
        torch.log(p.sigma) - torch.log(q.sigma)
        + (q.sigma**2 + (q.mu - p.mu) ** 2) / (2 * p.sigma**2)
        - 0.5
    )
    return term.sum(dim=-1)


def recon_mae(rating, mos) -> torch.Tensor:
    # subgradient 0 at the kink
    return ndiff.absolute(rating - torch.as_tensor(mos, dtype=rating.dtype))


def lambda_schedule(epoch: int, total_epochs: int) -> float:
    if not 1 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [1, {total_epochs}]")
    return epoch / total_epochs


@dataclass
class LossBreakdown:
    recon_post: torch.Tensor
    kl: torch.Tensor
    recon_prior: torch.Tensor
    lam: float
    alpha: float
    total: torch.Tensor
    per_sample: torch.Tensor | None = None  # (B,) totals, for divergence diagnostics

    def as_dict(self) -> dict:
        return {
            "recon_post": self.recon_post.item(),
            "kl": self.kl.item(),
            "recon_prior": self.recon_prior.item(),
            "lambda": self.lam,
            "alpha": self.alpha,
            "total": self.total.item(),
        }


def combine(recon_post, kl, recon_prior, lam, alpha):
    return alpha * (recon_post + lam * kl) + (1 - alpha) * recon_prior


def overall_loss(
    model: ProbQualityModel,
    views: torch.Tensor,
    mos: torch.Tensor,
    lam: float,
    alpha: float,
    gen: torch.Generator | None = None,
) -> LossBreakdown:
    """Batch-mean loss for ``views`` (B, N_v, 4, H, W) and normalized ``mos`` (B,).

    The posterior and prior branches draw independent noise and share the QRG.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    mos = torch.as_tensor(mos, dtype=views.dtype).reshape(-1)
    h, w = views.shape[-2:]
    q = encode_posterior(views, mos, model.posterior)
    p = encode_prior(views, model.prior)
    z_q = reparameterize(q, gen)
    z_p = reparameterize(p, gen)
    r_post = model.qrg(views, expand_spatial(z_q, h, w))
    r_prior = model.qrg(views, expand_spatial(z_p, h, w))
    l_post = recon_mae(r_post, mos)
    l_prior = recon_mae(r_prior, mos)
    kl = kl_diag_gauss(q, p)
    per_sample = combine(l_post, kl, l_prior, lam, alpha)
    return LossBreakdown(
        recon_post=l_post.mean(),
        kl=kl.mean(),
        recon_prior=l_prior.mean(),
        lam=lam,
        alpha=alpha,
        total=per_sample.mean(),
        per_sample=per_sample.detach(),
    )


def deterministic_loss(model: ProbQualityModel, views, mos) -> LossBreakdown:
    """Plain MAE of the QRG on zero stochastic features."""
    mos = torch.as_tensor(mos, dtype=views.dtype).reshape(-1)
    r = model.qrg(views, model.zero_feature(views))
    l = recon_mae(r, mos)
    zero = torch.zeros((), dtype=views.dtype)
    return LossBreakdown(l.mean(), zero, zero, 0.0, 1.0, l.mean(), l.detach())
