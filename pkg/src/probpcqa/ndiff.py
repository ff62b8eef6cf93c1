"""Closed set of differentiable layers used by the encoders and the rating
generator, on top of torch tensors and torch's reverse-mode autograd.

Every op accepts an optional leading batch dimension. Outputs are checked for
non-finite values, which raise :class:`NonFiniteError`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import torch
import torch.nn.functional as F
from torch import nn


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


# Sign patterns of piecewise-linear ops, recorded only inside record_kinks().
_kink_log: list | None = None


@contextmanager
def record_kinks():
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _note_kink(pre: torch.Tensor) -> None:
    if _kink_log is not None:
        _kink_log.append((pre.detach() > 0).clone())


def relu(x):
    _note_kink(x)
    return F.relu(x)


def absolute(x):
    _note_kink(x)
    return torch.abs(x)


def _checked(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values produced by {what}")
    return t


# --------------------------------------------------------------------------
# parameters


def conv_param(module: nn.Module, name: str, c_out: int, c_in: int, k: int, gen: torch.Generator):
    """Register ``{name}.weight`` (c_out, c_in, k, k) and zero ``{name}.bias``."""
    fan_in = c_in * k * k
    bound = math.sqrt(6.0 / fan_in)
    w = (torch.rand(c_out, c_in, k, k, generator=gen, dtype=torch.float64) * 2 - 1) * bound
    sub = nn.Module()
    sub.weight = nn.Parameter(w.float())
    sub.bias = nn.Parameter(torch.zeros(c_out))
    module.add_module(name, sub)
    return sub


def linear_param(module: nn.Module, name: str, n_in: int, n_out: int, gen: torch.Generator):
    """Register ``{name}.weight`` (n_in, n_out) and zero ``{name}.bias``."""
    bound = math.sqrt(6.0 / n_in)
    w = (torch.rand(n_in, n_out, generator=gen, dtype=torch.float64) * 2 - 1) * bound
    sub = nn.Module()
    sub.weight = nn.Parameter(w.float())
    sub.bias = nn.Parameter(torch.zeros(n_out))
    module.add_module(name, sub)
    return sub


# --------------------------------------------------------------------------
# ops


def conv2d(x, layer, stride=1, padding=0, activation="none"):
    """Cross-correlation with bias; ``x`` is (C, H, W) or (N, C, H, W)."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != layer.weight.shape[1]:
        raise ValueError(
            f"conv2d expects {layer.weight.shape[1]} input channels, got shape {tuple(x.shape)}"
        )
    k = layer.weight.shape[-1]
    if x.shape[-1] + 2 * padding < k or x.shape[-2] + 2 * padding < k:
        raise ValueError(f"input {tuple(x.shape)} too small for kernel {k} with padding {padding}")
    y = F.conv2d(x, layer.weight, layer.bias, stride=stride, padding=padding)
    if activation == "relu":
        y = relu(y)
    elif activation != "none":
        raise ValueError(f"unknown activation {activation!r}")
    y = _checked(y, "conv2d")
    return y[0] if single else y


def linear(x, layer, activation="none"):
    if x.shape[-1] != layer.weight.shape[0]:
        raise ValueError(f"linear expects length {layer.weight.shape[0]}, got {x.shape[-1]}")
    y = x @ layer.weight + layer.bias
    if activation == "relu":
        y = relu(y)
    return _checked(y, "linear")


def spatial_avg(x):
    """Mean over the last two (spatial) axes."""
    return x.mean(dim=(-2, -1))


def avg_pool(x, factor: int):
    """Non-overlapping average pooling by an integer factor."""
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"cannot pool {h}x{w} by a factor of {factor}")
    return F.avg_pool2d(x, factor)


def tile(v, h: int, w: int):
    """Spatially tile a (..., K) vector into (..., K, h, w) constant planes."""
    if h < 1 or w < 1:
        raise ValueError("tile size must be positive")
    return v[..., None, None].expand(*v.shape, h, w)


def concat_channels(*xs):
    return torch.cat(xs, dim=-3)


def sum_views(v):
    """Order-independent sum over axis -2 of a (..., N_v, C) tensor.

    Values are sorted along the view axis first, so any permutation of the
    views yields a bit-identical result.
    """
    return torch.sort(v, dim=-2).values.sum(dim=-2)


def backward(loss: torch.Tensor) -> None:
    if loss.grad_fn is None and not loss.requires_grad:
        raise GraphError("loss has no recorded computation graph")
    if loss.numel() != 1:
        raise GraphError("backward needs a scalar loss")
    _checked(loss.detach(), "loss")
    loss.backward()


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# finite differences


def finite_difference_check(fn, tensors, h=1e-4, n_probe=None, gen=None, stats=None):
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    ``tensors`` must be float64 leaf tensors with ``requires_grad``. Returns
    the worst relative error ``|g - fd| / max(|g|, |fd|, 1e-8)`` over the
    probed entries (all entries unless ``n_probe`` is given).

    A probe whose interval [x - h, x + h] changes the sign pattern of any
    relu or abs input straddles a kink, where the function has no derivative
    to compare against. Such probes are skipped (and replaced when sampling);
    ``stats`` receives the probed and skipped counts.
    """
    for t in tensors:
        t.grad = None
    with record_kinks() as base:
        out = fn()
    out.backward()
    grads = [t.grad.detach().clone() for t in tensors]

    def same(pattern):
        return len(pattern) == len(base) and all(torch.equal(a, b) for a, b in zip(pattern, base))

    worst, probed, skipped = 0.0, 0, 0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            flat = t.view(-1)
            order = range(flat.numel())
            if n_probe is not None:
                order = torch.randperm(flat.numel(), generator=gen).tolist()
            done = 0
            for i in order:
                if n_probe is not None and done >= n_probe:
                    break
                orig = flat[i].item()
                flat[i] = orig + h
                with record_kinks() as k_up:
                    up = fn().item()
                flat[i] = orig - h
                with record_kinks() as k_down:
                    down = fn().item()
                flat[i] = orig
                if not (same(k_up) and same(k_down)):
                    skipped += 1
                    continue
                done += 1
                fd = (up - down) / (2 * h)
                gi = g.view(-1)[i].item()
                denom = max(abs(gi), abs(fd), 1e-8)
                worst = max(worst, abs(gi - fd) / denom)
            probed += done
    if stats is not None:
        stats.update(probed=probed, skipped=skipped)
    return worst
