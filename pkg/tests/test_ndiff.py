from types import SimpleNamespace

import numpy as np
import pytest
import torch
from torch import nn

from probpcqa import ndiff

SEEDS = range(20)
FD_TOL = 1e-4


def layer(weight, bias, grad=False):
    w = torch.as_tensor(weight, dtype=torch.float64).clone().requires_grad_(grad)
    b = torch.as_tensor(bias, dtype=torch.float64).clone().requires_grad_(grad)
    return SimpleNamespace(weight=w, bias=b)


def conv_oracle(x, w, b, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


def test_conv_identity_kernel():
    x = torch.arange(9, dtype=torch.float64).reshape(1, 3, 3)
    y = ndiff.conv2d(x, layer(np.ones((1, 1, 1, 1)), [0.0]))
    assert torch.equal(y, x)


def test_conv_output_size():
    x = torch.zeros(1, 4, 4, dtype=torch.float64)
    l = layer(np.random.default_rng(0).normal(size=(1, 1, 3, 3)), [0.0])
    assert ndiff.conv2d(x, l, stride=2, padding=1).shape == (1, 2, 2)


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_nested_loops(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 7, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    for stride, pad in [(1, 0), (2, 1), (1, 1)]:
        got = ndiff.conv2d(torch.tensor(x), layer(w, b), stride, pad).numpy()
        assert np.max(np.abs(got - conv_oracle(x, w, b, stride, pad))) < 1e-6
    relu = ndiff.conv2d(torch.tensor(x), layer(w, b), 1, 1, "relu").numpy()
    assert np.allclose(relu, np.maximum(conv_oracle(x, w, b, 1, 1), 0))


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        ndiff.conv2d(torch.zeros(2, 4, 4), layer(np.zeros((1, 3, 3, 3)), [0.0]))


def test_linear_cases():
    x = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
    assert torch.equal(ndiff.linear(x, layer(np.eye(3), np.zeros(3))), x)
    b = [0.5, -1.5]
    assert ndiff.linear(x, layer(np.zeros((3, 2)), b)).tolist() == b
    rng = np.random.default_rng(1)
    for _ in range(5):
        xv, w, bv = rng.normal(size=5), rng.normal(size=(5, 4)), rng.normal(size=4)
        got = ndiff.linear(torch.tensor(xv), layer(w, bv)).numpy()
        want = [sum(xv[i] * w[i, j] for i in range(5)) + bv[j] for j in range(4)]
        assert np.max(np.abs(got - want)) < 1e-6
    with pytest.raises(ValueError):
        ndiff.linear(torch.zeros(4, dtype=torch.float64), layer(np.zeros((3, 2)), [0, 0]))


def test_spatial_avg_cases():
    assert ndiff.spatial_avg(torch.full((2, 3, 3), 4.0)).tolist() == [4.0, 4.0]
    assert ndiff.spatial_avg(torch.tensor([[[0.0, 1.0], [2.0, 3.0]]])).tolist() == [1.5]
    x = np.random.default_rng(2).normal(size=(3, 5, 4))
    want = [sum(x[c].ravel()) / 20 for c in range(3)]
    assert np.max(np.abs(ndiff.spatial_avg(torch.tensor(x)).numpy() - want)) < 1e-7


def test_avg_pool_and_tile():
    x = torch.arange(16, dtype=torch.float64).reshape(1, 4, 4)
    assert ndiff.avg_pool(x, 2)[0].tolist() == [[2.5, 4.5], [10.5, 12.5]]
    with pytest.raises(ValueError):
        ndiff.avg_pool(torch.zeros(1, 6, 6), 4)
    t = ndiff.tile(torch.tensor([1.0, 2.0, 3.0]), 2, 2)
    assert t.shape == (3, 2, 2)
    assert t[2].tolist() == [[3.0, 3.0], [3.0, 3.0]]


def test_sum_views_is_order_free():
    v = torch.randn(3, 5, 7, generator=torch.Generator().manual_seed(0))
    a = ndiff.sum_views(v)
    b = ndiff.sum_views(v[:, [4, 2, 0, 3, 1]])
    assert torch.equal(a, b)
    assert torch.allclose(a, v.sum(dim=1), atol=1e-6)


def test_backward_sum_gives_ones():
    w = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    ndiff.backward(w.sum())
    assert torch.equal(w.grad, torch.ones_like(w))


def test_backward_accumulates_over_branches():
    l = layer(np.random.default_rng(3).normal(size=(4, 2)), [0.1, 0.2], grad=True)
    x1 = torch.randn(4, dtype=torch.float64)
    x2 = torch.randn(4, dtype=torch.float64)
    ndiff.backward(ndiff.linear(x1, l).sum())
    g1 = l.weight.grad.clone()
    ndiff.zero_grad([l.weight, l.bias])
    ndiff.backward(ndiff.linear(x2, l).sum())
    g2 = l.weight.grad.clone()
    ndiff.zero_grad([l.weight, l.bias])
    ndiff.backward(ndiff.linear(x1, l).sum() + ndiff.linear(x2, l).sum())
    assert torch.allclose(l.weight.grad, g1 + g2)


def test_backward_without_graph():
    with pytest.raises(ndiff.GraphError):
        ndiff.backward(torch.tensor(1.0))


def test_non_finite_raises():
    with pytest.raises(ndiff.NonFiniteError):
        ndiff.linear(torch.tensor([np.inf, 0.0], dtype=torch.float64), layer(np.eye(2), [0, 0]))


def test_parameter_init_deterministic_and_named():
    def build(seed):
        m = nn.Module()
        g = torch.Generator().manual_seed(seed)
        ndiff.conv_param(m, "c", 4, 3, 3, g)
        ndiff.linear_param(m, "f", 4, 2, g)
        return m

    a, b = build(1), build(1)
    names = [n for n, _ in a.named_parameters()]
    assert names == ["c.weight", "c.bias", "f.weight", "f.bias"]
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q)
    assert not a.c.bias.any()
    assert a.c.weight.abs().max() <= (6 / 27) ** 0.5


# -- finite-difference gradient checks, 20 seeds per op ----------------------


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_conv2d(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 6, 5, dtype=torch.float64, generator=g, requires_grad=True)
    w = torch.randn(3, 2, 3, 3, dtype=torch.float64, generator=g, requires_grad=True)
    b = torch.randn(3, dtype=torch.float64, generator=g, requires_grad=True)
    l = SimpleNamespace(weight=w, bias=b)
    mix = torch.randn(3, 3, 3, dtype=torch.float64, generator=g)
    err = ndiff.finite_difference_check(
        lambda: (ndiff.conv2d(x, l, 2, 1) * mix).sum(), [x, w, b]
    )
    assert err < FD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_linear(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(5, dtype=torch.float64, generator=g, requires_grad=True)
    w = torch.randn(5, 3, dtype=torch.float64, generator=g, requires_grad=True)
    b = torch.randn(3, dtype=torch.float64, generator=g, requires_grad=True)
    l = SimpleNamespace(weight=w, bias=b)
    mix = torch.randn(3, dtype=torch.float64, generator=g)
    err = ndiff.finite_difference_check(lambda: (ndiff.linear(x, l) ** 2 * mix).sum(), [x, w, b])
    assert err < FD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_spatial_avg_pool_tile(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 4, 4, dtype=torch.float64, generator=g, requires_grad=True)
    z = torch.randn(3, dtype=torch.float64, generator=g, requires_grad=True)
    mix = torch.randn(2, dtype=torch.float64, generator=g)
    err = ndiff.finite_difference_check(
        lambda: (ndiff.spatial_avg(ndiff.avg_pool(x, 2) ** 2) * mix).sum()
        + (ndiff.tile(z, 3, 2) ** 2).sum(),
        [x, z],
    )
    assert err < FD_TOL


def test_tile_gradient_is_area():
    z = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64, requires_grad=True)
    ndiff.backward(ndiff.tile(z, 3, 5).sum())
    assert z.grad.tolist() == [15.0, 15.0, 15.0]


def test_fd_check_skips_probes_across_a_kink():
    x = torch.tensor([1e-5, 0.5], dtype=torch.float64, requires_grad=True)
    stats = {}
    err = ndiff.finite_difference_check(lambda: ndiff.relu(x).sum(), [x], stats=stats)
    assert err < 1e-12
    assert stats == {"probed": 1, "skipped": 1}
    with ndiff.record_kinks() as log:
        ndiff.absolute(torch.tensor([-1.0, 2.0]))
    assert log[0].tolist() == [False, True]
