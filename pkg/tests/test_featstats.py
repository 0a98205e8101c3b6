import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ashplus.errors import InvalidInputError, ShapeError
from ashplus.featstats import EPS, adain, channel_stats, content_loss
from fd import central_diff, probe_indices, rel_err


def _rand(shape, seed, dtype=torch.float64, scale=1.0, shift=0.0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=dtype) * scale + shift


def _brute_stats(f):
    """Per-(b, c) mean and population std by explicit loops over numpy values."""
    arr = f.detach().numpy()
    B, C = arr.shape[:2]
    mean = np.zeros((B, C))
    std = np.zeros((B, C))
    for b in range(B):
        for c in range(C):
            vals = arr[b, c].ravel().tolist()
            m = sum(vals) / len(vals)
            mean[b, c] = m
            std[b, c] = max(EPS, math.sqrt(sum((v - m) ** 2 for v in vals) / len(vals)))
    return mean, std


def test_zero_map_stats():
    s = channel_stats(torch.zeros(1, 1, 2, 2))
    assert s.mean.item() == 0.0
    assert s.std.item() == pytest.approx(EPS, rel=1e-6)


def test_hand_example_stats():
    f = torch.tensor([[[[1.0, 3.0], [5.0, 7.0]]]], dtype=torch.float64)
    s = channel_stats(f)
    assert s.mean.item() == pytest.approx(4.0)
    assert s.std.item() == pytest.approx(math.sqrt(5.0))


def test_stats_match_brute_force():
    f = _rand((2, 3, 4, 5), 0, scale=2.0, shift=1.0)
    mean, std = _brute_stats(f)
    s = channel_stats(f)
    np.testing.assert_allclose(s.mean.numpy(), mean, atol=1e-12)
    np.testing.assert_allclose(s.std.numpy(), std, atol=1e-12)


def test_non_finite_rejected():
    f = torch.zeros(1, 1, 2, 2)
    f[0, 0, 0, 0] = float("nan")
    with pytest.raises(InvalidInputError):
        channel_stats(f)


def test_adain_identity():
    f = _rand((2, 3, 4, 4), 1, dtype=torch.float32)
    assert torch.allclose(adain(f, f), f, atol=1e-6)


def test_adain_constant_source():
    src = torch.full((1, 1, 3, 3), 5.0, dtype=torch.float64)
    style = _rand((1, 1, 4, 4), 2)
    style = (style - style.mean()) / style.std(unbiased=False) * 3.0 + 2.0
    out = adain(src, style)
    assert torch.allclose(out, torch.full_like(src, 2.0), atol=1e-9)


def test_adain_stats_match_style_brute_force():
    a = _rand((1, 2, 3, 3), 3)
    b = _rand((1, 2, 3, 3), 4, scale=1.7, shift=-0.4)
    mean, std = _brute_stats(adain(a, b))
    bmean, bstd = _brute_stats(b)
    np.testing.assert_allclose(mean, bmean, atol=1e-5)
    np.testing.assert_allclose(std, bstd, atol=1e-5)


def test_adain_spatial_sizes_may_differ():
    out = adain(_rand((2, 3, 4, 4), 5), _rand((2, 3, 7, 2), 6))
    assert out.shape == (2, 3, 4, 4)


def test_adain_channel_mismatch():
    with pytest.raises(ShapeError):
        adain(torch.ones(1, 2, 3, 3), torch.ones(1, 3, 3, 3))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), scale=st.floats(0.1, 10.0), shift=st.floats(-5.0, 5.0))
def test_adain_matches_style_stats_property(seed, scale, shift):
    a = _rand((2, 3, 5, 4), seed, dtype=torch.float32)
    b = _rand((2, 3, 3, 6), seed + 1, dtype=torch.float32, scale=scale, shift=shift)
    out_stats, style_stats = channel_stats(adain(a, b)), channel_stats(b)
    assert (style_stats.std > 10 * EPS).all()
    tol = 1e-5 * max(1.0, scale, abs(shift))
    assert torch.allclose(out_stats.mean, style_stats.mean, atol=tol, rtol=0)
    assert torch.allclose(out_stats.std, style_stats.std, atol=tol, rtol=0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_adain_idempotent(seed):
    a = _rand((1, 3, 4, 4), seed, dtype=torch.float32)
    b = _rand((1, 3, 4, 4), seed + 7, dtype=torch.float32, scale=2.0)
    once = adain(a, b)
    assert torch.allclose(adain(once, b), once, atol=1e-5)


def test_content_loss_values():
    f = _rand((1, 2, 3, 3), 8)
    assert content_loss(f, f).item() == 0.0
    assert content_loss(torch.ones(1, 1, 1, 2), torch.zeros(1, 1, 1, 2)).item() == pytest.approx(math.sqrt(2))
    assert content_loss(f, adain(f, f)).item() == pytest.approx(0.0, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), equal=st.booleans())
def test_content_loss_nonnegative_and_zero_iff_equal(seed, equal):
    a = _rand((1, 2, 2, 3), seed)
    b = a.clone() if equal else _rand((1, 2, 2, 3), seed + 1)
    value = content_loss(a, b).item()
    assert value >= 0.0
    assert (value == 0.0) == torch.equal(a, b)


def test_content_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        content_loss(torch.ones(1, 1, 2, 2), torch.ones(1, 1, 2, 3))


@pytest.mark.parametrize("which", ["src", "style"])
def test_adain_gradient_matches_finite_differences(which):
    a = _rand((1, 2, 3, 3), 11).requires_grad_(True)
    b = _rand((1, 2, 3, 3), 12, scale=1.5).requires_grad_(True)
    weights = _rand((1, 2, 3, 3), 13)

    def f():
        return (adain(a, b) * weights).sum()

    f().backward()
    target = a if which == "src" else b
    rng = np.random.default_rng(0)
    for idx in probe_indices(target, 18, rng):
        numeric = central_diff(f, target.data, idx)
        assert rel_err(target.grad[idx].item(), numeric) <= 1e-3


def test_content_loss_gradient_matches_finite_differences():
    a = _rand((1, 2, 3, 3), 21).requires_grad_(True)
    m = _rand((1, 2, 3, 3), 22).requires_grad_(True)

    def f():
        return content_loss(a, m)

    f().backward()
    rng = np.random.default_rng(1)
    for target in (a, m):
        for idx in probe_indices(target, 18, rng):
            assert rel_err(target.grad[idx].item(), central_diff(f, target.data, idx)) <= 1e-3
