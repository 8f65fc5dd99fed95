import math

import pytest
import torch
from hypothesis import given, strategies as st

from sslchange.exceptions import ConfigurationError, ShapeError
from sslchange.head import (CODE_DIM, ContrastiveCodes, HierarchicalContrastiveHead, channel_loss,
                            neg_cos, spatial_loss, total_loss)


def test_neg_cos_hand_value():
    # cos 45 degrees
    p = torch.tensor([1.0, 1.0])
    z = torch.tensor([1.0, 0.0])
    assert neg_cos(p, z).item() == pytest.approx(-0.70710678, abs=1e-7)


def test_neg_cos_is_minus_one_for_parallel_codes():
    p = torch.randn(5, 16)
    assert neg_cos(3 * p, p).item() == pytest.approx(-1.0, abs=1e-6)


def test_neg_cos_map_modes_differ():
    torch.manual_seed(0)
    p, z = torch.randn(2, 4, 3, 3), torch.randn(2, 4, 3, 3)
    loc = neg_cos(p, z, mode="location")
    flat = neg_cos(p, z, mode="flatten")
    manual = -torch.nn.functional.cosine_similarity(p, z, dim=1).mean()
    assert loc.item() == pytest.approx(manual.item(), abs=1e-6)
    assert not math.isclose(loc.item(), flat.item())
    with pytest.raises(ConfigurationError):
        neg_cos(p, z, mode="bogus")
    with pytest.raises(ShapeError):
        neg_cos(p, z[:, :2])


def test_stop_gradient_blocks_z():
    p = torch.randn(4, 8, requires_grad=True)
    z = torch.randn(4, 8, requires_grad=True)
    neg_cos(p, z).backward()
    assert z.grad is None and p.grad.abs().sum() > 0
    z.grad = None
    neg_cos(p, z, stop_grad=False).backward()
    assert z.grad.abs().sum() > 0


def test_head_shapes():
    head = HierarchicalContrastiveHead(feature_channels=8).eval()
    f = torch.randn(2, 8, 16, 16)
    codes = head(f, f + 0.1)
    assert codes.z1.shape == codes.p1.shape == f.shape
    assert codes.z2.shape == codes.p2.shape == (2, CODE_DIM)


def test_disabled_branch_produces_no_codes():
    head = HierarchicalContrastiveHead(feature_channels=8, spatial=False)
    codes = head(torch.randn(2, 8, 4, 4), torch.randn(2, 8, 4, 4))
    assert codes.z1 is None and codes.z2 is not None


def test_total_loss_weighting():
    out = total_loss(torch.tensor(-0.2), torch.tensor(-0.6), alpha=0.25)
    assert out.total.item() == pytest.approx(0.25 * -0.2 + 0.75 * -0.6)
    with pytest.raises(ConfigurationError):
        total_loss(torch.tensor(0.0), torch.tensor(0.0), alpha=1.5)


def _random_codes(seed, n=3, c=4, hw=3, d=6):
    g = torch.Generator().manual_seed(seed)
    m = lambda: torch.randn(n, c, hw, hw, generator=g)  # noqa: E731
    v = lambda: torch.randn(n, d, generator=g)  # noqa: E731
    return ContrastiveCodes(m(), m(), m(), m(), v(), v(), v(), v())


@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_losses_bounded_and_swap_symmetric(seed, alpha):
    codes = _random_codes(seed)
    for loss in (spatial_loss(codes), channel_loss(codes)):
        assert -1 - 1e-6 <= loss.item() <= 1 + 1e-6
    a = total_loss(spatial_loss(codes), channel_loss(codes), alpha).total
    sw = codes.swapped()
    b = total_loss(spatial_loss(sw), channel_loss(sw), alpha).total
    assert a.item() == pytest.approx(b.item(), abs=1e-6)


@given(st.integers(1, 64), st.floats(0.1, 10))
def test_neg_cos_scale_invariant(dim, scale):
    g = torch.Generator().manual_seed(dim)
    p, z = torch.randn(dim, generator=g), torch.randn(dim, generator=g)
    assert neg_cos(p * scale, z).item() == pytest.approx(neg_cos(p, z).item(), abs=1e-5)
