"""Grad-CAM, normalization, co-attention and anti-attention"""
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.utils import attention
from src.utils.attention import AntiAttentionMap, AttentionMap, CoAttentionMap


def _map(values, normalized=False):
    return AttentionMap(values=torch.tensor(values, dtype=torch.float64), normalized=normalized)


def test_grad_cam_direct_evaluation():
    features = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    grads = torch.full_like(features, 0.5)
    cam = attention.grad_cam(features, grads)
    assert torch.allclose(cam.values, torch.tensor([[0.5, 1.0], [1.5, 2.0]]))
    assert not cam.normalized


def test_grad_cam_negative_weights_give_zero_map():
    features = torch.rand(3, 4, 4)
    cam = attention.grad_cam(features, -torch.ones_like(features))
    assert (cam.values == 0).all()


def test_grad_cam_batched_matches_single():
    features = torch.randn(2, 3, 4, 4)
    grads = torch.randn(2, 3, 4, 4)
    batched = attention.grad_cam(features, grads)
    for i in range(2):
        assert torch.allclose(batched.values[i], attention.grad_cam(features[i], grads[i]).values)


def test_grad_cam_rejects_bad_input():
    with pytest.raises(ValueError):
        attention.grad_cam(torch.zeros(2, 4, 4), torch.zeros(2, 4, 5))
    bad = torch.zeros(1, 4, 4)
    bad[0, 0, 0] = float('nan')
    with pytest.raises(ValueError, match='NaN'):
        attention.grad_cam(bad, torch.zeros(1, 4, 4))


class _SmoothHead(nn.Module):
    """Class score from features: linear on spatially pooled softplus features"""

    def __init__(self, channels: int, classes: int):
        super().__init__()
        self.linear = nn.Linear(channels, classes).double()

    def forward(self, features):
        pooled = F.softplus(features).mean(dim=(-2, -1))
        return self.linear(pooled).max(dim=-1).values.sum()


@pytest.mark.parametrize('seed', range(10))
def test_grad_cam_matches_finite_differences(seed):
    torch.manual_seed(seed)
    conv = nn.Conv2d(3, 4, kernel_size=3, padding=1).double()
    head = _SmoothHead(4, 3)
    x = torch.rand(1, 3, 6, 6, dtype=torch.float64)
    features = conv(x).detach()[0]

    f = features.clone().requires_grad_(True)
    autodiff = torch.autograd.grad(head(f), f)[0]

    step = 1e-3
    numeric = torch.zeros_like(features)
    flat = features.reshape(-1)
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += step
        minus[i] -= step
        with torch.no_grad():
            numeric.view(-1)[i] = (head(plus.view_as(features)) - head(minus.view_as(features))) / (2 * step)

    cam_auto = attention.grad_cam(features, autodiff).values
    cam_numeric = attention.grad_cam(features, numeric).values
    assert (cam_auto - cam_numeric).abs().max().item() <= 1e-4


def test_normalize_map_examples():
    out = attention.normalize_map(_map([[0.0, 2.0], [4.0, 8.0]]))
    assert out.normalized
    assert torch.allclose(out.values, torch.tensor([[0.0, 0.25], [0.5, 1.0]], dtype=torch.float64))
    assert (attention.normalize_map(_map([[3.0, 3.0], [3.0, 3.0]])).values == 0).all()
    already = _map([[0.0, 0.3], [1.0, 0.5]], normalized=True)
    assert torch.equal(attention.normalize_map(already).values, already.values)


def test_normalize_map_scale_invariance():
    torch.manual_seed(1)
    m = torch.rand(3, 5, 5, dtype=torch.float64) * 7
    base = attention.normalize_map(AttentionMap(m)).values
    for scale, shift in ((0.01, 0.0), (13.0, 2.5), (1e4, 0.1)):
        scaled = attention.normalize_map(AttentionMap(m * scale + shift)).values
        assert (scaled - base).abs().max().item() <= 1e-6


def test_normalize_map_is_per_image():
    m = torch.stack([torch.full((2, 2), 5.0), torch.tensor([[0.0, 1.0], [2.0, 4.0]])])
    out = attention.normalize_map(AttentionMap(m)).values
    assert (out[0] == 0).all()
    assert out[1].max().item() == 1.0


def test_upsample_map():
    constant = attention.upsample_map(_map([[2.0, 2.0], [2.0, 2.0]]), 8, 8)
    assert constant.spatial_shape == (8, 8)
    assert torch.allclose(constant.values, torch.full((8, 8), 2.0, dtype=torch.float64))

    m = _map([[1.0, 0.0], [0.0, 0.0]])
    up = attention.upsample_map(m, 8, 8)
    pooled = F.max_pool2d(up.values[None, None], 4)[0, 0]
    assert pooled.argmax().item() == 0
    assert pooled[0, 0] > pooled[1, 1]

    assert torch.equal(attention.upsample_map(m, 2, 2).values, m.values)
    with pytest.raises(ValueError, match='downscale'):
        attention.upsample_map(_map([[1.0] * 4] * 4), 2, 2)


def test_co_attention_examples():
    single = _map([[0.0, 0.4], [1.0, 0.2]], normalized=True)
    assert torch.allclose(attention.co_attention([single]).values, single.values)

    a = _map([[1.0, 0.0], [0.0, 0.0]], normalized=True)
    b = _map([[1.0, 1.0], [0.0, 0.0]], normalized=True)
    co = attention.co_attention([a, b])
    assert isinstance(co, CoAttentionMap)
    assert torch.allclose(co.values, torch.tensor([[1.0, 0.5], [0.0, 0.0]], dtype=torch.float64))


def test_co_attention_is_permutation_invariant():
    torch.manual_seed(2)
    maps = [AttentionMap(torch.rand(4, 4), normalized=True) for _ in range(3)]
    forward = attention.co_attention(maps).values
    assert torch.allclose(attention.co_attention(maps[::-1]).values, forward)
    assert torch.allclose(attention.co_attention([maps[1], maps[2], maps[0]]).values, forward)


@pytest.mark.parametrize('seed', range(20))
def test_raising_one_map_never_lowers_the_fused_mean(seed):
    torch.manual_seed(seed)
    maps = [AttentionMap(torch.rand(6, 6, dtype=torch.float64), normalized=True) for _ in range(3)]
    k = seed % 3
    raised = maps[k].values + torch.rand(6, 6, dtype=torch.float64) * (1 - maps[k].values)
    bumped = maps[:k] + [AttentionMap(raised, normalized=True)] + maps[k + 1:]
    assert (attention.mean_attention(bumped) >= attention.mean_attention(maps)).all()


def test_co_attention_normalizes_the_fused_mean():
    torch.manual_seed(9)
    maps = [AttentionMap(torch.rand(5, 5), normalized=True) for _ in range(3)]
    expected = attention.normalize_map(AttentionMap(attention.mean_attention(maps))).values
    assert torch.allclose(attention.co_attention(maps).values, expected)


def test_co_attention_rejects_bad_input():
    with pytest.raises(ValueError):
        attention.co_attention([])
    with pytest.raises(ValueError, match='normalized'):
        attention.co_attention([_map([[2.0]])])
    with pytest.raises(ValueError, match='shape'):
        attention.co_attention([_map([[1.0]], True), _map([[1.0, 0.0]], True)])


def test_anti_attention_examples():
    anti = attention.anti_attention(_map([[0.3]], normalized=True))
    assert isinstance(anti, AntiAttentionMap)
    assert torch.allclose(anti.values, torch.tensor([[0.7]], dtype=torch.float64))
    assert (attention.anti_attention(_map([[0.0, 0.0]], normalized=True)).values == 1).all()


def test_anti_attention_identities():
    torch.manual_seed(3)
    co = CoAttentionMap(torch.rand(2, 6, 6, dtype=torch.float64))
    anti = attention.anti_attention(co)
    assert (co.values + anti.values - 1).abs().max().item() <= 1e-7
    assert torch.allclose(attention.anti_attention(anti).values, co.values, atol=1e-12)


def test_attention_map_validation():
    with pytest.raises(ValueError):
        _map([[-0.1, 0.5]])
    with pytest.raises(ValueError):
        _map([[1.5]], normalized=True)
    with pytest.raises(ValueError):
        AttentionMap(torch.zeros(4))
    with pytest.raises(ValueError):
        _map([[float('inf')]])


def test_attention_mass_fraction():
    uniform = _map([[1.0] * 4] * 4)
    quarter = torch.zeros(4, 4, dtype=torch.bool)
    quarter[:2, :2] = True
    assert attention.attention_mass_fraction(uniform, quarter).item() == pytest.approx(0.25)
    assert attention.attention_mass_fraction(uniform, torch.ones(4, 4, dtype=torch.bool)).item() == pytest.approx(1.0)

    outside = _map([[0.0, 0.0], [0.0, 1.0]])
    region = torch.tensor([[True, True], [True, False]])
    assert attention.attention_mass_fraction(outside, region).item() == 0.0

    with pytest.raises(ValueError, match='undefined mass fraction'):
        attention.attention_mass_fraction(_map([[0.0, 0.0]]), torch.tensor([[True, False]]))
    with pytest.raises(ValueError):
        attention.attention_mass_fraction(uniform, torch.ones(2, 2, dtype=torch.bool))
