"""Attention maps: Grad-CAM, normalization, co-attention and anti-attention

Maps are torch tensors shaped h×w or N×h×w (batched); every operation is
differentiable so the adversarial attention can be trained through.
"""
import logging
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

RANGE_TOLERANCE = 1e-6


@dataclass(frozen=True)
class AttentionMap:
    values: torch.Tensor
    normalized: bool = False

    def __post_init__(self):
        if self.values.ndim not in (2, 3):
            raise ValueError(f"attention map must be h×w or N×h×w, got shape {tuple(self.values.shape)}")
        v = self.values.detach()
        if not torch.isfinite(v).all():
            raise ValueError("attention map contains NaN/Inf")
        if (v < 0).any():
            raise ValueError("attention map values must be ≥ 0")
        if self.normalized and (v > 1 + RANGE_TOLERANCE).any():
            raise ValueError("normalized attention map values must lie in [0, 1]")

    @property
    def shape(self):
        return tuple(self.values.shape)

    @property
    def spatial_shape(self):
        return tuple(self.values.shape[-2:])


class CoAttentionMap(AttentionMap):
    """Regions every task model attends to"""

    def __init__(self, values: torch.Tensor):
        super().__init__(values=values, normalized=True)


class AntiAttentionMap(AttentionMap):
    """Regions no task model attends to"""

    def __init__(self, values: torch.Tensor):
        super().__init__(values=values, normalized=True)


def _check_finite(name: str, tensor: torch.Tensor) -> None:
    if not torch.isfinite(tensor.detach()).all():
        raise ValueError(f"{name} contains NaN/Inf")


def grad_cam(features: torch.Tensor, grads: torch.Tensor) -> AttentionMap:
    """
    Grad-CAM from tap features and dY/dF

    alpha_k is the spatial mean of the gradient of channel k (Z = h·w);
    the map is ReLU(sum_k alpha_k · F_k).

    Args:
        features: K×h×w or N×K×h×w
        grads: Same shape as features

    Returns:
        Raw (unnormalized) AttentionMap, h×w or N×h×w
    """
    if features.shape != grads.shape:
        raise ValueError(f"features {tuple(features.shape)} and grads {tuple(grads.shape)} differ in shape")
    if features.ndim not in (3, 4):
        raise ValueError(f"features must be K×h×w or N×K×h×w, got {tuple(features.shape)}")
    _check_finite('features', features)
    _check_finite('grads', grads)
    alpha = grads.mean(dim=(-2, -1), keepdim=True)
    return AttentionMap(values=F.relu((alpha * features).sum(dim=-3)), normalized=False)


def _min_max(values: torch.Tensor) -> torch.Tensor:
    flat = values.reshape(-1, *values.shape[-2:]).flatten(1)
    low = flat.min(dim=1, keepdim=True).values
    high = flat.max(dim=1, keepdim=True).values
    spread = high - low
    degenerate = spread <= 0
    scaled = (flat - low) / torch.where(degenerate, torch.ones_like(spread), spread)
    # constant map -> all zeros
    scaled = scaled * (~degenerate).to(scaled.dtype)
    return scaled.reshape(values.shape)


def normalize_map(m: AttentionMap) -> AttentionMap:
    """Min–max scale each map to [0,1]; a constant map becomes all zeros"""
    return AttentionMap(values=_min_max(m.values), normalized=True)


def upsample_map(m: AttentionMap, height: int, width: int) -> AttentionMap:
    """
    Bilinear upsampling with half-pixel centers (no corner alignment)

    Raises:
        ValueError: target smaller than the source
    """
    h, w = m.spatial_shape
    if height < h or width < w:
        raise ValueError(f"upsample_map cannot downscale {h}×{w} to {height}×{width}")
    if (height, width) == (h, w):
        return m
    batched = m.values.unsqueeze(-3) if m.values.ndim == 3 else m.values[None, None]
    up = F.interpolate(batched, size=(height, width), mode='bilinear', align_corners=False)
    values = up[:, 0] if m.values.ndim == 3 else up[0, 0]
    # bilinear weights are convex; clamp only removes rounding below zero
    return AttentionMap(values=values.clamp_min(0), normalized=m.normalized)


def mean_attention(maps: Sequence[AttentionMap]) -> torch.Tensor:
    """
    Pointwise mean of normalized per-task maps, before renormalization

    Raises:
        ValueError: empty list, shape mismatch or an unnormalized input
    """
    if len(maps) == 0:
        raise ValueError("co_attention needs at least one attention map")
    shape = maps[0].shape
    for m in maps:
        if not m.normalized:
            raise ValueError("co_attention inputs must be normalized")
        if m.shape != shape:
            raise ValueError(f"co_attention inputs differ in shape: {m.shape} vs {shape}")
    return torch.stack([m.values for m in maps]).mean(dim=0)


def co_attention(maps: Sequence[AttentionMap]) -> CoAttentionMap:
    """Fuse normalized per-task maps: normalize(mean_k maps_k)"""
    return CoAttentionMap(_min_max(mean_attention(maps)))


def anti_attention(co: AttentionMap) -> AntiAttentionMap:
    """Pointwise complement 1 − co"""
    v = co.values.detach()
    if (v < 0).any() or (v > 1).any():
        raise ValueError("anti_attention input must lie in [0, 1]")
    return AntiAttentionMap(1.0 - co.values)


def attention_mass_fraction(m: AttentionMap, region_mask: torch.Tensor) -> torch.Tensor:
    """
    Share of attention mass inside a binary region: sum(m·mask) / sum(m)

    Works per image for batched maps.

    Raises:
        ValueError: shape mismatch or a map with zero total mass
    """
    if tuple(region_mask.shape) != m.shape:
        raise ValueError(f"region mask {tuple(region_mask.shape)} does not match map {m.shape}")
    values = m.values.detach()
    region = region_mask.to(values.dtype)
    total = values.sum(dim=(-2, -1))
    if (total <= 0).any():
        raise ValueError("undefined mass fraction: attention map has zero total mass")
    return (values * region).sum(dim=(-2, -1)) / total
