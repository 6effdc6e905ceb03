"""Confidence-based cross-view fusion.

The converted reference features are blended into the target features under
the confidence map, then re-fused with channel attention. One parameter set
serves the left and right branches of a stage.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import ChannelAttention, Conv2d, Module, ResidualDenseBlock


def confidence_blend(f_target: Tensor, f_fused: Tensor, conf: Tensor) -> Tensor:
    """conf * f_fused + (1 - conf) * f_target, conf broadcast over channels."""
    if f_target.shape != f_fused.shape:
        raise ValueError("blend operands must share a shape")
    if conf.shape != (f_target.shape[0], 1) + tuple(f_target.shape[2:]):
        raise ValueError("confidence map must be N x 1 x H x W")
    inv = ad.sub(Tensor(np.ones(conf.shape)), conf)
    return ad.add(ad.mul(f_fused, conf), ad.mul(f_target, inv))


class CrossViewFusion(Module):
    """Fuse a view's features with features converted from the other view."""

    def __init__(self, channels: int, growth: int, rng: np.random.Generator,
                 ca_reduction: int = 4):
        self.reduce = Conv2d(2 * channels, channels, 1, rng)
        self.rdb = ResidualDenseBlock(channels, growth, rng)
        self.ca = ChannelAttention(2 * channels, rng, reduction=ca_reduction)
        self.out_conv = Conv2d(2 * channels, channels, 3, rng)

    def __call__(self, f_target: Tensor, f_converted: Tensor, conf: Tensor) -> Tensor:
        fused = self.rdb(self.reduce(ad.concat_channels([f_target, f_converted])))
        blended = confidence_blend(f_target, fused, conf)
        return self.out_conv(self.ca(ad.concat_channels([blended, f_target])))

    def macs(self, h: int, w: int) -> int:
        return (self.reduce.macs(h, w) + self.rdb.macs(h, w)
                + self.ca.macs(h, w) + self.out_conv.macs(h, w))
