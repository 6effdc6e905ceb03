"""Learned building blocks: residual dense block, multi-scale feature
extraction with a self-calibrated unit, and channel attention.

All filters are 3x3 or 1x1 with stride 1. Blocks preserve N x C x H x W.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base for parameterized blocks; children discovered by attribute walk."""

    def named_params(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor):
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_params(key)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{key}.{i}")

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_params())


class Conv2d(Module):
    """3x3 or 1x1 convolution; fan-in-scaled uniform weights, zero bias."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if k not in (1, 3):
            raise ValueError("filter extent must be 1 or 3")
        self.cin, self.cout, self.k = cin, cout, k
        self.pad = k // 2
        if zero_init:
            w = np.zeros((cout, cin, k, k))
        else:
            bound = 1.0 / np.sqrt(cin * k * k)
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=1, pad=self.pad)

    def macs(self, h: int, w: int) -> int:
        return self.cout * self.cin * self.k * self.k * h * w


class ResidualDenseBlock(Module):
    """Four dense 3x3 conv+relu layers, 1x1 fusion over the concat, and a
    local residual. Zero-initialized fusion makes the block an exact identity.
    """

    def __init__(self, channels: int, growth: int, rng: np.random.Generator):
        self.convs = [Conv2d(channels + i * growth, growth, 3, rng)
                      for i in range(4)]
        self.fuse = Conv2d(channels + 4 * growth, channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs:
            inp = feats[0] if len(feats) == 1 else ad.concat_channels(feats)
            feats.append(ad.relu(conv(inp)))
        return ad.add(self.fuse(ad.concat_channels(feats)), x)

    def macs(self, h: int, w: int) -> int:
        return sum(c.macs(h, w) for c in self.convs) + self.fuse.macs(h, w)


class SelfCalibratedUnit(Module):
    """Split-halves residual unit: one half is gated by a sigmoid computed
    from its own 2x-pooled response, the other passes through a plain conv.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        if channels % 2:
            raise ValueError("channel count must be even")
        half = channels // 2
        self.half = half
        self.gate_conv = Conv2d(half, half, 3, rng)
        self.cal_conv = Conv2d(half, half, 3, rng)
        self.plain_conv = Conv2d(half, half, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"extents {x.shape[2:]} not divisible by 2")
        x1 = ad.slice_channels(x, 0, self.half)
        x2 = ad.slice_channels(x, self.half, 2 * self.half)
        gate = ad.sigmoid(ad.upsample_nearest(self.gate_conv(ad.avg_pool(x1, 2)), 2))
        calibrated = ad.mul(gate, self.cal_conv(x1))
        return ad.add(ad.concat_channels([calibrated, self.plain_conv(x2)]), x)

    def macs(self, h: int, w: int) -> int:
        return (self.gate_conv.macs(h // 2, w // 2)
                + self.cal_conv.macs(h, w) + self.plain_conv.macs(h, w))


class MultiScaleBlock(Module):
    """Downsampling / residual learning / upsampling over scales 1, 1/2 and
    1/4, aggregated by a 1x1 conv. Needs extents divisible by 8 (the 1/4
    branch pools once more inside its unit).
    """

    SCALES = (1, 2, 4)

    def __init__(self, channels: int, rng: np.random.Generator):
        self.units = [SelfCalibratedUnit(channels, rng) for _ in self.SCALES]
        self.aggregate = Conv2d(channels * len(self.SCALES), channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError(f"extents {x.shape[2:]} not divisible by 8")
        branches = []
        for factor, unit in zip(self.SCALES, self.units):
            y = x if factor == 1 else ad.avg_pool(x, factor)
            y = unit(y)
            if factor != 1:
                y = ad.upsample_nearest(y, factor)
            branches.append(y)
        return self.aggregate(ad.concat_channels(branches))

    def macs(self, h: int, w: int) -> int:
        total = self.aggregate.macs(h, w)
        for factor, unit in zip(self.SCALES, self.units):
            total += unit.macs(h // factor, w // factor)
        return total


class ChannelAttention(Module):
    """Squeeze-excitation: global average pool, bottleneck 1x1 convs, and a
    sigmoid per-channel rescale of the input."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        if channels % reduction:
            raise ValueError("channels must divide by the reduction ratio")
        self.squeeze = Conv2d(channels, channels // reduction, 1, rng)
        self.excite = Conv2d(channels // reduction, channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        g = ad.sigmoid(self.excite(ad.relu(self.squeeze(ad.channel_mean(x)))))
        return ad.mul(x, g)

    def macs(self, h: int, w: int) -> int:
        # the 1x1 convs run on the pooled 1x1 descriptor
        return self.squeeze.macs(1, 1) + self.excite.macs(1, 1)
