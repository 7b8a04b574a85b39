"""Dual-branch multi-scale backbone and learned scale weighting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .layers import Conv2d, ConvNormAct, Module
from .tensor_core import DimensionError, Tensor

MODALITY_CHANNELS = {"visible": 3, "infrared": 1}
LEVEL_STRIDES = (8, 16, 32)


@dataclass
class FeaturePyramid:
    levels: list[Tensor]
    modality: str

    def __post_init__(self):
        if len(self.levels) != 3:
            raise DimensionError(f"pyramid needs 3 levels, got {len(self.levels)}")
        for prev, cur in zip(self.levels, self.levels[1:]):
            if cur.shape[2] * 2 != prev.shape[2] or cur.shape[3] * 2 != prev.shape[3]:
                raise DimensionError(f"level dims must halve: {prev.shape} -> {cur.shape}")


def to_nchw(image) -> Tensor:
    """Accept an ``H x W x C`` image or an ``(N, C, H, W)`` batch."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if data.ndim == 3:
        return Tensor(data.transpose(2, 0, 1)[None], dtype=data.dtype)
    if data.ndim == 4:
        return image if isinstance(image, Tensor) else Tensor(data)
    raise DimensionError(f"expected HxWxC image or NCHW batch, got shape {data.shape}")


class Backbone(Module):
    """Stem (two stride-2 conv blocks) then three stages of two conv blocks, the first strided.

    A conv block is 3x3 conv -> batch norm -> SiLU.
    """

    def __init__(self, rng: np.random.Generator, in_ch: int, widths=(16, 32, 32), stem_width: int | None = None):
        stem_width = stem_width or max(8, widths[0] // 2)
        self.stem = [ConvNormAct(rng, in_ch, stem_width, stride=2), ConvNormAct(rng, stem_width, stem_width, stride=2)]
        self.stages = []
        prev = stem_width
        for w in widths:
            self.stages.append(_Stage(rng, prev, w))
            prev = w
        self.widths = tuple(widths)

    def __call__(self, x: Tensor) -> list[Tensor]:
        for block in self.stem:
            x = block(x)
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


class _Stage(Module):
    def __init__(self, rng, in_ch: int, out_ch: int):
        self.down = ConvNormAct(rng, in_ch, out_ch, stride=2)
        self.conv = ConvNormAct(rng, out_ch, out_ch)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(self.down(x))


class Extractor(Module):
    """Two backbones with identical architecture and independent weights."""

    def __init__(self, rng: np.random.Generator, widths=(16, 32, 32)):
        self.visible = Backbone(rng, MODALITY_CHANNELS["visible"], widths)
        self.infrared = Backbone(rng, MODALITY_CHANNELS["infrared"], widths)
        self.widths = tuple(widths)

    def extract(self, image, branch: str) -> FeaturePyramid:
        if branch not in MODALITY_CHANNELS:
            raise ValueError(f"unknown modality {branch!r}")
        x = to_nchw(image)
        _, c, h, w = x.shape
        if c != MODALITY_CHANNELS[branch]:
            raise DimensionError(f"{branch} branch expects {MODALITY_CHANNELS[branch]} channels, got {c}")
        if h % 32 or w % 32:
            raise DimensionError(f"input {h}x{w} is not divisible by 32; pad or resize the image first")
        net = self.visible if branch == "visible" else self.infrared
        return FeaturePyramid(net(x), branch)


class ScaleFusion(Module):
    """Weighted sum of the three pyramid levels on the finest grid.

    Each level is projected to ``width`` channels by a bias-free 1x1 conv and
    nearest-upsampled before weighting, so the result is linear in the maps.
    """

    def __init__(self, rng: np.random.Generator, level_channels=(16, 32, 32), width: int = 16):
        self.logits = Tensor(np.zeros(3), requires_grad=True)
        self.proj = [Conv2d(rng, c, width, k=1, bias=False) for c in level_channels]
        self.width = width

    def normalized(self) -> Tensor:
        return tc.softmax(self.logits)

    def __call__(self, pyramid: FeaturePyramid, normalize: bool = True) -> Tensor:
        return fuse_scales(pyramid, self, normalize=normalize)


def fuse_scales(pyramid: FeaturePyramid, fusion: ScaleFusion, normalize: bool = True) -> Tensor:
    """``sum_i w_i * up(proj_i(F_i))`` with ``w = softmax(logits)``.

    With ``normalize=False`` the raw logits are used as weights (test mode).
    """
    w = fusion.normalized() if normalize else fusion.logits
    n = pyramid.levels[0].shape[0]
    out = None
    for i, (level, proj) in enumerate(zip(pyramid.levels, fusion.proj)):
        m = tc.upsample_nearest(proj(level), 2**i)
        term = tc.scale(m, tc.index(w, np.full(n, i)))
        out = term if out is None else out + term
    return out
