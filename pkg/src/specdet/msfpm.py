"""Illumination-adaptive fusion of visible and infrared feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .layers import Conv2d, Linear, Module
from .tensor_core import DimensionError, Tensor

FUSION_MODES = ("weighted_sum", "concat_reduce")


@dataclass
class ModalityWeights:
    """Per-sample convex weights, each of shape ``(N,)``."""

    w_rgb: Tensor
    w_ir: Tensor


@dataclass
class FusedFeatures:
    fused: list[Tensor]
    reduced: list[Tensor]
    activated: list[Tensor]
    weights: list[ModalityWeights]


class ModalityGate(Module):
    """GAP both maps, concatenate, two-layer head, softmax over two logits."""

    def __init__(self, rng: np.random.Generator, channels: int, hidden: int | None = None):
        hidden = hidden or channels
        self.fc1 = Linear(rng, 2 * channels, hidden)
        self.fc2 = Linear(rng, hidden, 2)

    def zero_(self) -> None:
        for p in self.parameters():
            p.data[...] = 0

    def __call__(self, f_rgb: Tensor, f_ir: Tensor) -> ModalityWeights:
        if f_rgb.shape != f_ir.shape:
            raise DimensionError(f"gate: visible {f_rgb.shape} vs infrared {f_ir.shape}")
        pooled = tc.concat([tc.global_avg_pool(f_rgb), tc.global_avg_pool(f_ir)], axis=1)
        probs = tc.softmax(self.fc2(tc.silu(self.fc1(pooled))), axis=-1)
        return ModalityWeights(w_rgb=tc.index(probs, (slice(None), 0)), w_ir=tc.index(probs, (slice(None), 1)))


def fixed_weights(n: int, w_rgb: float = 0.5, dtype=np.float32) -> ModalityWeights:
    return ModalityWeights(Tensor(np.full(n, w_rgb), dtype=dtype), Tensor(np.full(n, 1.0 - w_rgb), dtype=dtype))


def fuse(f_rgb: Tensor, f_ir: Tensor, w: ModalityWeights) -> Tensor:
    """Elementwise ``w_rgb * F_rgb + w_ir * F_ir``."""
    if f_rgb.shape != f_ir.shape:
        raise DimensionError(f"fuse: visible {f_rgb.shape} vs infrared {f_ir.shape}")
    return tc.add(tc.scale(f_rgb, w.w_rgb), tc.scale(f_ir, w.w_ir))


class ReduceActivate(Module):
    """Bias-free 1x1 channel projection followed by SiLU."""

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int):
        self.reduce = Conv2d(rng, in_ch, out_ch, k=1, bias=False)

    def __call__(self, f_fused: Tensor) -> tuple[Tensor, Tensor]:
        if f_fused.shape[1] != self.reduce.in_channels:
            raise DimensionError(
                f"reduce expects {self.reduce.in_channels} channels, got {f_fused.shape[1]}"
            )
        reduced = self.reduce(f_fused)
        return reduced, tc.silu(reduced)


def reduce_activate(f_fused: Tensor, block: ReduceActivate) -> Tensor:
    return block(f_fused)[1]


class MSFPM(Module):
    """Gate, fuse, reduce and activate independently at every pyramid level."""

    def __init__(self, rng: np.random.Generator, level_channels=(16, 32, 32), reduce_ratio: int = 2,
                 fusion_mode: str = "weighted_sum"):
        if fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {fusion_mode!r}")
        self.fusion_mode = fusion_mode
        self.gates = [ModalityGate(rng, c) for c in level_channels]
        in_mult = 2 if fusion_mode == "concat_reduce" else 1
        self.blocks = [ReduceActivate(rng, in_mult * c, max(1, c // reduce_ratio)) for c in level_channels]
        self.out_channels = tuple(max(1, c // reduce_ratio) for c in level_channels)

    def __call__(self, pyr_rgb, pyr_ir, adaptive: bool = True) -> FusedFeatures:
        out = FusedFeatures([], [], [], [])
        for f_rgb, f_ir, gate, block in zip(pyr_rgb.levels, pyr_ir.levels, self.gates, self.blocks):
            if adaptive:
                w = gate(f_rgb, f_ir)
            else:
                w = fixed_weights(f_rgb.shape[0], 0.5, dtype=f_rgb.data.dtype)
            if self.fusion_mode == "weighted_sum":
                fused = fuse(f_rgb, f_ir, w)
            else:
                fused = tc.concat([tc.scale(f_rgb, w.w_rgb), tc.scale(f_ir, w.w_ir)], axis=1)
            reduced, activated = block(fused)
            out.fused.append(fused)
            out.reduced.append(reduced)
            out.activated.append(activated)
            out.weights.append(w)
        return out
