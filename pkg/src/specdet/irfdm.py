"""Human/background feature decoupling and the orthogonality penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .layers import Conv2d, Module, PixelMLP
from .tensor_core import DimensionError, Tensor


@dataclass
class DecoupledFeatures:
    """Human- and background-related maps plus their pooled unit embeddings ``(N, D)``."""

    f_h: Tensor | None
    f_b: Tensor | None
    emb_h: Tensor
    emb_b: Tensor
    modality: str


@dataclass
class OrthoLossConfig:
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")


def embed(f: Tensor) -> Tensor:
    return tc.l2_normalize(tc.global_avg_pool(f))


def _check_map(f: Tensor, width: int) -> None:
    if f.ndim != 4 or f.shape[1] != width:
        raise DimensionError(f"expected (N, {width}, H, W) feature map, got {f.shape}")
    if f.shape[2] % 2 or f.shape[3] % 2:
        raise DimensionError(f"feature map spatial dims must be even, got {f.shape[2:]}")


class VisibleDecoupler(Module):
    """max/avg pooling -> 1x1 conv -> per-pixel MLP gives ``f_h``; ``f_b = f_v - f_h``."""

    def __init__(self, rng: np.random.Generator, width: int):
        self.mix = Conv2d(rng, 2 * width, width, k=1)
        self.mlp = PixelMLP(rng, width)
        self.width = width

    def __call__(self, f_v: Tensor) -> DecoupledFeatures:
        _check_map(f_v, self.width)
        pooled = tc.concat([tc.pool2d(f_v, "max", 2), tc.pool2d(f_v, "avg", 2)], axis=1)
        refined = tc.upsample_nearest(tc.silu(self.mix(pooled)), 2)
        f_h = self.mlp(refined)
        f_b = tc.sub(f_v, f_h)
        return DecoupledFeatures(f_h, f_b, embed(f_h), embed(f_b), "visible")


class InfraredDecoupler(Module):
    """per-pixel MLP -> max pool -> sigmoid, then two bias-free 1x1 transforms."""

    def __init__(self, rng: np.random.Generator, width: int):
        self.mlp = PixelMLP(rng, width)
        self.w_h = Conv2d(rng, width, width, k=1, bias=False)
        self.w_b = Conv2d(rng, width, width, k=1, bias=False)
        self.width = width

    def normalized(self, f_i: Tensor) -> Tensor:
        _check_map(f_i, self.width)
        return tc.sigmoid(tc.pool2d(self.mlp(f_i), "max", 2))

    def __call__(self, f_i: Tensor) -> DecoupledFeatures:
        f_norm = self.normalized(f_i)
        f_h = self.w_h(f_norm)
        f_b = self.w_b(f_norm)
        return DecoupledFeatures(f_h, f_b, embed(f_h), embed(f_b), "infrared")


class IRFDM(Module):
    def __init__(self, rng: np.random.Generator, width: int):
        self.visible = VisibleDecoupler(rng, width)
        self.infrared = InfraredDecoupler(rng, width)

    def decouple_visible(self, f_v: Tensor) -> DecoupledFeatures:
        return self.visible(f_v)

    def decouple_infrared(self, f_i: Tensor) -> DecoupledFeatures:
        return self.infrared(f_i)


def ortho_loss(vis: DecoupledFeatures, ir: DecoupledFeatures, cfg: OrthoLossConfig | float = 1.0) -> Tensor:
    """Sum over samples of squared human/background dot products, infrared term scaled by lambda."""
    lam = cfg.lam if isinstance(cfg, OrthoLossConfig) else float(cfg)
    dv = tc.row_dot(vis.emb_h, vis.emb_b)
    di = tc.row_dot(ir.emb_h, ir.emb_b)
    return tc.add(tc.sum(tc.mul(dv, dv)), tc.mul_scalar(tc.sum(tc.mul(di, di)), lam))


def abs_cosine(d: DecoupledFeatures) -> np.ndarray:
    """Per-sample ``|cos(emb_h, emb_b)|`` (embeddings are already unit norm)."""
    h, b = d.emb_h.data.astype(np.float64), d.emb_b.data.astype(np.float64)
    nh = np.linalg.norm(h, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.where((nh > 0) & (nb > 0), nh * nb, 1.0)
    return np.abs((h * b).sum(axis=1)) / denom
