"""Cross-modal triplet objectives over decoupled embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .irfdm import DecoupledFeatures
from .tensor_core import DimensionError, Tensor

ROLES = ("background", "human")


@dataclass
class Triplet:
    """Anchor/positive/negative embeddings; either ``(D,)`` or a batch ``(N, D)``."""

    anchor: Tensor
    positive: Tensor
    negative: Tensor
    role: str


@dataclass
class TripletConfig:
    margin: float = 0.2
    anchor_modality: str = "visible"
    negative_mining: str = "same_sample"
    # draw negatives from both modalities instead of the anchor's only
    widen_negatives: bool = False

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.anchor_modality not in ("visible", "infrared"):
            raise ValueError(f"anchor_modality must be visible or infrared, got {self.anchor_modality!r}")
        if self.negative_mining not in ("same_sample", "batch_hard"):
            raise ValueError(f"negative_mining must be same_sample or batch_hard, got {self.negative_mining!r}")


def _as_batch(x: Tensor) -> Tensor:
    return tc.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def triplet_loss(t: Triplet, cfg: TripletConfig) -> Tensor:
    """``sum_i max(d(a_i, p_i) - d(a_i, n_i) + margin, 0)`` with Euclidean ``d``."""
    a, p, n = _as_batch(t.anchor), _as_batch(t.positive), _as_batch(t.negative)
    if not (a.shape == p.shape == n.shape):
        raise DimensionError(f"triplet dims differ: {a.shape}, {p.shape}, {n.shape}")
    d_ap = tc.euclidean_distance(a, p)
    d_an = tc.euclidean_distance(a, n)
    return tc.sum(tc.relu(tc.add_scalar(tc.sub(d_ap, d_an), cfg.margin)))


def _hardest(anchor: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    d = np.sqrt(((anchor[:, None, :] - candidates[None, :, :]) ** 2).sum(axis=-1))
    return d.argmin(axis=1)  # first index on ties


def build_triplets(vis: DecoupledFeatures, ir: DecoupledFeatures, cfg: TripletConfig | None = None
                   ) -> tuple[Triplet, Triplet]:
    """One background and one human triplet per sample.

    Background: anchor = anchor-modality background, positive = other-modality
    background, negative = a human embedding. Human triplets mirror this.
    """
    cfg = cfg or TripletConfig()
    n = vis.emb_h.shape[0]
    if n < 1:
        raise ValueError("build_triplets needs at least one sample")
    if ir.emb_h.shape != vis.emb_h.shape:
        raise DimensionError(f"visible {vis.emb_h.shape} vs infrared {ir.emb_h.shape} embeddings")
    anc, pos = (vis, ir) if cfg.anchor_modality == "visible" else (ir, vis)

    def negatives(anchor: Tensor, opposite: str) -> Tensor:
        own = getattr(anc, opposite)
        if cfg.negative_mining == "same_sample":
            return own
        cands = tc.concat([own, getattr(pos, opposite)], axis=0) if cfg.widen_negatives else own
        return tc.index(cands, _hardest(anchor.data, cands.data))

    bg = Triplet(anc.emb_b, pos.emb_b, negatives(anc.emb_b, "emb_h"), "background")
    human = Triplet(anc.emb_h, pos.emb_h, negatives(anc.emb_h, "emb_b"), "human")
    return bg, human


def contrastive_losses(vis: DecoupledFeatures, ir: DecoupledFeatures, cfg: TripletConfig | None = None
                       ) -> tuple[Tensor, Tensor]:
    cfg = cfg or TripletConfig()
    bg, human = build_triplets(vis, ir, cfg)
    return triplet_loss(bg, cfg), triplet_loss(human, cfg)
