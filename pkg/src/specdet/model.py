"""The assembled detector: extractor -> MSFPM -> IRFDM -> contrastive -> head."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .config import TrainConfig
from .contrastive import TripletConfig, contrastive_losses
from .data import PairedSample, resize_bilinear
from .detect_head import AnchorSpec, Detection, DetectionHead, LossBreakdown, assign_batch, component_losses, \
    joint_loss, postprocess
from .extractor import Extractor, ScaleFusion
from .irfdm import IRFDM, DecoupledFeatures, OrthoLossConfig, ortho_loss
from .layers import Module
from .msfpm import MSFPM, FusedFeatures
from .tensor_core import Tensor


@dataclass
class ForwardOutput:
    raw: list[Tensor]
    fused: FusedFeatures
    visible: DecoupledFeatures | None
    infrared: DecoupledFeatures | None


def prepare_batch(samples: Sequence[PairedSample], size: int) -> tuple[Tensor, Tensor]:
    """Stack samples into ``(N, 3, S, S)`` / ``(N, 1, S, S)`` tensors scaled to [-1, 1]."""
    vis = np.stack([resize_bilinear(s.visible, size) for s in samples]).transpose(0, 3, 1, 2)
    ir = np.stack([resize_bilinear(s.infrared, size) for s in samples]).transpose(0, 3, 1, 2)
    return Tensor(vis * 2.0 - 1.0), Tensor(ir * 2.0 - 1.0)


class Detector(Module):
    def __init__(self, cfg: TrainConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.extractor = Extractor(rng, cfg.widths)
        self.msfpm = MSFPM(rng, cfg.widths, cfg.reduce_ratio, cfg.fusion_mode)
        self.scale_visible = ScaleFusion(rng, cfg.widths, cfg.fusion_width)
        self.scale_infrared = ScaleFusion(rng, cfg.widths, cfg.fusion_width)
        self.irfdm = IRFDM(rng, cfg.fusion_width)
        self.head = DetectionHead(rng, self.msfpm.out_channels, cfg.num_classes)
        self.anchors = AnchorSpec.default()

    def grid_dims(self) -> list[tuple[int, int]]:
        s = self.cfg.image_size
        return [(s // st, s // st) for st in (8, 16, 32)]

    def forward(self, vis: Tensor, ir: Tensor, decouple: bool | None = None) -> ForwardOutput:
        cfg = self.cfg
        decouple = cfg.use_irfdm if decouple is None else decouple
        pyr_v = self.extractor.extract(vis, "visible")
        pyr_i = self.extractor.extract(ir, "infrared")
        fused = self.msfpm(pyr_v, pyr_i, adaptive=cfg.use_msfpm)
        raw = self.head(fused.activated)
        dec_v = dec_i = None
        if decouple:
            dec_v = self.irfdm.decouple_visible(self.scale_visible(pyr_v))
            dec_i = self.irfdm.decouple_infrared(self.scale_infrared(pyr_i))
        return ForwardOutput(raw, fused, dec_v, dec_i)

    def loss(self, out: ForwardOutput, boxes: Sequence[Sequence]) -> LossBreakdown:
        cfg = self.cfg
        assign = assign_batch(boxes, self.anchors, self.grid_dims())
        comps = component_losses(out.raw, assign, self.anchors, cfg.neg_obj_weight, cfg.box_beta)
        lam1, lam2 = cfg.effective_lambdas()
        zero = Tensor(0.0)
        l_con = l_bg = l_human = zero
        if out.visible is not None:
            l_con = ortho_loss(out.visible, out.infrared, OrthoLossConfig(cfg.ortho_lambda))
            if lam2 > 0:
                tcfg = TripletConfig(cfg.margin, cfg.anchor_modality, cfg.negative_mining)
                l_bg, l_human = contrastive_losses(out.visible, out.infrared, tcfg)
        return joint_loss(comps, l_con, l_bg, l_human, lam1, lam2)

    def detect(self, samples: Sequence[PairedSample], batch_size: int = 16) -> list[list[Detection]]:
        results = []
        with self.inference():
            for i in range(0, len(samples), batch_size):
                vis, ir = prepare_batch(samples[i : i + batch_size], self.cfg.image_size)
                out = self.forward(vis, ir, decouple=False)
                results.extend(postprocess([r.data for r in out.raw], self.anchors, self.cfg.score_threshold,
                                           self.cfg.nms_iou))
        return results

    def modality_weights(self, samples: Sequence[PairedSample], batch_size: int = 16) -> np.ndarray:
        """Per-sample ``w_ir`` averaged over pyramid levels."""
        out = []
        with self.inference():
            for i in range(0, len(samples), batch_size):
                vis, ir = prepare_batch(samples[i : i + batch_size], self.cfg.image_size)
                pyr_v = self.extractor.extract(vis, "visible")
                pyr_i = self.extractor.extract(ir, "infrared")
                ws = [g(fv, fi).w_ir.data for g, fv, fi in zip(self.msfpm.gates, pyr_v.levels, pyr_i.levels)]
                out.append(np.mean(ws, axis=0))
        return np.concatenate(out) if out else np.zeros(0)

    def embeddings(self, samples: Sequence[PairedSample], batch_size: int = 16
                   ) -> list[tuple[DecoupledFeatures, DecoupledFeatures]]:
        out = []
        with self.inference():
            for i in range(0, len(samples), batch_size):
                vis, ir = prepare_batch(samples[i : i + batch_size], self.cfg.image_size)
                pyr_v = self.extractor.extract(vis, "visible")
                pyr_i = self.extractor.extract(ir, "infrared")
                out.append((self.irfdm.decouple_visible(self.scale_visible(pyr_v)),
                            self.irfdm.decouple_infrared(self.scale_infrared(pyr_i))))
        return out

    # -- checkpoints ---------------------------------------------------------

    def save(self, directory, epoch: int = 0, rng_state: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        named = list(self.named_state())
        tc.save_tnsr(directory / "tensors.tnsr", [p.data for _, p in named])
        manifest = {
            "tensors": [{"name": n, "shape": list(p.shape)} for n, p in named],
            "config": self.cfg.to_dict(),
            "epoch": epoch,
            "rng_state": rng_state,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> tuple[Detector, dict]:
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        model = cls(TrainConfig.from_dict(manifest["config"]))
        arrays = tc.load_tnsr(directory / "tensors.tnsr")
        params = dict(model.named_state())
        if len(arrays) != len(manifest["tensors"]):
            raise ValueError("checkpoint manifest and tensor file disagree on tensor count")
        for entry, arr in zip(manifest["tensors"], arrays):
            p = params.get(entry["name"])
            if p is None or p.shape != arr.shape:
                raise ValueError(f"checkpoint tensor {entry['name']} does not fit the model")
            p.data = arr.astype(np.float32).copy()
        return model, manifest
