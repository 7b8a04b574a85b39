"""Training loop, AdamW, warmup + cosine schedule, evaluation helpers."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .config import TrainConfig
from .data import PairedSample, split_train_val
from .metrics import EvalReport, evaluate
from .model import Detector, prepare_batch

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "l_cls", "l_box", "l_conf", "l_con", "l_bg", "l_human", "l_total", "val_map50")


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[tc.Tensor], weight_decay: float = 0.0005, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data *= np.float32(1 - lr * self.weight_decay)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        tc.zero_grad(self.params)


def learning_rate(progress: float, cfg: TrainConfig) -> float:
    """LR at fractional epoch ``progress``: linear warmup from 0, then cosine decay to 0."""
    base = cfg.learning_rate
    if cfg.warmup_epochs > 0 and progress < cfg.warmup_epochs:
        return base * progress / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    frac = min(max((progress - cfg.warmup_epochs) / span, 0.0), 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


def evaluate_model(model: Detector, samples: Sequence[PairedSample]) -> EvalReport:
    preds = model.detect(samples)
    dets = {s.id: [d.as_tuple() for d in p] for s, p in zip(samples, preds)}
    gts = {s.id: [(b[0], tuple(b[1:])) for b in s.boxes] for s in samples}
    return evaluate(dets, gts)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def train(cfg: TrainConfig, samples: Sequence[PairedSample], out_dir=None, log_path=None,
          model: Detector | None = None) -> tuple[Detector, list[dict]]:
    """Run the full per-batch pipeline for ``cfg.epochs`` epochs over the train split.

    Writes ``checkpoint/`` and ``train_log.csv`` under ``out_dir`` when given.
    """
    train_set, val_set = split_train_val(list(samples), cfg.val_fraction)
    if not train_set:
        raise ValueError("training split is empty")
    model = model or Detector(cfg)
    opt = AdamW(model.parameters(), cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.eps)
    rng = np.random.default_rng([cfg.seed, 1])
    bounds = list(range(0, len(train_set), cfg.batch_size)) + [len(train_set)]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        # batch statistics need more than one sample; fold a trailing singleton into the previous batch
        del bounds[-2]
    steps = len(bounds) - 1
    rows: list[dict] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_path or out_dir / "train_log.csv"
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_fh) if log_fh else None
    if writer:
        writer.writerow(LOG_FIELDS)
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_set))
            sums: dict[str, float] = {}
            lr = 0.0
            for step in range(steps):
                batch = [train_set[i] for i in order[bounds[step] : bounds[step + 1]]]
                lr = learning_rate(epoch + step / steps, cfg)
                vis, ir = prepare_batch(batch, cfg.image_size)
                out = model.forward(vis, ir)
                br = model.loss(out, [s.boxes for s in batch])
                opt.zero_grad()
                tc.backward(br.total)
                opt.step(lr)
                for k, v in br.row().items():
                    sums[k] = sums.get(k, 0.0) + v
            row = {"epoch": epoch, "lr": lr, **{k: v / steps for k, v in sums.items()}}
            last = epoch == cfg.epochs - 1
            if val_set and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
                row["val_map50"] = evaluate_model(model, val_set).map50
            else:
                row["val_map50"] = float("nan")
            rows.append(row)
            logger.info("epoch %d total %.4f val_map50 %.3f", epoch, row["l_total"], row["val_map50"])
            if writer:
                writer.writerow([row["epoch"]] + [_fmt(row[k]) for k in LOG_FIELDS[1:]])
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        model.save(out_dir / "checkpoint", epoch=cfg.epochs, rng_state=_rng_state(rng))
    return model, rows


def _rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"], "state": {k: int(v) for k, v in st["state"].items()},
            "has_uint32": int(st["has_uint32"]), "uinteger": int(st["uinteger"])}
