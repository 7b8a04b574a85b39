"""Anchor-based detection head: box coding, target assignment, losses, NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .layers import Conv2d, Module
from .metrics import iou, iou_matrix
from .tensor_core import DimensionError, Tensor

DEFAULT_ANCHORS = ((1.0, 2.0), (2.0, 4.0), (3.0, 6.0))
T_CLAMP = 10.0
OBJ_PRIOR = 0.01


class NumericalError(RuntimeError):
    """A loss component became NaN or infinite."""

    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component} is not finite ({value})")
        self.component = component


@dataclass
class AnchorSpec:
    """Per-level anchor ``(p_w, p_h)`` in grid-cell units."""

    levels: list[list[tuple[float, float]]]

    def __post_init__(self):
        counts = {len(lv) for lv in self.levels}
        if len(counts) != 1:
            raise ValueError("every level needs the same number of anchors")
        for lv in self.levels:
            for pw, ph in lv:
                if pw <= 0 or ph <= 0:
                    raise ValueError(f"anchor dims must be positive, got ({pw}, {ph})")

    @classmethod
    def default(cls, num_levels: int = 3) -> AnchorSpec:
        return cls([list(DEFAULT_ANCHORS) for _ in range(num_levels)])

    @property
    def per_level(self) -> int:
        return len(self.levels[0])


@dataclass
class Detection:
    """Decoded box ``(cx, cy, w, h)`` normalized to the image."""

    box: tuple[float, float, float, float]
    class_id: int
    class_prob: float
    confidence: float

    def as_tuple(self):
        return (self.class_id, self.box, self.confidence)


@dataclass
class LossBreakdown:
    l_cls: float
    l_box: float
    l_conf: float
    l_con: float
    l_bg: float
    l_human: float
    lambda1: float
    lambda2: float
    l_total: float
    total: Tensor | None = field(default=None, repr=False)

    def row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("l_cls", "l_box", "l_conf", "l_con", "l_bg", "l_human", "l_total")}


# ---------------------------------------------------------------------------
# head network
# ---------------------------------------------------------------------------


class DetectionHead(Module):
    """Per level: 3x3 conv + SiLU, then a 1x1 conv to ``A * (5 + K)`` channels.

    Channel layout per anchor is ``[t_x, t_y, t_w, t_h, obj, cls_0 .. cls_{K-1}]``.
    """

    def __init__(self, rng: np.random.Generator, level_channels=(8, 16, 16), num_classes: int = 1,
                 anchors_per_level: int = 3, hidden: Sequence[int] | None = None):
        hidden = hidden or [2 * c for c in level_channels]
        self.num_classes = num_classes
        self.num_anchors = anchors_per_level
        self.convs = [Conv2d(rng, c, h) for c, h in zip(level_channels, hidden)]
        self.preds = [Conv2d(rng, h, anchors_per_level * (5 + num_classes), k=1) for h in hidden]
        prior = math.log(OBJ_PRIOR / (1 - OBJ_PRIOR))
        for pred in self.preds:
            pred.bias.data.reshape(anchors_per_level, 5 + num_classes)[:, 4] = prior

    def __call__(self, activated: Sequence[Tensor]) -> list[Tensor]:
        out = []
        k = 5 + self.num_classes
        for f, conv, pred in zip(activated, self.convs, self.preds):
            y = pred(tc.silu(conv(f)))
            n, _, gh, gw = y.shape
            y = tc.reshape(y, (n, self.num_anchors, k, gh, gw))
            out.append(tc.transpose(y, (0, 3, 4, 1, 2)))
        return out


def predict_class(f: Tensor, W_c: Tensor, b_c: Tensor) -> Tensor:
    """``softmax(W_c f + b_c)`` over the last axis."""
    return tc.softmax(tc.linear(f, W_c, b_c), axis=-1)


# ---------------------------------------------------------------------------
# box coding
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def decode_box(t: Sequence[float], cell: Sequence[float], anchor: Sequence[float], clamp: float = T_CLAMP
               ) -> tuple[float, float, float, float]:
    """Raw regressors to ``(cx, cy, w, h)`` in grid units."""
    tx, ty, tw, th = (float(v) for v in t)
    tw = min(max(tw, -clamp), clamp)
    th = min(max(th, -clamp), clamp)
    return (
        float(_sigmoid(tx) + cell[0]),
        float(_sigmoid(ty) + cell[1]),
        float(anchor[0] * math.exp(tw)),
        float(anchor[1] * math.exp(th)),
    )


def encode_box(box: Sequence[float], cell: Sequence[float], anchor: Sequence[float], eps: float = 1e-9
               ) -> tuple[float, float, float, float]:
    """Inverse of :func:`decode_box` (grid units in, raw regressors out)."""
    fx = min(max(box[0] - cell[0], eps), 1 - eps)
    fy = min(max(box[1] - cell[1], eps), 1 - eps)
    return (
        math.log(fx / (1 - fx)),
        math.log(fy / (1 - fy)),
        math.log(box[2] / anchor[0]),
        math.log(box[3] / anchor[1]),
    )


def decode_level(raw: np.ndarray, anchors: Sequence[tuple[float, float]]) -> np.ndarray:
    """``(N, G_h, G_w, A, 5+K)`` raw output to normalized boxes ``(N, G_h, G_w, A, 4)``."""
    raw = raw.astype(np.float64)
    _, gh, gw, _, _ = raw.shape
    anc = np.asarray(anchors, dtype=np.float64)
    xs = np.arange(gw).reshape(1, 1, gw, 1)
    ys = np.arange(gh).reshape(1, gh, 1, 1)
    cx = (_sigmoid(raw[..., 0]) + xs) / gw
    cy = (_sigmoid(raw[..., 1]) + ys) / gh
    w = anc[:, 0] * np.exp(np.clip(raw[..., 2], -T_CLAMP, T_CLAMP)) / gw
    h = anc[:, 1] * np.exp(np.clip(raw[..., 3], -T_CLAMP, T_CLAMP)) / gh
    return np.stack([cx, cy, w, h], axis=-1)


def confidence(p_obj: float, pred_box=None, true_box=None, class_prob: float = 1.0) -> float:
    """``P_obj * IoU(pred, true)`` in training; ``P_obj * class_prob`` when no true box exists."""
    if not 0.0 <= p_obj <= 1.0:
        raise ValueError(f"p_obj must lie in [0, 1], got {p_obj}")
    if true_box is None:
        return float(p_obj * class_prob)
    return float(p_obj * iou(pred_box, true_box))


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------


@dataclass
class Assignment:
    """Positive anchors; one row per assigned ground-truth box."""

    image: np.ndarray
    level: np.ndarray
    gy: np.ndarray
    gx: np.ndarray
    anchor: np.ndarray
    class_id: np.ndarray
    targets: np.ndarray  # (P, 4): sigmoid(t_x), sigmoid(t_y), t_w, t_h
    gt_boxes: np.ndarray  # (P, 4) normalized cxcywh

    @property
    def count(self) -> int:
        return int(self.image.shape[0])

    @classmethod
    def empty(cls) -> Assignment:
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, z, z, np.zeros((0, 4)), np.zeros((0, 4)))


def validate_box(box: Sequence[float]) -> None:
    cx, cy, w, h = box
    if not all(0.0 <= v <= 1.0 for v in (cx, cy, w, h)) or w <= 0 or h <= 0:
        raise ValueError(f"ground-truth box {tuple(box)} outside normalized [0, 1] range")


def shape_iou(w1: float, h1: float, w2: float, h2: float) -> float:
    inter = min(w1, w2) * min(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def assign_targets(gt: Sequence[Sequence[float]], anchors: AnchorSpec, grid_dims: Sequence[tuple[int, int]],
                   image: int = 0) -> Assignment:
    """Assign each ``(class_id, cx, cy, w, h)`` box to one (level, cell, anchor).

    The level/anchor pair maximizes shape IoU with the box (first maximum wins,
    i.e. lowest level, then lowest anchor index); the cell is the one holding
    the box center. A slot already taken by an earlier box is left to it.
    """
    rows = []
    taken = set()
    for item in gt:
        c, cx, cy, w, h = item
        validate_box((cx, cy, w, h))
        best, best_key = -1.0, None
        for lv, (gh, gw) in enumerate(grid_dims):
            for a, (pw, ph) in enumerate(anchors.levels[lv]):
                v = shape_iou(w * gw, h * gh, pw, ph)
                if v > best:
                    best, best_key = v, (lv, a)
        lv, a = best_key
        gh, gw = grid_dims[lv]
        gx = min(int(math.floor(cx * gw)), gw - 1)
        gy = min(int(math.floor(cy * gh)), gh - 1)
        if (lv, gy, gx, a) in taken:
            continue
        taken.add((lv, gy, gx, a))
        tx, ty, tw, th = encode_box((cx * gw, cy * gh, w * gw, h * gh), (gx, gy), anchors.levels[lv][a])
        rows.append((image, lv, gy, gx, a, int(c), _sigmoid(tx), _sigmoid(ty), tw, th, cx, cy, w, h))
    if not rows:
        return Assignment.empty()
    arr = np.array(rows, dtype=np.float64)
    ints = arr[:, :6].astype(np.int64)
    return Assignment(ints[:, 0], ints[:, 1], ints[:, 2], ints[:, 3], ints[:, 4], ints[:, 5], arr[:, 6:10], arr[:, 10:14])


def assign_batch(gts: Sequence[Sequence[Sequence[float]]], anchors: AnchorSpec,
                 grid_dims: Sequence[tuple[int, int]]) -> Assignment:
    parts = [assign_targets(g, anchors, grid_dims, image=i) for i, g in enumerate(gts)]
    parts = [p for p in parts if p.count]
    if not parts:
        return Assignment.empty()
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return Assignment(*(cat(n) for n in ("image", "level", "gy", "gx", "anchor", "class_id", "targets", "gt_boxes")))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _flat_index(assign: Assignment, raw_levels: Sequence[Tensor]) -> np.ndarray:
    offsets, off = [], 0
    for r in raw_levels:
        offsets.append(off)
        off += int(np.prod(r.shape[:4]))
    out = np.empty(assign.count, dtype=np.int64)
    for i in range(assign.count):
        lv = assign.level[i]
        _, gh, gw, a, _ = raw_levels[lv].shape
        out[i] = offsets[lv] + ((assign.image[i] * gh + assign.gy[i]) * gw + assign.gx[i]) * a + assign.anchor[i]
    return out


def component_losses(raw_levels: Sequence[Tensor], assign: Assignment, anchors: AnchorSpec,
                     neg_weight: float = 0.5, box_beta: float = 1.0 / 9.0) -> tuple[Tensor, Tensor, Tensor]:
    """Classification, box and objectness losses.

    ``l_cls`` is the mean cross-entropy over positives, ``l_box`` the mean
    (over positives) smooth-L1 summed over the four box terms, ``l_conf`` the
    weighted BCE of objectness against IoU targets summed over anchors and
    divided by the batch size.
    """
    k = raw_levels[0].shape[-1]
    n = raw_levels[0].shape[0]
    dtype = raw_levels[0].data.dtype
    flat = tc.concat([tc.reshape(r, (-1, k)) for r in raw_levels], axis=0)
    m = flat.shape[0]
    obj = tc.index(flat, (slice(None), 4))
    conf_t = np.zeros(m, dtype=dtype)
    weight = np.full(m, neg_weight, dtype=dtype)
    zero = Tensor(0.0, dtype=dtype)
    if assign.count:
        idx = _flat_index(assign, raw_levels)
        pos = tc.index(flat, idx)
        p = assign.count
        txy = tc.sigmoid(tc.index(pos, (slice(None), slice(0, 2))))
        twh = tc.clamp(tc.index(pos, (slice(None), slice(2, 4))), -T_CLAMP, T_CLAMP)
        box_in = tc.concat([txy, twh], axis=1)
        l_box = tc.mul_scalar(tc.sum(tc.smooth_l1(box_in, assign.targets.astype(dtype), box_beta)), 1.0 / p)
        logits = tc.index(pos, (slice(None), slice(5, k)))
        picked = tc.index(tc.log_softmax(logits, axis=-1), (np.arange(p), assign.class_id))
        l_cls = tc.mul_scalar(tc.sum(picked), -1.0 / p)
        pred = _decode_positives(pos.data, assign, raw_levels, anchors)
        conf_t[idx] = np.diag(iou_matrix(pred, assign.gt_boxes))
        weight[idx] = 1.0
    else:
        l_cls = l_box = zero
    return l_cls, l_box, objectness_loss(obj, conf_t, weight, n)


def objectness_loss(obj: Tensor, targets: np.ndarray, weight: np.ndarray, batch: int) -> Tensor:
    """Weighted BCE-with-logits summed over anchors and divided by ``batch``.

    ``targets`` are constants: the IoU target carries no gradient back into the box regressors.
    """
    dtype = obj.data.dtype
    bce = tc.sub(tc.softplus(obj), tc.mul(obj, Tensor(targets, dtype=dtype)))
    return tc.mul_scalar(tc.sum(tc.mul(bce, Tensor(weight, dtype=dtype))), 1.0 / batch)


def _decode_positives(pos: np.ndarray, assign: Assignment, raw_levels, anchors: AnchorSpec) -> np.ndarray:
    out = np.empty((assign.count, 4))
    for i in range(assign.count):
        lv = assign.level[i]
        _, gh, gw, _, _ = raw_levels[lv].shape
        cx, cy, w, h = decode_box(pos[i, :4], (assign.gx[i], assign.gy[i]), anchors.levels[lv][assign.anchor[i]])
        out[i] = (cx / gw, cy / gh, w / gw, h / gh)
    return out


def joint_loss(components: Sequence[Tensor], l_con: Tensor, l_bg: Tensor, l_human: Tensor,
               lambda1: float, lambda2: float) -> LossBreakdown:
    """``l_cls + l_box + l_conf + lambda1 * l_con + lambda2 * (l_bg + l_human)``."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    l_cls, l_box, l_conf = (tc.as_tensor(c) for c in components)
    l_con, l_bg, l_human = (tc.as_tensor(c) for c in (l_con, l_bg, l_human))
    named = {"l_cls": l_cls, "l_box": l_box, "l_conf": l_conf, "l_con": l_con, "l_bg": l_bg, "l_human": l_human}
    for name, t in named.items():
        v = float(t.item())
        if not math.isfinite(v):
            raise NumericalError(name, v)
    total = tc.add(tc.add(l_cls, l_box), l_conf)
    total = tc.add(total, tc.mul_scalar(l_con, lambda1))
    total = tc.add(total, tc.mul_scalar(tc.add(l_bg, l_human), lambda2))
    return LossBreakdown(
        *(float(t.item()) for t in named.values()),
        lambda1=float(lambda1), lambda2=float(lambda2), l_total=float(total.item()), total=total,
    )


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy class-wise suppression by descending confidence; ties keep input order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    kept: list[int] = []
    for i in order:
        d = dets[i]
        if all(dets[j].class_id != d.class_id or iou(dets[j].box, d.box) <= iou_threshold for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def postprocess(raw_levels: Sequence[np.ndarray], anchors: AnchorSpec, score_threshold: float = 0.01,
                iou_threshold: float = 0.45, max_candidates: int = 200, max_det: int = 100) -> list[list[Detection]]:
    """Decode every anchor, score with ``P_obj * class_prob`` and run NMS per image."""
    n = raw_levels[0].shape[0]
    boxes, scores, classes, probs = [], [], [], []
    for lv, raw in enumerate(raw_levels):
        raw = np.asarray(raw, dtype=np.float64)
        b = decode_level(raw, anchors.levels[lv])
        p_obj = _sigmoid(raw[..., 4])
        logits = raw[..., 5:]
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        cls_p = e / e.sum(axis=-1, keepdims=True)
        cid = cls_p.argmax(axis=-1)
        cp = np.take_along_axis(cls_p, cid[..., None], axis=-1)[..., 0]
        boxes.append(b.reshape(n, -1, 4))
        scores.append((p_obj * cp).reshape(n, -1))
        classes.append(cid.reshape(n, -1))
        probs.append(cp.reshape(n, -1))
    boxes = np.concatenate(boxes, axis=1)
    scores = np.concatenate(scores, axis=1)
    classes = np.concatenate(classes, axis=1)
    probs = np.concatenate(probs, axis=1)
    results = []
    for i in range(n):
        keep = np.nonzero(scores[i] >= score_threshold)[0]
        keep = keep[np.argsort(-scores[i][keep], kind="stable")][:max_candidates]
        cand = [Detection(tuple(float(v) for v in boxes[i, j]), int(classes[i, j]), float(probs[i, j]),
                          float(scores[i, j])) for j in keep]
        results.append(nms(cand, iou_threshold)[:max_det])
    return results
