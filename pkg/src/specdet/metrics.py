"""IoU, greedy detection matching, 101-point AP and COCO-style mAP."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_LEVELS = np.arange(101) / 100.0

Box = tuple[float, float, float, float]
# (class_id, box, score) and (class_id, box)
DetTuple = tuple[int, Box, float]
GtTuple = tuple[int, Box]


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(cx, cy, w, h)`` boxes; 0 when the union is empty."""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    # areas from the same corners, so identical boxes give exactly 1
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` cxcywh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a0, a1 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b0, b1 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    lo = np.maximum(a0[:, None], b0[None])
    hi = np.minimum(a1[:, None], b1[None])
    wh = np.clip(hi - lo, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a1 - a0).prod(axis=1)
    area_b = (b1 - b0).prod(axis=1)
    union = area_a[:, None] + area_b[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def match_detections(dets: Sequence[Box], gts: Sequence[Box], iou_threshold: float
                     ) -> tuple[list[bool], list[bool], int]:
    """Greedy one-to-one matching of score-sorted detections to ground truth.

    Each detection takes the still-unmatched GT of highest IoU (lowest index on
    ties) provided that IoU reaches ``iou_threshold``.
    """
    tp, fp = [], []
    used = [False] * len(gts)
    ious = iou_matrix(np.array(dets), np.array(gts)) if len(dets) and len(gts) else None
    for i in range(len(dets)):
        best, best_j = -1.0, -1
        for j in range(len(gts)):
            if used[j]:
                continue
            v = ious[i, j]
            if v >= iou_threshold and v > best:
                best, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
            tp.append(True)
            fp.append(False)
        else:
            tp.append(False)
            fp.append(True)
    return tp, fp, used.count(False)


@dataclass
class PRPoint:
    threshold: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


def pr_curve(scores: Sequence[float], tp_flags: Sequence[bool], n_gt: int) -> list[PRPoint]:
    """Cumulative PR points in descending-score order (stable on ties)."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    points = []
    tp = fp = 0
    for i in order:
        if tp_flags[i]:
            tp += 1
        else:
            fp += 1
        recall = tp / n_gt if n_gt else 0.0
        points.append(PRPoint(float(scores[i]), tp / (tp + fp), recall, tp, fp, n_gt - tp))
    return points


def average_precision(pr: Sequence[PRPoint]) -> float:
    """Mean over recall levels 0.00..1.00 of the best precision at recall >= r."""
    if not pr:
        return 0.0
    recall = np.array([p.recall for p in pr])
    precision = np.array([p.precision for p in pr])
    # running max from the right gives max precision at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_LEVELS, side="left")
    vals = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(vals.mean())


@dataclass
class EvalReport:
    map50: float
    map: float
    per_class_ap: dict[int, float]
    ap: dict[tuple[int, float], float] = field(default_factory=dict)
    pr_curves: dict[tuple[int, float], list[PRPoint]] = field(default_factory=dict)
    num_images: int = 0


def _match_image(args):
    dets, gts, classes, thresholds = args
    out = {}
    for c in classes:
        cd = [(i, d) for i, d in enumerate(dets) if d[0] == c]
        cd.sort(key=lambda t: -t[1][2])
        boxes = [d[1] for _, d in cd]
        scores = [d[2] for _, d in cd]
        cg = [g[1] for g in gts if g[0] == c]
        for t in thresholds:
            tp, _, _ = match_detections(boxes, cg, t)
            out[(c, t)] = (scores, tp, len(cg))
    return out


def evaluate(dets: Mapping[str, Sequence[DetTuple]], gts: Mapping[str, Sequence[GtTuple]],
             iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS, threads: int | None = None) -> EvalReport:
    """mAP@50 and mAP over ``iou_thresholds`` across every class that has ground truth."""
    if not gts:
        raise ValueError("evaluate: no images")
    unknown = set(dets) - set(gts)
    if unknown:
        raise ValueError(f"evaluate: detections for unknown image ids {sorted(unknown)[:5]}")
    ids = sorted(gts)
    classes = sorted({g[0] for i in ids for g in gts[i]})
    det_only = sorted({d[0] for i in ids for d in dets.get(i, ())} - set(classes))
    if det_only:
        logger.warning("classes %s have no ground truth; AP undefined, excluded from the mean", det_only)
    thresholds = tuple(float(t) for t in iou_thresholds)
    threads = threads or int(os.environ.get("SPECDET_THREADS", "1") or 1)
    jobs = [(list(dets.get(i, ())), list(gts[i]), classes, thresholds) for i in ids]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_image = list(pool.map(_match_image, jobs))
    else:
        per_image = [_match_image(j) for j in jobs]

    ap: dict[tuple[int, float], float] = {}
    curves: dict[tuple[int, float], list[PRPoint]] = {}
    for c in classes:
        for t in thresholds:
            scores: list[float] = []
            flags: list[bool] = []
            n_gt = 0
            for res in per_image:
                s, tp, g = res[(c, t)]
                scores.extend(s)
                flags.extend(tp)
                n_gt += g
            curve = pr_curve(scores, flags, n_gt)
            curves[(c, t)] = curve
            ap[(c, t)] = average_precision(curve)
    if not classes:
        logger.warning("no ground-truth boxes in any image; mAP undefined, reported as 0")
        return EvalReport(0.0, 0.0, {}, ap, curves, len(ids))
    t50 = min(thresholds, key=lambda t: abs(t - 0.5))
    per_class = {c: ap[(c, t50)] for c in classes}
    map50 = float(np.mean([per_class[c] for c in classes]))
    map_all = float(np.mean([np.mean([ap[(c, t)] for c in classes]) for t in thresholds]))
    return EvalReport(map50, map_all, per_class, ap, curves, len(ids))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

DETECTION_FIELDS = ("image_id", "class_id", "cx", "cy", "w", "h", "score")


def write_detections_csv(path, dets: Mapping[str, Sequence[DetTuple]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_FIELDS)
        for image_id in sorted(dets):
            for c, box, score in dets[image_id]:
                writer.writerow([image_id, int(c), *(f"{float(v):.6f}" for v in box), f"{float(score):.6f}"])


def read_detections_csv(path) -> dict[str, list[DetTuple]]:
    out: dict[str, list[DetTuple]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            box = (float(row["cx"]), float(row["cy"]), float(row["w"]), float(row["h"]))
            out.setdefault(row["image_id"], []).append((int(row["class_id"]), box, float(row["score"])))
    return out


def write_report(report: EvalReport, path) -> None:
    lines = [f"num_images = {report.num_images}", f"map50 = {report.map50:.6f}", f"map = {report.map:.6f}"]
    for c, v in sorted(report.per_class_ap.items()):
        lines.append(f"ap50.class_{c} = {v:.6f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_pr_curves(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iou_threshold", "class_id", "score", "precision", "recall", "tp", "fp", "fn"])
        for (c, t), curve in sorted(report.pr_curves.items()):
            for p in curve:
                writer.writerow([f"{t:.2f}", c, f"{p.threshold:.6f}", f"{p.precision:.6f}", f"{p.recall:.6f}",
                                 p.tp, p.fp, p.fn])
