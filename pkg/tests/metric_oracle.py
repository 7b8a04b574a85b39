"""Brute-force reference for detection evaluation, written without the library's helpers."""

import itertools

import numpy as np


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    w = min(ax1, bx1) - max(ax0, bx0)
    h = min(ay1, by1) - max(ay0, by0)
    if w <= 0 or h <= 0:
        return 0.0
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - w * h
    return w * h / union if union > 0 else 0.0


def exhaustive_match(dets, gts, thr):
    """Best one-to-one assignment in the lexicographic order that greedy matching optimizes.

    Every partial assignment of detections (already in score order) to distinct
    ground truths with IoU >= thr is enumerated; the winner maximizes, detection
    by detection, (matched, IoU, -gt index).
    """
    n, m = len(dets), len(gts)
    ious = [[box_iou(d, g) for g in gts] for d in dets]
    best_key, best = None, None
    options = [[None] + [j for j in range(m) if ious[i][j] >= thr] for i in range(n)]
    for choice in itertools.product(*options):
        used = [j for j in choice if j is not None]
        if len(used) != len(set(used)):
            continue
        key = tuple((0, 0.0, 0) if j is None else (1, ious[i][j], -j) for i, j in enumerate(choice))
        if best_key is None or key > best_key:
            best_key, best = key, choice
    return [j is not None for j in best] if n else []


def ap_101(flags_in_rank_order, n_gt):
    tp = fp = 0
    prec, rec = [], []
    for f in flags_in_rank_order:
        tp += f
        fp += not f
        prec.append(tp / (tp + fp))
        rec.append(tp / n_gt if n_gt else 0.0)
    total = 0.0
    for k in range(101):
        r = k / 100
        cands = [p for p, q in zip(prec, rec) if q >= r]
        total += max(cands) if cands else 0.0
    return total / 101


def oracle_evaluate(dets, gts, thresholds):
    """Returns (map50, map) with the library's tie conventions: score descending, then image id, then input order."""
    ids = sorted(gts)
    classes = sorted({g[0] for i in ids for g in gts[i]})
    if not classes:
        return 0.0, 0.0
    ap = {}
    for c in classes:
        for t in thresholds:
            ranked = []
            n_gt = 0
            for rank_img, i in enumerate(ids):
                cd = [(k, d) for k, d in enumerate(dets.get(i, [])) if d[0] == c]
                cd.sort(key=lambda kd: (-kd[1][2], kd[0]))
                cg = [g[1] for g in gts[i] if g[0] == c]
                n_gt += len(cg)
                flags = exhaustive_match([d[1] for _, d in cd], cg, t)
                for pos, ((k, d), f) in enumerate(zip(cd, flags)):
                    ranked.append((-d[2], rank_img, pos, f))
            ranked.sort()
            ap[(c, t)] = ap_101([r[3] for r in ranked], n_gt)
    t50 = min(thresholds, key=lambda t: abs(t - 0.5))
    map50 = float(np.mean([ap[(c, t50)] for c in classes]))
    map_all = float(np.mean([np.mean([ap[(c, t)] for c in classes]) for t in thresholds]))
    return map50, map_all


def _jitter(rng, box, amount):
    cx, cy, w, h = box
    return (cx + rng.uniform(-amount, amount) * w, cy + rng.uniform(-amount, amount) * h,
            w * rng.uniform(1 - amount, 1 + amount), h * rng.uniform(1 - amount, 1 + amount))


def _random_case(seed, n_images=3, n_classes=2):
    rng = np.random.default_rng(seed)
    gts, dets = {}, {}
    for i in range(n_images):
        sid = f"img{i}"
        g = []
        for _ in range(int(rng.integers(0, 4))):
            g.append((int(rng.integers(0, n_classes)), (float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)),
                                                         float(rng.uniform(0.1, 0.3)), float(rng.uniform(0.1, 0.4)))))
        d = []
        for c, box in g:
            for _ in range(int(rng.integers(0, 3))):
                d.append((c, tuple(float(v) for v in _jitter(rng, box, 0.3)), round(float(rng.random()), 3)))
        for _ in range(int(rng.integers(0, 3))):
            d.append((int(rng.integers(0, n_classes)), (float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.1, 0.9)),
                                                         0.1, 0.2), round(float(rng.random()), 3)))
        gts[sid] = g
        if d:
            dets[sid] = d
    return dets, gts


def crafted_cases():
    """Twenty (name, dets, gts, expected_map50) cases; expected is None where only the oracle applies."""
    b = (0.5, 0.5, 0.2, 0.4)
    far = (0.1, 0.1, 0.05, 0.05)
    cases = [
        ("perfect", {"a": [(0, b, 0.9)], "b": [(0, far, 0.8)]}, {"a": [(0, b)], "b": [(0, far)]}, 1.0),
        ("fp_then_tp", {"a": [(0, far, 0.9), (0, b, 0.7)]}, {"a": [(0, b)]}, 0.5),
        ("tp_then_fp", {"a": [(0, b, 0.9), (0, far, 0.7)]}, {"a": [(0, b)]}, 1.0),
        ("no_detections", {}, {"a": [(0, b)], "b": [(0, far)]}, 0.0),
        ("duplicate", {"a": [(0, b, 0.9), (0, b, 0.8)]}, {"a": [(0, b)]}, 1.0),
        ("cross_image_fp", {"a": [(0, b, 0.5)], "b": [(0, b, 0.9)]}, {"a": [(0, b)], "b": []}, 0.5),
        ("wrong_class", {"a": [(1, b, 0.9), (0, b, 0.1)]}, {"a": [(0, b)], "b": [(1, far)]}, 0.5),
        ("tied_scores", {"a": [(0, far, 0.5)], "b": [(0, b, 0.5)]}, {"a": [], "b": [(0, b)]}, 0.5),
    ]
    for k in range(12):
        dets, gts = _random_case(100 + k, n_images=3 + k % 3)
        cases.append((f"random_{k}", dets, gts, None))
    return cases
