"""Finite-difference verification of every differentiable operation.

Each registered case draws float64 inputs away from kinks, reduces the op's
output to a scalar through a fixed random projection, and compares the
analytic gradient of every input with central differences.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor_core as tc
from .contrastive import Triplet, TripletConfig, triplet_loss
from .detect_head import AnchorSpec, assign_targets, component_losses, objectness_loss
from .irfdm import DecoupledFeatures, ortho_loss
from .tensor_core import Tensor

F64 = np.float64
Builder = Callable[[np.random.Generator], tuple[list[np.ndarray], Callable[[list[Tensor]], Tensor]]]


@dataclass
class GradCase:
    name: str
    build: Builder


@dataclass
class CaseResult:
    name: str
    trials: int
    max_rel_error: float
    passed: bool
    seconds: float


class EmptyRegistryError(ValueError):
    pass


REGISTRY: dict[str, GradCase] = {}


def register(name: str, registry: dict[str, GradCase] | None = None):
    target = REGISTRY if registry is None else registry

    def deco(fn: Builder) -> Builder:
        target[name] = GradCase(name, fn)
        return fn

    return deco


# ---------------------------------------------------------------------------
# input helpers
# ---------------------------------------------------------------------------


def _away(rng, shape, gap=0.1, scale=1.0):
    """Uniform values with magnitude in ``[gap, scale]`` and random sign."""
    mag = rng.uniform(gap, scale, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape, step=0.05):
    """Values whose pairwise gaps are at least ``step`` (no pooling ties)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * step - n * step / 2).reshape(shape).astype(F64)


def _off_kink(rng, shape, below, above, top=1.5):
    """Random sign, magnitude in ``[0, below]`` or ``[above, top]``."""
    mag = np.where(rng.random(shape) < 0.5, rng.uniform(0.0, below, shape), rng.uniform(above, top, shape))
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    return tc.sum(tc.mul(out, Tensor(weights, dtype=F64)))


def _elementwise(op, make=lambda rng, s: rng.normal(size=s), shape=(3, 4)):
    def build(rng):
        x = np.asarray(make(rng, shape), dtype=F64)
        with tc.no_grad():
            out_shape = op(Tensor(x, dtype=F64)).shape
        r = rng.normal(size=out_shape)
        return [x], lambda t: _project(op(t[0]), r)

    return build


# ---------------------------------------------------------------------------
# tensor_core ops
# ---------------------------------------------------------------------------

register("exp")(_elementwise(tc.exp))
register("log")(_elementwise(tc.log, lambda rng, s: rng.uniform(0.2, 3.0, size=s)))
register("neg")(_elementwise(tc.neg))
register("sigmoid")(_elementwise(tc.sigmoid, lambda rng, s: rng.normal(scale=3, size=s)))
register("silu")(_elementwise(tc.silu, lambda rng, s: rng.normal(scale=3, size=s)))
register("softplus")(_elementwise(tc.softplus, lambda rng, s: rng.normal(scale=3, size=s)))
register("relu")(_elementwise(tc.relu, _away))
register("clamp")(_elementwise(lambda x: tc.clamp(x, -0.5, 0.5), lambda rng, s: _off_kink(rng, s, 0.4, 0.6)))
register("mul_scalar")(_elementwise(lambda x: tc.mul_scalar(x, -1.7)))
register("add_scalar")(_elementwise(lambda x: tc.add_scalar(x, 0.3)))
register("reshape")(_elementwise(lambda x: tc.reshape(x, (2, 6)), shape=(3, 4)))
register("transpose")(_elementwise(lambda x: tc.transpose(x, (2, 0, 1)), shape=(2, 3, 4)))
register("index_slice")(_elementwise(lambda x: tc.index(x, (slice(None), slice(1, 3))), shape=(3, 4)))
register("index_gather")(_elementwise(lambda x: tc.index(x, np.array([2, 0, 2, 1])), shape=(3, 4)))
register("softmax")(_elementwise(lambda x: tc.softmax(x, axis=-1), shape=(3, 5)))
register("softmax_axis0")(_elementwise(lambda x: tc.softmax(x, axis=0), shape=(4, 2)))
register("log_softmax")(_elementwise(lambda x: tc.log_softmax(x, axis=-1), shape=(3, 5)))
register("global_avg_pool")(_elementwise(tc.global_avg_pool, shape=(2, 3, 4, 4)))
register("upsample_nearest")(_elementwise(lambda x: tc.upsample_nearest(x, 2), shape=(1, 2, 3, 3)))
register("max_pool2d")(_elementwise(lambda x: tc.pool2d(x, "max", 2), _distinct, shape=(2, 2, 4, 4)))
register("avg_pool2d")(_elementwise(lambda x: tc.pool2d(x, "avg", 2), shape=(2, 2, 4, 4)))
register("l2_normalize")(_elementwise(tc.l2_normalize, lambda rng, s: _away(rng, s, 0.2), shape=(3, 5)))
register("standardize")(_elementwise(lambda x: tc.standardize(x, (0, 2, 3))[0], shape=(3, 2, 3, 3)))


@register("sum")
def _sum_case(rng):
    x = rng.normal(size=(2, 3, 4))
    r = rng.normal(size=(2, 4))
    return [x], lambda t: tc.sum(tc.mul(tc.sum(t[0], axis=1), Tensor(r, dtype=F64)))


@register("mean")
def _mean_case(rng):
    x = rng.normal(size=(2, 3, 4))
    r = rng.normal(size=(3,))
    return [x], lambda t: _project(tc.mean(t[0], axis=(0, 2)), r)


def _binary(op, shape=(3, 4)):
    def build(rng):
        a, b, r = rng.normal(size=shape), rng.normal(size=shape), rng.normal(size=shape)
        return [a, b], lambda t: _project(op(t[0], t[1]), r)

    return build


register("add")(_binary(tc.add))
register("sub")(_binary(tc.sub))
register("mul")(_binary(tc.mul))


@register("scale")
def _scale_case(rng):
    x, s, r = rng.normal(size=(3, 2, 2)), rng.normal(size=3), rng.normal(size=(3, 2, 2))
    return [x, s], lambda t: _project(tc.scale(t[0], t[1]), r)


@register("concat")
def _concat_case(rng):
    a, b, r = rng.normal(size=(2, 3)), rng.normal(size=(2, 2)), rng.normal(size=(2, 5))
    return [a, b], lambda t: _project(tc.concat([t[0], t[1]], axis=1), r)


@register("smooth_l1")
def _smooth_l1_case(rng):
    beta = 0.5
    target = rng.normal(size=(3, 4))
    # distance from target avoids the quadratic/linear switch at |d| = beta
    d = _off_kink(rng, (3, 4), 0.4, 0.6)
    r = rng.normal(size=(3, 4))
    return [target + d], lambda t: _project(tc.smooth_l1(t[0], target, beta), r)


@register("linear")
def _linear_case(rng):
    x, w, b, r = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), rng.normal(size=2), rng.normal(size=(4, 2))
    return [x, w, b], lambda t: _project(tc.linear(t[0], t[1], t[2]), r)


def _conv(k, stride, padding, shape=(2, 2, 5, 5), out=3):
    def build(rng):
        x = rng.normal(size=shape)
        w = rng.normal(size=(out, shape[1], k, k))
        b = rng.normal(size=out)
        y = tc.conv2d(Tensor(x, dtype=F64), Tensor(w, dtype=F64), Tensor(b, dtype=F64), stride, padding)
        r = rng.normal(size=y.shape)
        return [x, w, b], lambda t: _project(tc.conv2d(t[0], t[1], t[2], stride, padding), r)

    return build


register("conv2d_3x3")(_conv(3, 1, 1))
register("conv2d_3x3_stride2")(_conv(3, 2, 1, shape=(1, 2, 6, 6)))
register("conv2d_1x1")(_conv(1, 1, 0))


@register("channel_affine")
def _affine_case(rng):
    x, g, b, r = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=3), rng.normal(size=3), rng.normal(size=(2, 3, 2, 2))
    return [x, g, b], lambda t: _project(tc.channel_affine(t[0], t[1], t[2]), r)


@register("row_dot")
def _row_dot_case(rng):
    a, b, r = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=3)
    return [a, b], lambda t: _project(tc.row_dot(t[0], t[1]), r)


@register("euclidean_distance")
def _dist_case(rng):
    a = rng.normal(size=(3, 4))
    b = a + _away(rng, (3, 4), 0.2)
    r = rng.normal(size=3)
    return [a, b], lambda t: _project(tc.euclidean_distance(t[0], t[1]), r)


# ---------------------------------------------------------------------------
# composite model functions
# ---------------------------------------------------------------------------


@register("reduce_activate")
def _reduce_activate_case(rng):
    f, w = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 1, 1))
    r = rng.normal(size=(2, 2, 3, 3))
    return [f, w], lambda t: _project(tc.silu(tc.conv2d(t[0], t[1])), r)


@register("modality_fuse")
def _fuse_case(rng):
    from .msfpm import ModalityWeights, fuse

    fr, fi, logits = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 2))
    r = rng.normal(size=(2, 3, 2, 2))

    def fn(t):
        p = tc.softmax(t[2], axis=-1)
        w = ModalityWeights(tc.index(p, (slice(None), 0)), tc.index(p, (slice(None), 1)))
        return _project(fuse(t[0], t[1], w), r)

    return [fr, fi, logits], fn


def _decoupled(t: Sequence[Tensor], modality: str) -> DecoupledFeatures:
    return DecoupledFeatures(None, None, tc.l2_normalize(t[0]), tc.l2_normalize(t[1]), modality)


@register("ortho_loss")
def _ortho_case(rng):
    xs = [_away(rng, (3, 4), 0.1) for _ in range(4)]

    def fn(t):
        return ortho_loss(_decoupled(t[:2], "visible"), _decoupled(t[2:], "infrared"), 0.7)

    return xs, fn


@register("triplet_loss")
def _triplet_case(rng):
    cfg = TripletConfig(margin=0.2)
    for _ in range(1000):
        a, p, n = (rng.normal(size=(4, 3)) for _ in range(3))
        slack = np.linalg.norm(a - p, axis=1) - np.linalg.norm(a - n, axis=1) + cfg.margin
        # keep every hinge clear of its kink and away from zero distances
        if np.all(np.abs(slack) > 0.05):
            break
    return [a, p, n], lambda t: triplet_loss(Triplet(t[0], t[1], t[2], "human"), cfg)


def _head_inputs(rng):
    anchors = AnchorSpec.default()
    grids = [(2, 2), (1, 1), (1, 1)]
    k = 5 + 2
    for _ in range(1000):
        raw = [rng.normal(scale=0.8, size=(1, g, g, 3, k)) for g, _ in grids]
        boxes = []
        for _ in range(2):
            w, h = rng.uniform(0.1, 0.5), rng.uniform(0.2, 0.9)
            boxes.append((int(rng.integers(2)), rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h))
        assign = assign_targets(boxes, anchors, grids)
        # positives' box inputs must sit clear of the smooth-L1 switch point
        ok = True
        for i in range(assign.count):
            pos = raw[assign.level[i]][0, assign.gy[i], assign.gx[i], assign.anchor[i], :4]
            box_in = np.concatenate([1 / (1 + np.exp(-pos[:2])), pos[2:]])
            if np.any(np.abs(np.abs(box_in - assign.targets[i]) - 1 / 9) < 0.01):
                ok = False
        if ok and assign.count:
            return raw, assign, anchors
    raise RuntimeError("could not draw a kink-free head instance")


def _head_component(which: int):
    def build(rng):
        raw, assign, anchors = _head_inputs(rng)
        return raw, lambda t: component_losses(t, assign, anchors)[which]

    return build


register("head_l_cls")(_head_component(0))
register("head_l_box")(_head_component(1))


@register("head_l_conf")
def _objectness_case(rng):
    logits = rng.normal(scale=2, size=12)
    targets = np.where(rng.random(12) < 0.3, rng.uniform(0, 1, 12), 0.0)
    weight = np.where(targets > 0, 1.0, 0.5)
    return [logits], lambda t: objectness_loss(t[0], targets, weight, 2)


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------


def _analytic(fn, arrays):
    ts = [Tensor(a, requires_grad=True, dtype=F64) for a in arrays]
    loss = fn(ts)
    tc.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def _numeric(fn, arrays, eps, coords):
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        for flat in coords[k]:
            idx = np.unravel_index(flat, base.shape)
            vals = []
            for sign in (1.0, -1.0):
                probe = [a.copy() for a in arrays]
                probe[k][idx] += sign * eps
                with tc.no_grad():
                    vals.append(float(fn([Tensor(p, dtype=F64) for p in probe]).item()))
            g[idx] = (vals[0] - vals[1]) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray], floor: float = 1e-6) -> float:
    a = np.concatenate([g.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def check_case(case: GradCase, trials: int = 100, eps: float = 1e-3, tol: float = 1e-3, seed: int = 0,
               max_coords: int = 24) -> CaseResult:
    """Worst relative error over ``trials`` instances.

    Inputs larger than ``max_coords`` entries are checked on a random subset of
    coordinates (drawn per trial) to bound the number of function evaluations.
    """
    start = time.perf_counter()
    worst = 0.0
    base = zlib.crc32(case.name.encode())
    for trial in range(trials):
        rng = np.random.default_rng([seed, base, trial])
        arrays, fn = case.build(rng)
        arrays = [np.asarray(a, dtype=F64) for a in arrays]
        coords = [np.arange(a.size) if a.size <= max_coords else np.sort(rng.choice(a.size, max_coords, replace=False))
                  for a in arrays]
        analytic = _analytic(fn, arrays)
        numeric = _numeric(fn, arrays, eps, coords)
        err = relative_error([a.ravel()[c] for a, c in zip(analytic, coords)],
                             [n.ravel()[c] for n, c in zip(numeric, coords)])
        worst = max(worst, err)
    return CaseResult(case.name, trials, worst, worst < tol, time.perf_counter() - start)


def run_suite(registry: dict[str, GradCase] | None = None, trials: int = 100, eps: float = 1e-3,
              tol: float = 1e-3, seed: int = 0) -> list[CaseResult]:
    registry = REGISTRY if registry is None else registry
    if not registry:
        raise EmptyRegistryError("gradient check registry is empty")
    return [check_case(case, trials, eps, tol, seed) for case in registry.values()]


def format_report(results: Sequence[CaseResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name:<22} max_rel_err={r.max_rel_error:.2e} "
             f"trials={r.trials} ({r.seconds:.2f}s)" for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} ops passed" + (f"; failed: {', '.join(failed)}"
                                                                          if failed else ""))
    return "\n".join(lines)
