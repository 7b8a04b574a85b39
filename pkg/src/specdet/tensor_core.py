"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the detector needs are provided. Every op builds a new
:class:`Tensor` whose ``_backward`` closure maps the output gradient to one
gradient per parent. :func:`backward` topologically orders the recorded graph
into a :class:`ComputationTape` and walks it in reverse.

Layout conventions: feature maps are ``(N, C, H, W)``; embeddings are
``(N, D)``. There is no general broadcasting: bias addition happens inside
:func:`linear` / :func:`conv2d`, and per-sample scalars go through
:func:`scale`.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class InvalidLogitsError(ValueError):
    """Raised when softmax receives an empty input."""


class Tensor:
    """n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=DEFAULT_DTYPE, name: str = ""):
        arr = np.array(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.ndim > 1 and 0 in arr.shape:
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        t.name = ""
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; no broadcasting except against python scalars
    def __add__(self, other):
        return add_scalar(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul_scalar(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise TypeError("only division by a python scalar is supported")
        return mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def as_tensor(x, dtype=DEFAULT_DTYPE) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor._wrap(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# tape / backward
# ---------------------------------------------------------------------------


@dataclass
class ComputationTape:
    """Recorded operations in topological order (inputs before outputs)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> ComputationTape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def run_backward(self, seed: np.ndarray) -> None:
        if not self.nodes:
            return
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the graph."""
    if loss.size != 1:
        raise DimensionError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = ComputationTape.record(loss)
    tape.run_backward(np.ones_like(loss.data))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "mul_scalar")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each leading-axis slice of ``x`` by the matching entry of ``s`` (shape ``(N,)``)."""
    if s.ndim != 1 or s.shape[0] != x.shape[0]:
        raise DimensionError(f"scale: per-sample factors {s.shape} do not match {x.shape}")
    sb = s.data.reshape((-1,) + (1,) * (x.ndim - 1))
    axes = tuple(range(1, x.ndim))

    def _bw(g):
        return g * sb, (g * x.data).sum(axis=axes)

    return _result(x.data * sb, (x, s), _bw, "scale")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form; exp never sees a positive argument
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), sharing the sigmoid kernel used by :func:`sigmoid`."""
    s = _sigmoid(x.data)
    y = x.data * s
    return _result(y, (x,), lambda g: (g * (s + x.data * s * (1 - s)),), "silu")


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(x.data.dtype.type(0), x.data)
    return _result(y, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clamp")


def smooth_l1(x: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (Huber with slope 1) against a constant target."""
    target = np.asarray(target, dtype=x.data.dtype)
    if target.shape != x.shape:
        raise DimensionError(f"smooth_l1: target {target.shape} vs input {x.shape}")
    d = x.data - target
    ad = np.abs(d)
    small = ad < beta
    y = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta).astype(x.data.dtype)
    return _result(y, (x,), lambda g: (g * np.where(small, d / beta, np.sign(d)),), "smooth_l1")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    y = np.sum(x.data, axis=axis)

    def _bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.data.dtype),)

    return _result(np.asarray(y, dtype=x.data.dtype), (x,), _bw, "sum")


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul_scalar(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index(x: Tensor, key) -> Tensor:
    """Basic or fancy indexing; the backward scatters with ``np.add.at``."""
    y = x.data[key]

    def _bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _result(np.array(y), (x,), _bw, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from exc
    return _result(y, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.size == 0 or x.shape[axis] == 0:
        raise InvalidLogitsError("softmax over an empty set of logits")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.size == 0 or x.shape[axis] == 0:
        raise InvalidLogitsError("log_softmax over an empty set of logits")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def _bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), _bw, "log_softmax")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x W^T + b`` for ``x`` of shape ``(..., in)`` and ``W`` of shape ``(out, in)``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    y = x.data @ W.data.T
    if b is not None:
        y = y + b.data

    def _bw(g):
        gx = g @ W.data
        g2 = g.reshape(-1, W.shape[0])
        gW = g2.T @ x.data.reshape(-1, W.shape[1])
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gW, gb) if b is not None else (gx, gW)

    parents = (x, W, b) if b is not None else (x, W)
    return _result(y, parents, _bw, "linear")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``(N, C, H, W)`` input with an ``(O, C, k, k)`` kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels but kernel {kernel.shape} expects {kc}")
    if kh != kw or kh not in (1, 3):
        raise DimensionError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias {bias.shape} incompatible with {o} output channels")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {k} with padding {padding}")

    if k == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride]
        y = np.tensordot(kernel.data[:, :, 0, 0], xs, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        y = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y)
    if bias is not None:
        y = y + bias.data.reshape(1, o, 1, 1)

    def _bw(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if k == 1 and padding == 0:
            gk = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3])).reshape(o, c, 1, 1)
            gxs = np.tensordot(g, kernel.data[:, :, 0, 0], axes=([1], [0])).transpose(0, 3, 1, 2)
            if stride == 1:
                gx = gxs
            else:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gxs
        else:
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            gcols = np.tensordot(g, kernel.data, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
            gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[..., i, j].transpose(
                        0, 3, 1, 2
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _result(y.astype(x.data.dtype, copy=False), parents, _bw, "conv2d")


def pool2d(x: Tensor, mode: str, window: int, stride: int | None = None) -> Tensor:
    """Max or average pooling without padding.

    Max-pool routes the gradient to the first row-major argmax in each window.
    """
    if mode not in ("max", "avg"):
        raise ValueError(f"pool2d: unknown mode {mode!r}")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(f"pool2d: window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    if mode == "max":
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    else:
        y = flat.mean(axis=-1)

    def _bw(g):
        gx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                if mode == "max":
                    contrib = g * (arg == i * window + j)
                else:
                    contrib = g / (window * window)
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        return (gx,)

    return _result(np.ascontiguousarray(y, dtype=x.data.dtype), (x,), _bw, f"{mode}_pool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    y = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def _bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result(y, (x,), _bw, "upsample_nearest")


def global_avg_pool(x: Tensor) -> Tensor:
    """``(N, C, H, W) -> (N, C)``."""
    return mean(x, axis=(2, 3))


def standardize(x: Tensor, axes: tuple[int, ...] = (0, 2, 3), eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Zero-mean, unit-variance over ``axes`` (biased variance).

    Returns the normalized tensor plus the mean and variance that were used.
    """
    count = int(np.prod([x.shape[a] for a in axes]))
    if count < 2:
        raise DimensionError(f"standardize needs at least 2 values per group, got {count}")
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = ((x.data - mu) * inv).astype(x.data.dtype)

    def _bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return ((inv * (g - gm - y * gym)).astype(x.data.dtype),)

    return _result(y, (x,), _bw, "standardize"), mu.reshape(-1), var.reshape(-1)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """``gamma[c] * x[:, c] + beta[c]`` for an ``(N, C, ...)`` tensor."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"channel_affine: expected ({c},) parameters, got {gamma.shape} and {beta.shape}")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    red = tuple(a for a in range(x.ndim) if a != 1)
    y = x.data * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def _bw(g):
        return (g * gamma.data.reshape(bshape), (g * x.data).sum(axis=red), g.sum(axis=red))

    return _result(y.astype(x.data.dtype), (x, gamma, beta), _bw, "channel_affine")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise unit-norm; rows with norm below ``eps`` map to zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    ok = norm > eps
    safe = np.where(ok, norm, 1).astype(x.data.dtype)
    y = np.where(ok, x.data / safe, 0).astype(x.data.dtype)

    def _bw(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(ok, (g - y * proj) / safe, 0).astype(x.data.dtype),)

    return _result(y, (x,), _bw, "l2_normalize")


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product of two ``(N, D)`` tensors."""
    return sum(mul(a, b), axis=-1)


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Per-row Euclidean distance; exactly coincident rows give 0 with zero gradient."""
    _check_same_shape(a, b, "euclidean_distance")
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=-1))
    pos = d > 0
    safe = np.where(pos, d, 1).astype(a.data.dtype)

    def _bw(g):
        ga = np.where(pos, g / safe, 0)[..., None] * diff
        return ga.astype(a.data.dtype), (-ga).astype(a.data.dtype)

    return _result(d.astype(a.data.dtype), (a, b), _bw, "euclidean_distance")


# ---------------------------------------------------------------------------
# TNSR binary container
# ---------------------------------------------------------------------------

TNSR_MAGIC = b"TNSR"


class TensorFormatError(ValueError):
    """Raised on a malformed TNSR record."""


def write_tnsr(fh: BinaryIO, arr: np.ndarray) -> None:
    """Write one record: magic, u32 rank, u32 dims, f32 data (all little-endian)."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(TNSR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tnsr(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != TNSR_MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims)) if rank else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise TensorFormatError(f"truncated record: expected {count} floats")
    return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)


def save_tnsr(path, arrays: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tnsr(fh, arr)


def load_tnsr(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while True:
            head = fh.peek(1) if hasattr(fh, "peek") else b""
            if not head:
                break
            out.append(read_tnsr(fh))
    return out
