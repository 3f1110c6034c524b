"""Minimal reverse-mode autodiff over channels-first numpy arrays.

Every op takes and returns :class:`Tensor` objects holding a single image-like
array (``C x H x W`` for feature maps). There is no batch axis; training runs
with batch size 1.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

# per thread, so parallel inference workers cannot clobber each other's setting
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class OpNode:
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: OpNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn, **saved) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = OpNode(op, tuple(inputs), backward_fn, saved)
    return out


def _check_chw(x: Tensor, op: str) -> None:
    if x.data.ndim != 3:
        raise ShapeError(f"{op}: expected C x H x W input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, k, k, out_h, out_w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
    return cols.reshape(c * k * k, out_h * out_w)


def _wide_matmul(a: np.ndarray, b: np.ndarray, block: int = 2048) -> np.ndarray:
    # OpenBLAS is slow on short-by-very-wide products; contiguous column blocks are ~2x faster.
    n = b.shape[1]
    if n <= block:
        return a @ b
    out = np.empty((a.shape[0], n), dtype=np.result_type(a, b))
    for i in range(0, n, block):
        np.matmul(a, np.ascontiguousarray(b[:, i : i + block]), out=out[:, i : i + block])
    return out


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``kernels`` plus a per-output-channel bias."""
    _check_chw(x, "conv2d")
    if kernels.data.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"conv2d: kernels must be C_out x C_in x k x k, got {kernels.shape}")
    c_out, c_in, k, _ = kernels.shape
    if c_in != x.shape[0]:
        raise ShapeError(
            f"conv2d: kernel expects {c_in} input channels but input has {x.shape[0]} (input {x.shape}, kernels {kernels.shape})"
        )
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match C_out={c_out}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    _, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, out_h, out_w)
    wmat = kernels.data.reshape(c_out, -1)
    out = _wide_matmul(wmat, cols).reshape(c_out, out_h, out_w) + bias.data[:, None, None]

    def backward(g: np.ndarray):
        g2 = g.reshape(c_out, -1)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c_in, k, k, out_h, out_w)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += gcols[:, i, j]
            gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        gk = (g2 @ cols.T).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g2.sum(axis=1) if bias.requires_grad else None
        return gx, gk, gb

    return _make(out.astype(x.dtype, copy=False), "conv2d", (x, kernels, bias), backward)


# ---------------------------------------------------------------------------
# pooling / resampling


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max over ``window x window`` cells; ties go to the first cell in row-major order."""
    _check_chw(x, "maxpool2d")
    c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ValueError("maxpool2d: window and stride must be positive")
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} exceeds input extent {h}x{w}")
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    cand = np.empty((window * window, c, out_h, out_w), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            cand[i * window + j] = x.data[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
    arg = cand.argmax(axis=0)
    out = np.take_along_axis(cand, arg[None], axis=0)[0]

    def backward(g: np.ndarray):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(window):
            for j in range(window):
                sel = arg == i * window + j
                gx[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += np.where(sel, g, 0)
        return (gx,)

    return _make(out, "maxpool2d", (x,), backward, argmax=arg)


def bilinear_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Corner-aligned 1D interpolation matrix of shape ``(n_in*factor, n_in)``."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    _check_chw(x, "upsample_bilinear")
    if factor < 1:
        raise ValueError(f"upsample_bilinear: factor must be >= 1, got {factor}")
    if factor == 1:
        return _make(x.data.copy(), "upsample_bilinear", (x,), lambda g: (g,))
    _, h, w = x.shape
    mh = bilinear_matrix(h, factor, x.dtype)
    mw = bilinear_matrix(w, factor, x.dtype)
    out = np.einsum("ih,chw,jw->cij", mh, x.data, mw, optimize=True)

    def backward(g: np.ndarray):
        return (np.einsum("ih,cij,jw->chw", mh, g, mw, optimize=True),)

    return _make(out, "upsample_bilinear", (x,), backward)


# ---------------------------------------------------------------------------
# elementwise and structural


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), "relu", (x,), lambda g: (g * mask,), mask=mask)


def dropout_mask(shape: tuple[int, ...], rate: float, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.random(shape) >= rate


def dropout(x: Tensor, rate: float, training: bool, seed) -> Tensor:
    """Inverted dropout; the mask is a pure function of ``seed``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return _make(x.data, "dropout", (x,), lambda g: (g,))
    scale = x.dtype.type(1.0 / (1.0 - rate))
    mask = dropout_mask(x.shape, rate, seed)
    keep = mask * scale
    return _make(x.data * keep, "dropout", (x,), lambda g: (g * keep,), mask=mask)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("concat_channels: need at least one input")
    for t in inputs:
        _check_chw(t, "concat_channels")
    spatial = inputs[0].shape[1:]
    for t in inputs[1:]:
        if t.shape[1:] != spatial:
            raise ShapeError(f"concat_channels: spatial mismatch {t.shape[1:]} vs {spatial}")
    dtype = np.result_type(*[t.dtype for t in inputs])
    out = np.concatenate([t.data.astype(dtype, copy=False) for t in inputs], axis=0)
    bounds = np.cumsum([0] + [t.shape[0] for t in inputs])

    def backward(g: np.ndarray):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(inputs)))

    return _make(out, "concat_channels", tuple(inputs), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all values as a 1-element tensor."""
    return _make(np.asarray(x.data.sum()).reshape(1), "sum", (x,), lambda g: (np.full(x.shape, g[0], dtype=x.dtype),))


def softmax_channels(x: Tensor) -> Tensor:
    _check_chw(x, "softmax_channels")
    if x.shape[0] < 2:
        raise ShapeError("softmax_channels: need at least two channels")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def backward(g: np.ndarray):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)),)

    return _make(p, "softmax_channels", (x,), backward)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``.

    Gradients accumulate into leaves (parameters) across calls; intermediate
    grads are released unless ``retain_graph`` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        if retain_graph:
            t.grad = g
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        if not retain_graph:
            t.node = None
