"""Dense NCHW tensor operations with hand-written backward passes.

Tensors are plain 4-D ``numpy.ndarray`` objects in ``(N, C, H, W)`` order.
Every operation is pure: inputs are never written to.

Convolutions use im2col followed by one batched GEMM per batch item.  BLAS
is pinned to a single thread and parallelism, when enabled through
``SRKIT_THREADS``, is spread over batch items.  Each item therefore runs the
exact same GEMM no matter how many workers exist, which keeps results
bitwise identical across thread counts.
"""
from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

DTYPES = {"float32": np.float32, "float64": np.float64}


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""

    def __init__(self, op: str, dim: str, expected, got):
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: dimension '{dim}' expected {expected}, got {got}")


class NumericError(FloatingPointError):
    """Raised when a tensor contains NaN or Inf."""

    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite values produced by {where}")


def as_tensor(data, dtype=np.float32) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError("as_tensor", "rank", 4, arr.ndim)
    return np.ascontiguousarray(arr)


def check_finite(x: Tensor, where: str) -> Tensor:
    if not np.isfinite(x).all():
        raise NumericError(where)
    return x


def _require_4d(op: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(op, "rank", 4, x.ndim)


# ---------------------------------------------------------------------------
# Threading
# ---------------------------------------------------------------------------

_blas_pinned = False
_pin_lock = threading.Lock()
_executor: ThreadPoolExecutor | None = None
_executor_size = 0


def num_threads() -> int:
    """Worker count: ``SRKIT_THREADS`` if set, else the CPU count."""
    env = os.environ.get("SRKIT_THREADS", "").strip()
    cpus = os.cpu_count() or 1
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            return cpus
    return cpus


def _pin_blas() -> None:
    global _blas_pinned
    if _blas_pinned:
        return
    with _pin_lock:
        if not _blas_pinned:
            try:
                from threadpoolctl import threadpool_limits

                threadpool_limits(limits=1, user_api="blas")
            except ImportError:  # pragma: no cover
                pass
            _blas_pinned = True


def _for_items(fn, n: int) -> None:
    """Run ``fn(slice)`` over batch items, possibly across worker threads."""
    global _executor, _executor_size
    _pin_blas()
    workers = min(num_threads(), n)
    if workers <= 1:
        fn(slice(0, n))
        return
    if _executor is None or _executor_size != workers:
        if _executor is not None:
            _executor.shutdown(wait=True)
        _executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="srkit")
        _executor_size = workers
    # One item per task: a task's arithmetic never depends on the worker count.
    list(_executor.map(lambda i: fn(slice(i, i + 1)), range(n)))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvParams:
    """Weights ``(C_out, C_in / groups, K, K)``, bias ``(C_out,)``, stride 1, same padding."""

    weight: np.ndarray
    bias: np.ndarray
    groups: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError("ConvParams", "weight rank", 4, self.weight.ndim)
        c_out, _, kh, kw = self.weight.shape
        if kh != kw or kh % 2 == 0:
            raise ShapeError("ConvParams", "kernel", "odd square", (kh, kw))
        if self.groups < 1 or c_out % self.groups:
            raise ShapeError("ConvParams", "C_out % groups", 0, c_out % max(self.groups, 1))
        if self.bias.shape != (c_out,):
            raise ShapeError("ConvParams", "bias", (c_out,), self.bias.shape)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2


def _check_conv_input(op: str, x: Tensor, p: ConvParams) -> None:
    _require_4d(op, x)
    if x.shape[1] != p.in_channels:
        raise ShapeError(op, "C_in", p.in_channels, x.shape[1])
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(op, "H,W", ">= 1", x.shape[2:])


def _im2col(x: Tensor, k: int, groups: int) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(N, G, (C/G)*K*K, H*W)`` with rows ordered (c, ky, kx)."""
    n, c, h, w = x.shape
    pad = (k - 1) // 2
    if k == 1:
        return x.reshape(n, groups, c // groups, h * w)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, K, K
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, groups, (c // groups) * k * k, h * w)


def _grouped_weight(p: ConvParams) -> np.ndarray:
    c_out = p.out_channels
    return np.ascontiguousarray(p.weight.reshape(p.groups, c_out // p.groups, -1))


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Grouped 2-D convolution, stride 1, zero padding preserving H and W."""
    return conv2d_cached(x, p, keep_cols=False)[0]


def conv2d_cached(x: Tensor, p: ConvParams, keep_cols: bool = True):
    """``conv2d`` that also returns its im2col columns for reuse by the backward pass."""
    _check_conv_input("conv2d", x, p)
    n, c, h, w = x.shape
    k, g = p.kernel_size, p.groups
    wg = _grouped_weight(p).astype(x.dtype, copy=False)
    out = np.empty((n, g, p.out_channels // g, h * w), dtype=x.dtype)
    cols = np.empty((n, g, (c // g) * k * k, h * w), dtype=x.dtype) if keep_cols else None

    def work(s):
        item_cols = _im2col(x[s], k, g)
        if keep_cols:
            cols[s] = item_cols
            item_cols = cols[s]
        else:
            item_cols = np.ascontiguousarray(item_cols)
        np.matmul(wg, item_cols, out=out[s])

    _for_items(work, n)
    y = out.reshape(n, p.out_channels, h, w)
    y += p.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return y, cols


def _transposed_params(p: ConvParams) -> ConvParams:
    """Kernel whose convolution maps output gradients back to input gradients."""
    g, k = p.groups, p.kernel_size
    cog, cig = p.out_channels // g, p.weight.shape[1]
    wt = p.weight.reshape(g, cog, cig, k, k).transpose(0, 2, 1, 3, 4)[..., ::-1, ::-1]
    wt = np.ascontiguousarray(wt).reshape(g * cig, cog, k, k)
    return ConvParams(wt, np.zeros(g * cig, dtype=p.weight.dtype), g)


def conv2d_backward(x: Tensor, p: ConvParams, grad_out: Tensor, cols=None):
    """Return ``(grad_x, grad_weight, grad_bias)`` for ``conv2d(x, p)``.

    ``cols`` may carry the columns from ``conv2d_cached`` to skip recomputing them.
    """
    _check_conv_input("conv2d_backward", x, p)
    n, c, h, w = x.shape
    expected = (n, p.out_channels, h, w)
    if grad_out.shape != expected:
        raise ShapeError("conv2d_backward", "grad_out", expected, grad_out.shape)
    k, g = p.kernel_size, p.groups
    cog = p.out_channels // g
    wg = _grouped_weight(p).astype(x.dtype, copy=False)
    gy = np.ascontiguousarray(grad_out.reshape(n, g, cog, h * w))
    per_item_gw = np.empty((n, g, cog, wg.shape[2]), dtype=x.dtype)
    grad_x = None
    if k == 1:
        wg_t = np.ascontiguousarray(wg.transpose(0, 2, 1))
        grad_x = np.empty((n, g, c // g, h * w), dtype=x.dtype)

    def work(s):
        item_cols = cols[s] if cols is not None else np.ascontiguousarray(_im2col(x[s], k, g))
        np.matmul(gy[s], item_cols.transpose(0, 1, 3, 2), out=per_item_gw[s])
        if k == 1:
            np.matmul(wg_t, gy[s], out=grad_x[s])

    _for_items(work, n)
    grad_w = per_item_gw.sum(axis=0).reshape(p.weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if k == 1:
        grad_x = grad_x.reshape(n, c, h, w)
    else:
        grad_x = conv2d(grad_out, _transposed_params(p))
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Elementwise and layout ops
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    """Pass ``grad_out`` where ``x > 0``; zero where ``x <= 0``."""
    if x.shape != grad_out.shape:
        raise ShapeError("relu_backward", "shape", x.shape, grad_out.shape)
    return np.where(x > 0, grad_out, np.zeros((), dtype=grad_out.dtype))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", "shape", a.shape, b.shape)
    return a + b


def concat_channels(ts) -> Tensor:
    ts = list(ts)
    if not ts:
        raise ShapeError("concat_channels", "count", ">= 1", 0)
    ref = ts[0]
    _require_4d("concat_channels", ref)
    for t in ts[1:]:
        _require_4d("concat_channels", t)
        for axis, dim in ((0, "N"), (2, "H"), (3, "W")):
            if t.shape[axis] != ref.shape[axis]:
                raise ShapeError("concat_channels", dim, ref.shape[axis], t.shape[axis])
    if len(ts) == 1:
        return ref.copy()
    return np.concatenate(ts, axis=1)


def split_channels(x: Tensor, sizes) -> list:
    """Inverse of ``concat_channels``; also its backward pass."""
    sizes = list(sizes)
    if sum(sizes) != x.shape[1]:
        raise ShapeError("split_channels", "C", sum(sizes), x.shape[1])
    out, start = [], 0
    for s in sizes:
        out.append(np.ascontiguousarray(x[:, start:start + s]))
        start += s
    return out


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """``(N, C*r*r, H, W)`` -> ``(N, C, H*r, W*r)``."""
    _require_4d("pixel_shuffle", x)
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ShapeError("pixel_shuffle", "C % r^2", 0, c % (r * r) if r >= 1 else r)
    co = c // (r * r)
    y = x.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y).reshape(n, co, h * r, w * r)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of ``pixel_shuffle``; also its backward pass."""
    _require_4d("pixel_unshuffle", x)
    n, c, hr, wr = x.shape
    if r < 1 or hr % r or wr % r:
        raise ShapeError("pixel_unshuffle", "H,W % r", 0, (hr % r, wr % r))
    h, w = hr // r, wr // r
    y = x.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y).reshape(n, c * r * r, h, w)


def conv_mult_adds(p_or_shape, h: int, w: int) -> int:
    """Multiply-accumulates of one stride-1 convolution over an ``h x w`` output."""
    if isinstance(p_or_shape, ConvParams):
        c_out, cin_g, k, _ = p_or_shape.weight.shape
    else:
        c_out, cin_g, k, _ = p_or_shape
    return k * k * cin_g * c_out * h * w
