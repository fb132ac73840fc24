"""Dense NCHW kernels on top of numpy.

Tensors are plain ``np.ndarray`` values. The production path runs in float32;
every kernel preserves the dtype of its inputs, so the same code runs in float64
for gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray
DTYPE = np.float32


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class BoundsError(IndexError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride_h, self.stride_w) < 1:
            raise ShapeError(f"kernel and stride must be positive: {self}")
        if min(self.pad_h, self.pad_w) < 0:
            raise ShapeError(f"padding must be non-negative: {self}")

    @classmethod
    def square(cls, kernel: int, stride: int = 1, pad: int = 0) -> "WindowSpec":
        return cls(kernel, kernel, stride, stride, pad, pad)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        wo = (w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"window {self} does not fit a {h}x{w} input")
        return ho, wo

    @property
    def area(self) -> int:
        return self.kernel_h * self.kernel_w


def _require_rank(x: Tensor, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{what} must have rank {rank}, got shape {x.shape}")


def pad2d(x: Tensor, spec: WindowSpec, value: float = 0.0) -> Tensor:
    if spec.pad_h == 0 and spec.pad_w == 0:
        return x
    width = ((0, 0), (0, 0), (spec.pad_h, spec.pad_h), (spec.pad_w, spec.pad_w))
    return np.pad(x, width, constant_values=value)


def windows(x: Tensor, spec: WindowSpec, pad_value: float = 0.0) -> Tensor:
    """Strided view of shape (N, C, Ho, Wo, kh, kw) over the padded input."""
    _require_rank(x, 4, "input")
    ho, wo = spec.out_size(x.shape[2], x.shape[3])
    xp = pad2d(x, spec, pad_value)
    v = sliding_window_view(xp, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    return v[:, :, : ho * spec.stride_h : spec.stride_h, : wo * spec.stride_w : spec.stride_w]


def fold_windows(contrib: Tensor, in_shape: tuple[int, ...], spec: WindowSpec) -> Tensor:
    """Adjoint of :func:`windows`: sum per-window contributions back onto the input grid.

    Positions covered by several windows receive the sum of their shares; shares
    landing on padding are dropped.
    """
    n, c, h, w = in_shape
    ho, wo = contrib.shape[2], contrib.shape[3]
    out = np.zeros((n, c, h + 2 * spec.pad_h, w + 2 * spec.pad_w), dtype=contrib.dtype)
    sh, sw = spec.stride_h, spec.stride_w
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            out[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += contrib[..., i, j]
    return out[:, :, spec.pad_h : spec.pad_h + h, spec.pad_w : spec.pad_w + w]


def window_valid_mask(in_hw: tuple[int, int], spec: WindowSpec) -> np.ndarray:
    """Boolean (Ho, Wo, kh, kw) mask, False where a window position lies in padding."""
    h, w = in_hw
    ones = np.ones((1, 1, h, w), dtype=bool)
    return windows(ones, spec, pad_value=False)[0, 0]


# ---------------------------------------------------------------------------
# convolution


def _check_conv(x: Tensor, weight: Tensor, bias: Tensor | None, groups: int) -> None:
    _require_rank(x, 4, "conv input")
    _require_rank(weight, 4, "conv weight")
    if groups < 1 or x.shape[1] % groups or weight.shape[0] % groups:
        raise ShapeError(f"channels {x.shape[1]}->{weight.shape[0]} not divisible by groups={groups}")
    if weight.shape[1] * groups != x.shape[1]:
        raise ShapeError(
            f"conv weight expects {weight.shape[1] * groups} input channels, input has {x.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: WindowSpec, groups: int = 1) -> Tensor:
    """Cross-correlation of an NCHW input with an OIHW kernel."""
    _check_conv(x, weight, bias, groups)
    if weight.shape[2:] != (spec.kernel_h, spec.kernel_w):
        raise ShapeError(f"kernel {weight.shape[2:]} does not match window {spec}")
    cols = windows(x, spec)
    if groups == 1:
        out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        n, _, ho, wo = cols.shape[:4]
        og = weight.shape[0] // groups
        out = np.matmul(weight.reshape(groups, og, -1), _group_cols(cols, groups))
        out = out.reshape(groups, og, n, ho, wo).transpose(2, 0, 1, 3, 4).reshape(n, -1, ho, wo)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d_grad_input(
    dout: Tensor, weight: Tensor, in_shape: tuple[int, ...], spec: WindowSpec, groups: int = 1
) -> Tensor:
    if groups == 1:
        dcols = np.tensordot(dout, weight, axes=([1], [0]))  # N Ho Wo C kh kw
        dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
    else:
        n, o, ho, wo = dout.shape
        g, cg, kh, kw = groups, weight.shape[1], spec.kernel_h, spec.kernel_w
        wg = weight.reshape(g, o // g, -1)
        dcols = np.matmul(wg.transpose(0, 2, 1), _group_dout(dout, groups))
        dcols = dcols.reshape(g, cg, kh, kw, n, ho, wo).transpose(4, 0, 1, 5, 6, 2, 3)
        dcols = dcols.reshape(n, g * cg, ho, wo, kh, kw)
    return fold_windows(dcols, in_shape, spec)


def conv2d_grad_weight(dout: Tensor, x: Tensor, spec: WindowSpec, groups: int = 1) -> Tensor:
    cols = windows(x, spec)
    if groups == 1:
        return np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))
    c, kh, kw = cols.shape[1], cols.shape[4], cols.shape[5]
    dw = np.matmul(_group_dout(dout, groups), _group_cols(cols, groups).transpose(0, 2, 1))
    return dw.reshape(-1, c // groups, kh, kw)


def _group_cols(cols: Tensor, groups: int) -> Tensor:
    """(N, C, Ho, Wo, kh, kw) windows -> (groups, C/groups*kh*kw, N*Ho*Wo)."""
    n, c, ho, wo, kh, kw = cols.shape
    g = cols.reshape(n, groups, c // groups, ho, wo, kh, kw).transpose(1, 2, 5, 6, 0, 3, 4)
    return g.reshape(groups, -1, n * ho * wo)


def _group_dout(dout: Tensor, groups: int) -> Tensor:
    """(N, O, Ho, Wo) -> (groups, O/groups, N*Ho*Wo)."""
    n, o, ho, wo = dout.shape
    return dout.reshape(n, groups, o // groups, ho, wo).transpose(1, 2, 0, 3, 4).reshape(groups, o // groups, -1)


# ---------------------------------------------------------------------------
# pooling


def maxpool_forward(x: Tensor, spec: WindowSpec) -> tuple[Tensor, np.ndarray]:
    """Per-window maxima plus, per window, the flat (h*W + w) input index of the
    first maximal element in row-major window order."""
    _require_rank(x, 4, "pool input")
    if spec.pad_h >= spec.kernel_h or spec.pad_w >= spec.kernel_w:
        raise ShapeError(f"padding must be smaller than the kernel: {spec}")
    n, c, h, w = x.shape
    win = windows(x, spec, pad_value=-np.inf)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, spec.area)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, spec.kernel_w)
    rows = np.arange(ho)[:, None] * spec.stride_h - spec.pad_h + di
    cols = np.arange(wo)[None, :] * spec.stride_w - spec.pad_w + dj
    arg = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(out), arg


def avgpool_forward(x: Tensor, spec: WindowSpec) -> Tensor:
    win = windows(x, spec)
    return np.ascontiguousarray(win.mean(axis=(-2, -1), dtype=x.dtype))


def avgpool_backward(dout: Tensor, in_shape: tuple[int, ...], spec: WindowSpec) -> Tensor:
    share = (dout / dout.dtype.type(spec.area))[..., None, None]
    contrib = np.broadcast_to(share, dout.shape + (spec.kernel_h, spec.kernel_w))
    return fold_windows(contrib, in_shape, spec)


def scatter_to_argmax(upstream: Tensor, arg: np.ndarray, in_shape: tuple[int, ...]) -> Tensor:
    """Route each window's upstream value to its argmax input position, accumulating overlaps."""
    n, c, h, w = in_shape
    plane = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
    idx = (arg + plane).ravel()
    out = np.bincount(idx, weights=upstream.ravel(), minlength=n * c * h * w)
    return out.astype(upstream.dtype).reshape(in_shape)


# ---------------------------------------------------------------------------
# elementwise and reductions


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return a - b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return a * b


def scalar_mul(a: Tensor, s: float) -> Tensor:
    return a * a.dtype.type(s)


def sign(a: Tensor) -> Tensor:
    return np.sign(a)


def clamp(a: Tensor, lo, hi) -> Tensor:
    return np.minimum(np.maximum(a, lo), hi).astype(a.dtype, copy=False)


def _nonempty(a: Tensor) -> None:
    if a.size == 0:
        raise ShapeError("reduction over an empty tensor")


def l1_norm(a: Tensor, axis=None):
    _nonempty(a)
    return np.abs(a).sum(axis=axis)


def l2_norm(a: Tensor, axis=None):
    _nonempty(a)
    return np.sqrt(np.square(a).sum(axis=axis))


def total(a: Tensor, axis=None):
    _nonempty(a)
    return a.sum(axis=axis)


def argmax_per_row(a: Tensor) -> np.ndarray:
    _require_rank(a, 2, "argmax input")
    _nonempty(a)
    return a.argmax(axis=1)


def per_sample(values: Tensor) -> Tensor:
    """Reshape a per-sample vector for broadcasting against an NCHW batch."""
    return values.reshape(-1, 1, 1, 1)


# ---------------------------------------------------------------------------
# input transforms


def resize_and_pad_index(
    in_hw: tuple[int, int],
    new_hw: tuple[int, int],
    target_hw: tuple[int, int],
    offset: tuple[int, int],
) -> np.ndarray:
    """Flat source index (into the in_h*in_w plane) for every target pixel, -1 for padding.

    Resizing is nearest-neighbour: target row i of the resized image reads source
    row floor(i * in_h / new_h).
    """
    (h, w), (nh, nw), (th, tw), (oh, ow) = in_hw, new_hw, target_hw, offset
    if min(nh, nw) < 1 or nh > th or nw > tw:
        raise BoundsError(f"resized {nh}x{nw} does not fit target {th}x{tw}")
    if oh < 0 or ow < 0 or oh + nh > th or ow + nw > tw:
        raise BoundsError(f"offset ({oh},{ow}) places {nh}x{nw} outside {th}x{tw}")
    rows = np.arange(nh) * h // nh
    cols = np.arange(nw) * w // nw
    idx = np.full((th, tw), -1, dtype=np.int64)
    idx[oh : oh + nh, ow : ow + nw] = rows[:, None] * w + cols[None, :]
    return idx


def gather_pixels(x: Tensor, idx: np.ndarray) -> Tensor:
    """Apply per-sample pixel index maps: idx is (th, tw) or (N, th, tw)."""
    n, c, h, w = x.shape
    idx = np.broadcast_to(idx, (n,) + idx.shape[-2:])
    th, tw = idx.shape[1:]
    flat = idx.reshape(n, 1, th * tw)
    src = np.concatenate([x.reshape(n, c, h * w), np.zeros((n, c, 1), x.dtype)], axis=2)
    safe = np.where(flat < 0, h * w, flat)
    out = np.take_along_axis(src, np.broadcast_to(safe, (n, c, th * tw)), axis=2)
    return out.reshape(n, c, th, tw)


def scatter_pixels(g: Tensor, idx: np.ndarray, in_hw: tuple[int, int]) -> Tensor:
    """Adjoint of :func:`gather_pixels`."""
    n, c, th, tw = g.shape
    h, w = in_hw
    idx = np.broadcast_to(idx, (n, th, tw)).reshape(n, 1, th * tw)
    base = (np.arange(n * c) * (h * w + 1)).reshape(n, c, 1)
    flat = np.where(idx < 0, h * w, idx) + base
    out = np.bincount(flat.ravel(), weights=g.reshape(n, c, -1).ravel(), minlength=n * c * (h * w + 1))
    return out.reshape(n, c, h * w + 1)[..., : h * w].reshape(n, c, h, w).astype(g.dtype)


def resize_and_pad(
    x: Tensor, new_h: int, new_w: int, target_h: int, target_w: int, offset_h: int, offset_w: int
) -> Tensor:
    _require_rank(x, 4, "resize input")
    idx = resize_and_pad_index(x.shape[2:], (new_h, new_w), (target_h, target_w), (offset_h, offset_w))
    return gather_pixels(x, idx)


def gaussian_kernel(size: int, sigma: float) -> Tensor:
    if size < 1 or size % 2 == 0:
        raise ParameterError(f"kernel size must be a positive odd integer, got {size}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    r = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return (k / k.sum()).astype(DTYPE)
