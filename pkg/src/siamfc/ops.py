"""Dense 4-D tensor kernels: VALID-mode conv/pool/norm forwards and their exact
reverse-mode backwards, plus the cross-correlation scoring layer, bicubic
score-map upsampling and the Hann penalty window.

Tensors are contiguous float32 numpy arrays in (batch, channel, height, width)
order. Every kernel is a pure function of its arguments; the single exception
is batch-norm running statistics, which are mutated in place in train mode and
are owned by the enclosing network (single training thread).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Keys cubic coefficient for bicubic interpolation.
BICUBIC_A = -0.5


class ShapeError(ValueError):
    """Raised when tensor shapes violate a kernel's contract."""


def as_tensor(a) -> np.ndarray:
    """Coerce to a contiguous float32 (n, c, h, w) tensor."""
    t = np.ascontiguousarray(a, dtype=DTYPE)
    if t.ndim != 4:
        raise ShapeError(f"expected 4-d tensor (n, c, h, w), got {t.ndim}-d shape {t.shape}")
    return t


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return t


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a VALID-mode (never padded) grouped convolution."""

    kernel_h: int
    kernel_w: int
    stride: int
    groups: int
    out_channels: int

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "stride", "groups", "out_channels"):
            if getattr(self, name) < 1:
                raise ShapeError(f"ConvSpec.{name} must be positive, got {getattr(self, name)}")
        if self.out_channels % self.groups != 0:
            raise ShapeError(
                f"out_channels {self.out_channels} not divisible by groups {self.groups}"
            )

    def out_size(self, in_h: int, in_w: int) -> tuple[int, int]:
        return (
            valid_out_size(in_h, self.kernel_h, self.stride),
            valid_out_size(in_w, self.kernel_w, self.stride),
        )


def valid_out_size(in_size: int, kernel: int, stride: int) -> int:
    """VALID output dim: floor((in - kernel) / stride) + 1."""
    if kernel > in_size:
        raise ShapeError(f"kernel {kernel} larger than input {in_size}")
    return (in_size - kernel) // stride + 1


@dataclass
class ScoreMap:
    """2-D similarity grid plus the geometry needed to read displacements off it.

    ``stride_y``/``stride_x`` give the spacing between adjacent cells in source
    (crop) pixels. Cell (i, j) sits at displacement
    ((i - (h-1)/2) * stride_y, (j - (w-1)/2) * stride_x) from the map centre,
    which coincides with the centre of the scored search region.
    """

    values: np.ndarray
    stride_y: float
    stride_x: float

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f"ScoreMap values must be 2-d, got shape {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def cell_displacement(self, i: int, j: int) -> tuple[float, float]:
        """Displacement (dy, dx) of cell (i, j) from the map centre, in source pixels."""
        h, w = self.values.shape
        return ((i - (h - 1) / 2.0) * self.stride_y, (j - (w - 1) / 2.0) * self.stride_x)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec):
    n, c, h, w_in = x.shape
    oc, icg, kh, kw = w.shape
    if oc != spec.out_channels:
        raise ShapeError(f"weight out-channels {oc} != spec.out_channels {spec.out_channels}")
    if (kh, kw) != (spec.kernel_h, spec.kernel_w):
        raise ShapeError(f"weight kernel {kh}x{kw} != spec kernel {spec.kernel_h}x{spec.kernel_w}")
    if c % spec.groups != 0:
        raise ShapeError(f"input channels {c} not divisible by groups {spec.groups}")
    if c // spec.groups != icg:
        raise ShapeError(
            f"input channels per group {c // spec.groups} != weight in-channels {icg}"
        )
    if b.shape != (oc,):
        raise ShapeError(f"bias shape {b.shape} != ({oc},)")
    if h < kh or w_in < kw:
        raise ShapeError(f"spatial dims {h}x{w_in} smaller than kernel {kh}x{kw}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Unfold (n, c, h, w) into columns (n, c*kh*kw, oh*ow); channel-major rows.
    One strided copy per kernel offset, written directly in column order."""
    n, c, h, w = x.shape
    oh = valid_out_size(h, kh, stride)
    ow = valid_out_size(w, kw, stride)
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, oh: int, ow: int):
    """Scatter-add columns back to (n, c, h, w); inverse of _im2col's gather."""
    n, c, h, w = x_shape
    out = np.zeros((n, c, h, w), dtype=DTYPE)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[
                :, :, i, j
            ]
    return out


def conv2d(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec, method: str = "im2col"
) -> np.ndarray:
    """Grouped VALID cross-correlation of x (n,c,h,w) with w (oc, c/g, kh, kw).

    ``method`` selects the im2col fast path (default) or the direct-loop
    reference path; both compute the same quantity.
    """
    if method == "direct":
        x = np.ascontiguousarray(x, dtype=DTYPE)
        w = np.ascontiguousarray(w, dtype=DTYPE)
        b = np.ascontiguousarray(b, dtype=DTYPE).reshape(-1)
        _check_conv_shapes(x, w, b, spec)
        return conv2d_direct(x, w, b, spec)
    if method != "im2col":
        raise ValueError(f"unknown conv2d method {method!r}")
    out, _ = conv2d_with_cols(x, w, b, spec)
    return out


def conv2d_with_cols(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec):
    """im2col conv2d that also returns the unfolded columns, so a training
    forward pass can hand them back to conv2d_backward."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    w = np.ascontiguousarray(w, dtype=DTYPE)
    b = np.ascontiguousarray(b, dtype=DTYPE).reshape(-1)
    _check_conv_shapes(x, w, b, spec)
    n, c, _, _ = x.shape
    g = spec.groups
    oc, icg, kh, kw = w.shape
    ocg = oc // g
    cols, oh, ow = _im2col(x, kh, kw, spec.stride)
    w_mat = w.reshape(g, ocg, icg * kh * kw)
    out = np.matmul(w_mat[np.newaxis], cols.reshape(n, g, icg * kh * kw, oh * ow))
    out = out.reshape(n, oc, oh, ow)
    out += b.reshape(1, oc, 1, 1)
    return out, cols


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Reference convolution via explicit window loops; the built-in oracle for
    the im2col path. Slow; use on small shapes."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    w = np.ascontiguousarray(w, dtype=DTYPE)
    b = np.ascontiguousarray(b, dtype=DTYPE).reshape(-1)
    _check_conv_shapes(x, w, b, spec)
    n, c, h, w_in = x.shape
    oc, icg, kh, kw = w.shape
    g, s = spec.groups, spec.stride
    ocg = oc // g
    oh, ow = spec.out_size(h, w_in)
    out = np.empty((n, oc, oh, ow), dtype=DTYPE)
    for bi in range(n):
        for oci in range(oc):
            gi = oci // ocg
            xg = x[bi, gi * icg : (gi + 1) * icg]
            for i in range(oh):
                for j in range(ow):
                    window = xg[:, i * s : i * s + kh, j * s : j * s + kw]
                    out[bi, oci, i, j] = np.sum(window * w[oci], dtype=DTYPE) + b[oci]
    return out


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, spec: ConvSpec, grad: np.ndarray,
    need_input_grad: bool = True, cols: np.ndarray | None = None,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. (input, weights, bias) given upstream grad.
    With need_input_grad=False (first layer of a net) the input gradient is
    skipped and returned as None. ``cols`` may replay the forward pass's
    unfolded columns to avoid recomputing them."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    w = np.ascontiguousarray(w, dtype=DTYPE)
    grad = np.ascontiguousarray(grad, dtype=DTYPE)
    n, c, _, _ = x.shape
    g = spec.groups
    oc, icg, kh, kw = w.shape
    ocg = oc // g
    if cols is None:
        cols, oh, ow = _im2col(x, kh, kw, spec.stride)
    else:
        oh = valid_out_size(x.shape[2], kh, spec.stride)
        ow = valid_out_size(x.shape[3], kw, spec.stride)
    if grad.shape != (n, oc, oh, ow):
        raise ShapeError(f"upstream grad shape {grad.shape} != {(n, oc, oh, ow)}")

    cols = cols.reshape(n, g, icg * kh * kw, oh * ow)
    g_mat = grad.reshape(n, g, ocg, oh * ow)

    gb = grad.sum(axis=(0, 2, 3))
    gw = np.matmul(g_mat, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
    gx = None
    if need_input_grad:
        w_mat = w.reshape(g, ocg, icg * kh * kw)
        gcols = np.matmul(w_mat.transpose(0, 2, 1)[np.newaxis], g_mat)
        gx = _col2im(
            gcols.reshape(n, c * kh * kw, oh * ow), x.shape, kh, kw, spec.stride, oh, ow
        )
    return gx, gw.astype(DTYPE, copy=False), gb.astype(DTYPE, copy=False)


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------


def maxpool2d(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    """VALID max pooling over size x size windows."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape
    if size > h or size > w:
        raise ShapeError(f"pool window {size} larger than input {h}x{w}")
    windows = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(windows.max(axis=(4, 5)))


def maxpool2d_backward(x: np.ndarray, size: int, stride: int, grad: np.ndarray) -> np.ndarray:
    """Route upstream grad to each window's max; ties go to the first
    (row-major) occurrence within the window."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    grad = np.ascontiguousarray(grad, dtype=DTYPE)
    n, c, h, w = x.shape
    windows = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    if grad.shape != (n, c, oh, ow):
        raise ShapeError(f"upstream grad shape {grad.shape} != {(n, c, oh, ow)}")
    flat = windows.reshape(n, c, oh, ow, size * size)
    amax = flat.argmax(axis=4)  # first occurrence on ties (row-major in-window)
    gx = np.zeros_like(x)
    for k in range(size * size):
        i, j = divmod(k, size)
        contrib = np.where(amax == k, grad, 0.0).astype(DTYPE)
        gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += contrib
    return gx


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(DTYPE, copy=False)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad, 0).astype(DTYPE, copy=False)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batchnorm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> np.ndarray:
    """Per-channel normalization over (batch, h, w).

    Train mode normalizes with batch statistics and updates running stats in
    place by EMA (running var uses the unbiased batch variance). Infer mode
    normalizes with the provided running stats and never mutates them.
    """
    x = np.ascontiguousarray(x, dtype=DTYPE)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm params shaped {gamma.shape}/{beta.shape}, expected ({c},)")
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError(f"train-mode batchnorm needs batch*h*w >= 2 per channel, got {m}")
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.var(axis=(0, 2, 3), dtype=np.float64)
        running_mean *= 1.0 - momentum
        running_mean += (momentum * mean).astype(DTYPE)
        running_var *= 1.0 - momentum
        running_var += (momentum * var * m / (m - 1)).astype(DTYPE)
    elif mode == "infer":
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    else:
        raise ValueError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    scale = (gamma * inv).astype(DTYPE)
    shift = (beta - gamma * mean * inv).astype(DTYPE)
    return x * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)


def batchnorm_backward(
    x: np.ndarray, gamma: np.ndarray, grad: np.ndarray, eps: float = BN_EPS
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Train-mode gradients (full batch-statistics chain) w.r.t. input, gamma,
    beta. Batch mean/var are recomputed from the saved input."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    grad = np.ascontiguousarray(grad, dtype=DTYPE)
    n, c, h, w = x.shape
    m = n * h * w
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64).reshape(1, c, 1, 1)
    var = x.var(axis=(0, 2, 3), dtype=np.float64).reshape(1, c, 1, 1)
    inv = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = ((x - mean) * inv).astype(DTYPE)

    dgamma = (grad * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
    dbeta = grad.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
    g_mean = (grad.mean(axis=(0, 2, 3), dtype=np.float64)).astype(DTYPE).reshape(1, c, 1, 1)
    gx_mean = (
        ((grad * xhat).mean(axis=(0, 2, 3), dtype=np.float64)).astype(DTYPE).reshape(1, c, 1, 1)
    )
    gx = gamma.reshape(1, c, 1, 1) * inv * (grad - g_mean - xhat * gx_mean)
    return gx.astype(DTYPE, copy=False), dgamma, dbeta


# ---------------------------------------------------------------------------
# cross-correlation scoring layer
# ---------------------------------------------------------------------------


def _check_xcorr_shapes(z: np.ndarray, x: np.ndarray):
    if z.ndim != 4 or x.ndim != 4:
        raise ShapeError(f"xcorr expects 4-d tensors, got {z.shape} and {x.shape}")
    if z.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: exemplar {z.shape[1]} vs search {x.shape[1]}")
    if z.shape[2] > x.shape[2] or z.shape[3] > x.shape[3]:
        raise ShapeError(
            f"exemplar {z.shape[2]}x{z.shape[3]} larger than search {x.shape[2]}x{x.shape[3]}"
        )
    if z.shape[0] not in (1, x.shape[0]):
        raise ShapeError(f"batch mismatch: exemplar {z.shape[0]} vs search {x.shape[0]}")


def xcorr(z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Dense sliding-window inner products of exemplar features against search
    features: output (n, 1, hx-hz+1, wx-wz+1), each cell the full-channel inner
    product of z with the co-located sub-window of x. A batch-1 exemplar
    broadcasts over a batched search."""
    z = np.ascontiguousarray(z, dtype=DTYPE)
    x = np.ascontiguousarray(x, dtype=DTYPE)
    _check_xcorr_shapes(z, x)
    n = x.shape[0]
    _, c, hz, wz = z.shape
    cols, oh, ow = _im2col(x, hz, wz, 1)  # (n, c*hz*wz, oh*ow)
    zmat = z.reshape(z.shape[0], 1, c * hz * wz)
    out = np.matmul(zmat, cols)  # broadcasts z batch 1 over n
    return out.reshape(n, 1, oh, ow)


def xcorr_backward(
    z: np.ndarray, x: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of xcorr w.r.t. both feature inputs.

    d/dz is the correlation of the search features with the upstream grad; d/dx
    scatters grad-weighted copies of the exemplar over the search support. A
    broadcast exemplar (batch 1 vs batched search) accumulates over the batch.
    """
    z = np.ascontiguousarray(z, dtype=DTYPE)
    x = np.ascontiguousarray(x, dtype=DTYPE)
    grad = np.ascontiguousarray(grad, dtype=DTYPE)
    _check_xcorr_shapes(z, x)
    n, c, hx, wx = x.shape
    _, _, hz, wz = z.shape
    oh, ow = hx - hz + 1, wx - wz + 1
    if grad.shape != (n, 1, oh, ow):
        raise ShapeError(f"upstream grad shape {grad.shape} != {(n, 1, oh, ow)}")

    # gz[n,c,p,q] = sum_ij grad[n,0,i,j] * x[n,c,i+p,j+q]: correlate x with grad.
    windows = sliding_window_view(x, (oh, ow), axis=(2, 3))  # (n, c, hz, wz, oh, ow)
    gz = np.einsum("ncpqij,nij->ncpq", windows, grad[:, 0], optimize=True).astype(DTYPE)
    if z.shape[0] == 1 and n > 1:
        gz = gz.sum(axis=0, keepdims=True)

    # gx = full convolution of grad with z: scatter z at every grad location.
    cols_grad = np.matmul(
        z.reshape(z.shape[0], c * hz * wz, 1), grad.reshape(n, 1, oh * ow)
    )  # (n, c*hz*wz, oh*ow), broadcasting z batch 1
    gx = _col2im(cols_grad, x.shape, hz, wz, 1, oh, ow)
    return gz, gx


# ---------------------------------------------------------------------------
# bicubic upsampling
# ---------------------------------------------------------------------------


def _keys_kernel(t: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    at = np.abs(t)
    out = np.zeros_like(at)
    near = at <= 1
    mid = (at > 1) & (at < 2)
    out[near] = (a + 2) * at[near] ** 3 - (a + 3) * at[near] ** 2 + 1
    out[mid] = a * at[mid] ** 3 - 5 * a * at[mid] ** 2 + 8 * a * at[mid] - 4 * a
    return out


def _bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) 1-D interpolation operator; pixel-centre mapping
    src = (dst + 0.5) * n_in / n_out - 0.5, borders edge-clamped."""
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for tap in range(-1, 3):
        idx = np.clip(base + tap, 0, n_in - 1)
        wgt = _keys_kernel(frac - tap)
        np.add.at(mat, (dst.astype(np.int64), idx), wgt)
    return mat


def bicubic_upsample(score_map: ScoreMap, out_h: int, out_w: int) -> ScoreMap:
    """Keys-cubic upsampling of a score map; stride metadata rescales by
    in/out so cell displacements keep their source-pixel meaning."""
    in_h, in_w = score_map.values.shape
    if out_h < in_h or out_w < in_w:
        raise ShapeError(
            f"bicubic_upsample cannot downscale: {in_h}x{in_w} -> {out_h}x{out_w}"
        )
    wy = _bicubic_matrix(in_h, out_h)
    wx = _bicubic_matrix(in_w, out_w)
    values = wy @ score_map.values.astype(np.float64) @ wx.T
    return ScoreMap(
        values=values.astype(DTYPE),
        stride_y=score_map.stride_y * in_h / out_h,
        stride_x=score_map.stride_x * in_w / out_w,
    )


# ---------------------------------------------------------------------------
# cosine window
# ---------------------------------------------------------------------------


def cosine_window(h: int, w: int) -> np.ndarray:
    """Outer product of 1-D Hann windows, normalized to sum 1."""
    if h < 1 or w < 1:
        raise ShapeError(f"cosine_window dims must be >= 1, got {h}x{w}")
    win = np.outer(np.hanning(h), np.hanning(w))
    total = win.sum()
    if total <= 0:  # hanning(2) is all-zero; fall back to uniform mass
        return np.full((h, w), 1.0 / (h * w))
    return win / total
