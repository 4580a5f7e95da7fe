"""Dense numeric kernels shared by every layer in the package.

Everything here is plain numpy in double precision, written so that a
scalar-loop re-implementation produces the same numbers to ~1e-9 or better.
Conventions used throughout the package:

  * image / feature grids are ``(H, W, C)`` float64 arrays
  * token matrices are ``(N, D)`` with tokens in row-major grid order
  * sampling coordinates are normalized ``(x, y)`` in ``[0, 1]^2`` with pixel
    centers at ``((j + 0.5) / W, (i + 0.5) / H)`` (align-corners = false)
  * ``bilinear_resize`` clamps at the border (constant maps stay constant);
    ``bilinear_sample`` zero-pads out-of-bounds contributions
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)


@dataclass(frozen=True)
class FeatureMap:
    """Tokens of one branch plus the grid geometry they were lifted from.

    tokens: [grid_h * grid_w, dim], row-major over the grid.
    """

    grid_h: int
    grid_w: int
    dim: int
    branch_id: int
    tokens: np.ndarray

    def __post_init__(self) -> None:
        if self.tokens.shape != (self.grid_h * self.grid_w, self.dim):
            raise ValueError(
                f"FeatureMap tokens shape {self.tokens.shape} does not match "
                f"grid {self.grid_h}x{self.grid_w} with dim {self.dim}"
            )

    def as_grid(self) -> np.ndarray:
        """Return the tokens reshaped to [grid_h, grid_w, dim]."""
        return self.tokens.reshape(self.grid_h, self.grid_w, self.dim)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """x: [..., d_in], weight: [d_in, d_out], bias: [d_out] -> [..., d_out]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def layer_norm(
    x: np.ndarray,
    gain: np.ndarray | None = None,
    shift: np.ndarray | None = None,
    eps: float = 1e-6,
) -> np.ndarray:
    """Normalize over the last axis; biased variance, then affine."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    out = (x - mu) / np.sqrt(var + eps)
    if gain is not None:
        out = out * gain
    if shift is not None:
        out = out + shift
    return out


def group_norm(
    x: np.ndarray,
    groups: int,
    gain: np.ndarray | None = None,
    shift: np.ndarray | None = None,
    eps: float = 1e-6,
) -> np.ndarray:
    """Channel-group normalization of a [H, W, C] map.

    Statistics are taken per group over all spatial positions and the group's
    channels, the standard convention for convolutional feature maps.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    if c % groups != 0:
        raise ValueError(f"group_norm: channels {c} not divisible by groups {groups}")
    g = x.reshape(h, w, groups, c // groups)
    mu = g.mean(axis=(0, 1, 3), keepdims=True)
    var = np.mean((g - mu) ** 2, axis=(0, 1, 3), keepdims=True)
    out = ((g - mu) / np.sqrt(var + eps)).reshape(h, w, c)
    if gain is not None:
        out = out * gain
    if shift is not None:
        out = out + shift
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax; safe for large magnitudes."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-error-function form: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a [H, W, C] map with pixel-center alignment and edge clamping.

    Same-size resize is an exact copy; constant maps stay exactly constant.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w, _ = img.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: bad output size {out_h}x{out_w}")
    # Continuous source coordinates of each output pixel center.
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5  # [out_h]
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5  # [out_w]
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    ty = ys - y0
    tx = xs - x0
    y0c = np.clip(y0, 0, h - 1).astype(np.int64)
    y1c = np.clip(y0 + 1, 0, h - 1).astype(np.int64)
    x0c = np.clip(x0, 0, w - 1).astype(np.int64)
    x1c = np.clip(x0 + 1, 0, w - 1).astype(np.int64)
    ty = ty[:, None, None]
    tx = tx[None, :, None]
    # Lerp form a + t*(b - a): exact for t == 0 and for constant maps.
    r00 = img[y0c][:, x0c]  # [out_h, out_w, C]
    r01 = img[y0c][:, x1c]
    r10 = img[y1c][:, x0c]
    r11 = img[y1c][:, x1c]
    top = r00 + tx * (r01 - r00)
    bot = r10 + tx * (r11 - r10)
    return top + ty * (bot - top)


def bilinear_sample(img: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample a [H, W, C] map at normalized (x, y) points, zero-padded.

    points: [N, 2]. A point exactly on a cell center returns that cell's
    stored values; contributions from outside the map are zero.
    """
    img = np.asarray(img, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    h, w, c = img.shape
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"bilinear_sample: points must be [N, 2], got {points.shape}")
    xp = points[:, 0] * w - 0.5  # continuous pixel-space coords
    yp = points[:, 1] * h - 0.5
    x0 = np.floor(xp)
    y0 = np.floor(yp)
    tx = xp - x0
    ty = yp - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    def corner(yi: np.ndarray, xi: np.ndarray) -> np.ndarray:
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = np.zeros((points.shape[0], c), dtype=np.float64)
        if np.any(inside):
            vals[inside] = img[yi[inside], xi[inside]]
        return vals

    v00 = corner(y0, x0)
    v01 = corner(y0, x0 + 1)
    v10 = corner(y0 + 1, x0)
    v11 = corner(y0 + 1, x0 + 1)
    tx = tx[:, None]
    ty = ty[:, None]
    return (
        v00 * (1.0 - tx) * (1.0 - ty)
        + v01 * tx * (1.0 - ty)
        + v10 * (1.0 - tx) * ty
        + v11 * tx * ty
    )


def conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Cross-correlate a [H, W, Cin] map with a [kh, kw, Cin, Cout] kernel."""
    x = np.asarray(x, dtype=np.float64)
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d: kernel expects {kcin} input channels, map has {cin}")
    cols, out_h, out_w = im2col(x, kh, kw, stride, padding)
    out = cols @ kernel.reshape(kh * kw * cin, cout)  # [out_h*out_w, Cout]
    if bias is not None:
        out = out + bias
    return out.reshape(out_h, out_w, cout)


def depthwise_conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Per-channel convolution with same-size output (stride 1, pad k//2).

    x: [H, W, C], kernel: [kh, kw, C].
    """
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    kh, kw, kc = kernel.shape
    if kc != c:
        raise ValueError(f"depthwise_conv: kernel has {kc} channels, map has {c}")
    cols, out_h, out_w = im2col(x, kh, kw, 1, kh // 2)
    cols = cols.reshape(out_h * out_w, kh * kw, c)
    out = np.einsum("nkc,kc->nc", cols, kernel.reshape(kh * kw, c))
    if bias is not None:
        out = out + bias
    return out.reshape(out_h, out_w, c)


def im2col(
    x: np.ndarray, kh: int, kw: int, stride: int, padding: int
) -> tuple[np.ndarray, int, int]:
    """Unfold a [H, W, C] map into patch rows [out_h*out_w, kh*kw*C]."""
    h, w, c = x.shape
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(f"im2col: kernel {kh}x{kw} larger than padded map {h}x{w}")
    padded = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    rows, cols_idx = _im2col_indices(h, w, kh, kw, stride, padding)
    cols = padded[rows, cols_idx]  # [out_h*out_w, kh*kw, C]
    return cols.reshape(out_h * out_w, kh * kw * c), out_h, out_w


def _im2col_indices(
    h: int, w: int, kh: int, kw: int, stride: int, padding: int
) -> tuple[np.ndarray, np.ndarray]:
    """Row/col gather indices into the padded map, shape [n_out, kh*kw]."""
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    base_y = (np.arange(out_h) * stride)[:, None, None, None]  # [out_h,1,1,1]
    base_x = (np.arange(out_w) * stride)[None, :, None, None]  # [1,out_w,1,1]
    off_y = np.arange(kh)[None, None, :, None]  # [1,1,kh,1]
    off_x = np.arange(kw)[None, None, None, :]  # [1,1,1,kw]
    rows = np.broadcast_to(base_y + off_y, (out_h, out_w, kh, kw))
    cols = np.broadcast_to(base_x + off_x, (out_h, out_w, kh, kw))
    return (
        rows.reshape(out_h * out_w, kh * kw),
        cols.reshape(out_h * out_w, kh * kw),
    )


def reference_points(grid_h: int, grid_w: int) -> np.ndarray:
    """Normalized token-center coordinates of a grid, row-major [N, 2] (x, y)."""
    if grid_h < 1 or grid_w < 1:
        raise ValueError(f"reference_points: bad grid {grid_h}x{grid_w}")
    xs = (np.arange(grid_w, dtype=np.float64) + 0.5) / grid_w
    ys = (np.arange(grid_h, dtype=np.float64) + 0.5) / grid_h
    gx, gy = np.meshgrid(xs, ys)  # row-major: y varies over rows
    return np.stack([gx.ravel(), gy.ravel()], axis=1)
