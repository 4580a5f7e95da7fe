"""Reverse-mode automatic differentiation over numpy arrays.

A tiny tape: each ``Var`` records its parents and a vector-Jacobian-product
closure. Forward values are produced by the kernels in :mod:`piip.primitives`
wherever one exists, so the differentiable path and the plain-numpy path
compute identical numbers. Backward passes are hand-written per op and are
validated end-to-end by finite differences in the test-suite/harness.

All values are float64. Gradients only flow into subgraphs that contain a
leaf created with ``needs_grad=True``; everything else is treated as a
constant.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import primitives as prim

Array = np.ndarray


class Var:
    """A node in the computation graph: a value plus how to backprop it."""

    __slots__ = ("value", "grad", "parents", "vjp", "needs_grad")

    def __init__(
        self,
        value: Array,
        parents: tuple["Var", ...] = (),
        vjp: Callable[[Array], Sequence[Array | None]] | None = None,
        needs_grad: bool = False,
    ) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Array | None = None
        self.parents = parents
        self.vjp = vjp
        self.needs_grad = needs_grad or any(p.needs_grad for p in parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def leaf(value: Array, needs_grad: bool = False) -> Var:
    return Var(value, needs_grad=needs_grad)


def as_var(x: "Var | Array | float") -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar ``root`` into every needs-grad leaf."""
    if root.value.size != 1:
        raise ValueError(f"backward expects a scalar root, got shape {root.shape}")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.needs_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if g is None or not parent.needs_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to ``shape`` (the reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(a: Var, s: float) -> Var:
    return Var(a.value * s, (a,), lambda g: (g * s,))


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    old = a.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Var, axes: tuple[int, ...]) -> Var:
    axes = tuple(ax % a.value.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return Var(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim > 2 and bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ {av.shape} @ {bv.shape}")

    def vjp(g: Array) -> tuple[Array, Array]:
        ga = g @ bv.swapaxes(-1, -2)
        gb = av.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Var(av @ bv, (a, b), vjp)


def take_index(a: Var, index: int, axis: int) -> Var:
    """Select one slice along ``axis`` (an integer index, dim removed)."""
    sel: tuple = (slice(None),) * axis + (index,)

    def vjp(g: Array) -> tuple[Array]:
        out = np.zeros_like(a.value)
        out[sel] = g
        return (out,)

    return Var(a.value[sel], (a,), vjp)


def slice_last(a: Var, start: int, stop: int) -> Var:
    def vjp(g: Array) -> tuple[Array]:
        out = np.zeros_like(a.value)
        out[..., start:stop] = g
        return (out,)

    return Var(a.value[..., start:stop], (a,), vjp)


def concat_last(parts: Sequence[Var]) -> Var:
    sizes = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Array) -> tuple[Array, ...]:
        return tuple(g[..., offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return Var(np.concatenate([p.value for p in parts], axis=-1), tuple(parts), vjp)


def pad_grid(a: Var, pad_h: int, pad_w: int) -> Var:
    """Zero-pad a [H, W, C] map on the bottom/right edges."""
    h, w, _ = a.shape

    def vjp(g: Array) -> tuple[Array]:
        return (g[:h, :w, :],)

    return Var(np.pad(a.value, ((0, pad_h), (0, pad_w), (0, 0))), (a,), vjp)


def crop_grid(a: Var, out_h: int, out_w: int) -> Var:
    """Keep the top-left [out_h, out_w] corner of a [H, W, C] map."""

    def vjp(g: Array) -> tuple[Array]:
        out = np.zeros_like(a.value)
        out[:out_h, :out_w, :] = g
        return (out,)

    return Var(a.value[:out_h, :out_w, :], (a,), vjp)


def sum_op(a: Var, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Var:
    def vjp(g: Array) -> tuple[Array]:
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g
        if not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean_op(a: Var, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Var:
    if axis is None:
        n = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_op(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities / normalizers
# ---------------------------------------------------------------------------


def softmax_op(a: Var) -> Var:
    y = prim.softmax(a.value, axis=-1)

    def vjp(g: Array) -> tuple[Array]:
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    return Var(y, (a,), vjp)


def gelu_op(a: Var) -> Var:
    x = a.value
    y = prim.gelu(x)

    def vjp(g: Array) -> tuple[Array]:
        cdf = 0.5 * (1.0 + erf(x * prim._INV_SQRT2))
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return Var(y, (a,), vjp)


def layer_norm_op(x: Var, gain: Var, shift: Var, eps: float = 1e-6) -> Var:
    # Forward arithmetic mirrors primitives.layer_norm exactly (same op order).
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    var = np.mean((xv - mu) ** 2, axis=-1, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = (xv - mu) / s
    inv = 1.0 / s
    n = xv.shape[-1]
    out = xhat * gain.value + shift.value

    def vjp(g: Array) -> tuple[Array, Array, Array]:
        dxhat = g * gain.value
        dx = (
            inv
            / n
            * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Var(out, (x, gain, shift), vjp)


def group_norm_op(x: Var, groups: int, gain: Var, shift: Var, eps: float = 1e-6) -> Var:
    """GroupNorm of a [H, W, C] map (statistics per group over H, W, C/G)."""
    xv = x.value
    h, w, c = xv.shape
    cg = c // groups
    gview = xv.reshape(h, w, groups, cg)
    mu = gview.mean(axis=(0, 1, 3), keepdims=True)
    var = np.mean((gview - mu) ** 2, axis=(0, 1, 3), keepdims=True)
    s = np.sqrt(var + eps)
    xhat = (gview - mu) / s
    inv = 1.0 / s
    n = h * w * cg
    out = xhat.reshape(h, w, c) * gain.value + shift.value

    def vjp(g: Array) -> tuple[Array, Array, Array]:
        dxhat = (g * gain.value).reshape(h, w, groups, cg)
        red = (0, 1, 3)
        dx = (
            inv
            / n
            * (
                n * dxhat
                - dxhat.sum(axis=red, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=red, keepdims=True)
            )
        ).reshape(h, w, c)
        xh = xhat.reshape(h, w, c)
        return dx, (g * xh).sum(axis=(0, 1)), g.sum(axis=(0, 1))

    return Var(out, (x, gain, shift), vjp)


def linear_op(x: Var, weight: Var, bias: Var | None = None) -> Var:
    """x: [..., d_in] times weight [d_in, d_out] plus bias."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def cross_entropy_op(logits: Var, label: int) -> Var:
    lv = logits.value
    m = lv.max()
    lse = m + np.log(np.sum(np.exp(lv - m)))
    probs = np.exp(lv - lse)

    def vjp(g: Array) -> tuple[Array]:
        d = probs.copy()
        d[label] -= 1.0
        return (d * g,)

    return Var(np.asarray(lse - lv[label]), (logits,), vjp)


# ---------------------------------------------------------------------------
# convolution / resampling
# ---------------------------------------------------------------------------


def conv2d_op(
    x: Var, kernel: Var, bias: Var | None, stride: int = 1, padding: int = 0
) -> Var:
    xv = x.value
    h, w, cin = xv.shape
    kh, kw, _, cout = kernel.shape
    cols, out_h, out_w = prim.im2col(xv, kh, kw, stride, padding)  # [n, kh*kw*cin]
    out = cols @ kernel.value.reshape(kh * kw * cin, cout)
    if bias is not None:
        out = out + bias.value
    rows_idx, cols_idx = prim._im2col_indices(h, w, kh, kw, stride, padding)

    def vjp(g: Array) -> tuple[Array, Array, Array | None]:
        gf = g.reshape(out_h * out_w, cout)
        dkernel = (cols.T @ gf).reshape(kernel.shape)
        dcols = (gf @ kernel.value.reshape(kh * kw * cin, cout).T).reshape(
            out_h * out_w, kh * kw, cin
        )
        dpad = np.zeros((h + 2 * padding, w + 2 * padding, cin))
        np.add.at(dpad, (rows_idx, cols_idx), dcols)
        dx = dpad[padding : padding + h, padding : padding + w, :]
        db = gf.sum(axis=0) if bias is not None else None
        return dx, dkernel, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    if bias is None:
        return Var(out.reshape(out_h, out_w, cout), parents, lambda g: vjp(g)[:2])
    return Var(out.reshape(out_h, out_w, cout), parents, vjp)


def depthwise_conv_op(x: Var, kernel: Var, bias: Var | None = None) -> Var:
    xv = x.value
    h, w, c = xv.shape
    kh, kw, _ = kernel.shape
    pad = kh // 2
    cols, out_h, out_w = prim.im2col(xv, kh, kw, 1, pad)
    cols = cols.reshape(out_h * out_w, kh * kw, c)
    kflat = kernel.value.reshape(kh * kw, c)
    out = np.einsum("nkc,kc->nc", cols, kflat)
    if bias is not None:
        out = out + bias.value
    rows_idx, cols_idx = prim._im2col_indices(h, w, kh, kw, 1, pad)

    def vjp(g: Array) -> tuple[Array, Array, Array | None]:
        gf = g.reshape(out_h * out_w, c)
        dkernel = np.einsum("nkc,nc->kc", cols, gf).reshape(kernel.shape)
        dcols = np.einsum("kc,nc->nkc", kflat, gf)
        dpad = np.zeros((h + 2 * pad, w + 2 * pad, c))
        np.add.at(dpad, (rows_idx, cols_idx), dcols)
        dx = dpad[pad : pad + h, pad : pad + w, :]
        db = gf.sum(axis=0) if bias is not None else None
        return dx, dkernel, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    if bias is None:
        return Var(out.reshape(out_h, out_w, c), parents, lambda g: vjp(g)[:2])
    return Var(out.reshape(out_h, out_w, c), parents, vjp)


def bilinear_resize_op(img: Var, out_h: int, out_w: int) -> Var:
    iv = img.value
    h, w, c = iv.shape
    out = prim.bilinear_resize(iv, out_h, out_w)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    y0c = np.clip(y0, 0, h - 1).astype(np.int64)[:, None]
    y1c = np.clip(y0 + 1, 0, h - 1).astype(np.int64)[:, None]
    x0c = np.clip(x0, 0, w - 1).astype(np.int64)[None, :]
    x1c = np.clip(x0 + 1, 0, w - 1).astype(np.int64)[None, :]

    def vjp(g: Array) -> tuple[Array]:
        dimg = np.zeros_like(iv)
        w00 = ((1 - ty) * (1 - tx))[..., None] * g
        w01 = ((1 - ty) * tx)[..., None] * g
        w10 = (ty * (1 - tx))[..., None] * g
        w11 = (ty * tx)[..., None] * g
        yb0 = np.broadcast_to(y0c, (out_h, out_w))
        yb1 = np.broadcast_to(y1c, (out_h, out_w))
        xb0 = np.broadcast_to(x0c, (out_h, out_w))
        xb1 = np.broadcast_to(x1c, (out_h, out_w))
        np.add.at(dimg, (yb0, xb0), w00)
        np.add.at(dimg, (yb0, xb1), w01)
        np.add.at(dimg, (yb1, xb0), w10)
        np.add.at(dimg, (yb1, xb1), w11)
        return (dimg,)

    return Var(out, (img,), vjp)


def bilinear_sample_op(img: Var, points: Var) -> Var:
    """Differentiable zero-padded sampling; grads flow to map and coords."""
    iv = img.value
    pv = points.value
    h, w, c = iv.shape
    out = prim.bilinear_sample(iv, pv)
    xp = pv[:, 0] * w - 0.5
    yp = pv[:, 1] * h - 0.5
    x0 = np.floor(xp).astype(np.int64)
    y0 = np.floor(yp).astype(np.int64)
    tx = (xp - np.floor(xp))[:, None]
    ty = (yp - np.floor(yp))[:, None]

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            yi = y0 + dy
            xi = x0 + dx
            inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = np.zeros((pv.shape[0], c))
            if np.any(inside):
                vals[inside] = iv[yi[inside], xi[inside]]
            corners.append((yi, xi, inside, vals))
    (v00_y, v00_x, m00, v00), (v01_y, v01_x, m01, v01) = corners[0], corners[1]
    (v10_y, v10_x, m10, v10), (v11_y, v11_x, m11, v11) = corners[2], corners[3]
    weights = [
        (1 - tx) * (1 - ty),
        tx * (1 - ty),
        (1 - tx) * ty,
        tx * ty,
    ]

    def vjp(g: Array) -> tuple[Array, Array]:
        dimg = np.zeros_like(iv)
        for (yi, xi, inside, _), wgt in zip(corners, weights):
            contrib = wgt * g
            if np.any(inside):
                np.add.at(dimg, (yi[inside], xi[inside]), contrib[inside])
        # d out / d tx and d out / d ty with out-of-bounds values already zero
        d_dtx = (v01 - v00) * (1 - ty) + (v11 - v10) * ty
        d_dty = (v10 - v00) * (1 - tx) + (v11 - v01) * tx
        dpts = np.empty_like(pv)
        dpts[:, 0] = (g * d_dtx).sum(axis=1) * w
        dpts[:, 1] = (g * d_dty).sum(axis=1) * h
        return dimg, dpts

    return Var(out, (img, points), vjp)
