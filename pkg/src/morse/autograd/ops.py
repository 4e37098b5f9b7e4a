"""Differentiable operations over :class:`Tensor`.

Every op computes its forward result with numpy, then hands a closure that
maps the output gradient to input gradients over to :func:`record`. Spatial
ops use an explicit leading batch axis ``[B, C, H, W]``; most also accept an
unbatched ``[C, H, W]`` input.
"""
from __future__ import annotations

import functools
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return record(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return record(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return record(out, (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return record(out, (a,), lambda g: (g * (out > 0),), "relu")


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


# ----------------------------------------------------------------------
# shape and reductions
# ----------------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record(np.array(a.data[index]), (a,), bw, "getitem")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if bd.ndim > 1 else np.multiply.outer(g, bd)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if ad.ndim > 1 else np.multiply.outer(ad, g)
        return ga, gb

    return record(ad @ bd, (a, b), bw, "matmul")


# ----------------------------------------------------------------------
# softmax family
# ----------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``.

    ``mask`` (boolean, broadcastable to ``x``) restricts normalisation to the
    true entries; masked-out positions come out exactly zero. An all-true
    mask takes the unmasked code path so results are bit-identical.
    """
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax mask leaves an empty slice along the softmax axis")
        if mask.all():
            mask = None
    if mask is None:
        z = xd - xd.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        z = np.where(mask, xd, -np.inf)
        z = xd - z.max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, z, 0)), 0).astype(xd.dtype, copy=False)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), bw, "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray, axis: int = 1, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` against ``logits`` along ``axis``.

    ``labels`` has the shape of ``logits`` with ``axis`` removed.
    """
    xd = logits.data
    k = xd.shape[axis]
    labels = np.asarray(labels)
    axis = axis % xd.ndim
    if labels.shape != xd.shape[:axis] + xd.shape[axis + 1 :]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {xd.shape} without axis {axis}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    logp = z - lse
    lab = np.expand_dims(labels.astype(np.intp), axis)
    picked = -np.take_along_axis(logp, lab, axis=axis)
    n = max(labels.size, 1)
    scale = 1.0 / n if reduction == "mean" else 1.0
    value = np.asarray(picked.sum() * scale, dtype=xd.dtype)

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, lab, np.take_along_axis(grad, lab, axis=axis) - 1.0, axis=axis)
        return (grad * (g * scale),)

    return record(value, (logits,), bw, "cross_entropy")


# ----------------------------------------------------------------------
# dense layers
# ----------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Channels-first affine map: ``x[..., C, N] -> w @ x + b[:, None]``."""
    xd, wd = x.data, w.data
    if xd.shape[-2] != wd.shape[1]:
        raise ValueError(f"linear: channel axis has {xd.shape[-2]} features, weight expects {wd.shape[1]}")
    out = wd @ xd
    if b is not None:
        out = out + b.data[:, None]

    def bw(g):
        gx = wd.T @ g if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = g @ np.swapaxes(xd, -1, -2)
            if gw.ndim > 2:
                gw = gw.reshape(-1, *gw.shape[-2:]).sum(axis=0)
        if b is None:
            return gx, gw
        gb = g.sum(axis=-1)
        if gb.ndim > 1:
            gb = gb.reshape(-1, gb.shape[-1]).sum(axis=0)
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bw, "linear")


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected [B,C,H,W] or [C,H,W], got shape {x.shape}")
    return x, False


def _shift_sum(y: np.ndarray, k: int, Wp: int, P: int) -> np.ndarray:
    """``sum_ij y[:, i, j, :, off_ij : off_ij + P]`` for ``y`` of shape ``[B, k, k, C, L]``."""
    acc = y[:, 0, 0, :, :P].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                off = i * Wp + j
                acc += y[:, i, j, :, off : off + P]
    return acc


def _im2col(xf: np.ndarray, k: int, Wp: int, P: int) -> np.ndarray:
    B, C = xf.shape[:2]
    cols = np.empty((B, k, k, C, P), dtype=xf.dtype)
    for i in range(k):
        for j in range(k):
            off = i * Wp + j
            cols[:, i, j] = xf[:, :, off : off + P]
    return cols.reshape(B, k * k * C, P)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Zero-padded 'same' 2-D convolution (cross-correlation), odd square kernels.

    Each kernel tap is a contiguous slice of the padded, row-flattened image.
    Whichever side has fewer channels is expanded ``k*k`` times: widening
    layers gather an im2col matrix from the input, narrowing layers compute
    every tap's response in one matmul and shift-add the outputs. The input
    gradient makes the same choice with the roles of ``C`` and ``O`` swapped.
    """
    x, squeezed = _batched(x)
    xd, wd = x.data, w.data
    B, C, H, W = xd.shape
    O, Cw, kh, kw = wd.shape
    if Cw != C:
        raise ValueError(f"conv2d: input channel axis (1) has {C}, weight axis 1 expects {Cw}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be odd and square, got {kh}x{kw}")
    if b is not None and b.shape != (O,):
        raise ValueError(f"conv2d: bias axis 0 has {b.shape}, expected ({O},)")
    k, p = kh, kh // 2
    Wp = W + 2 * p
    P = H * Wp
    padded_len = (H + 2 * p + 1) * Wp
    xp = np.zeros((B, C, H + 2 * p + 1, Wp), dtype=xd.dtype)
    xp[:, :, p : p + H, p : p + W] = xd
    xf = xp.reshape(B, C, padded_len)
    cols = None
    if O < C:
        ws = wd.transpose(2, 3, 0, 1).reshape(k * k * O, C)
        y = (ws @ xf).reshape(B, k, k, O, padded_len)
        out = _shift_sum(y, k, Wp, P).reshape(B, O, H, Wp)[..., :W]
    else:
        cols = _im2col(xf, k, Wp, P)
        wm = wd.transpose(0, 2, 3, 1).reshape(O, k * k * C)
        out = (wm @ cols).reshape(B, O, H, Wp)[..., :W]
    if b is not None:
        out = out + b.data[:, None, None]
    else:
        out = np.ascontiguousarray(out)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            if C <= O:
                # every tap's transposed response, shift-added into the padded input
                wm_t = wd.transpose(2, 3, 1, 0).reshape(k * k * C, O)
                gp = np.zeros((B, O, H, Wp), dtype=g.dtype)
                gp[..., :W] = g
                yg = (wm_t @ gp.reshape(B, O, P)).reshape(B, k, k, C, P)
                acc = np.zeros((B, C, padded_len), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        off = i * Wp + j
                        acc[:, :, off : off + P] += yg[:, i, j]
                gx = acc.reshape(B, C, H + 2 * p + 1, Wp)[:, :, p : p + H, p : p + W].copy()
            else:
                wflip = wd[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(C, k * k * O)
                gq = np.zeros((B, O, H + 2 * p + 1, Wp), dtype=g.dtype)
                gq[:, :, p : p + H, p : p + W] = g
                gcols = _im2col(gq.reshape(B, O, padded_len), k, Wp, P)
                gx = (wflip @ gcols).reshape(B, C, H, Wp)[..., :W].copy()
        if w.requires_grad:
            gp = np.zeros((B, O, H, Wp), dtype=g.dtype)
            gp[..., :W] = g
            gf = gp.reshape(B, O, P)
            if cols is not None:
                gwm = np.einsum("bop,bqp->oq", gf, cols, optimize=True) if B > 1 else gf[0] @ cols[0].T
                gw = gwm.reshape(O, k, k, C).transpose(0, 3, 1, 2)
            else:
                gw = np.empty((O, C, k, k), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        off = i * Wp + j
                        tap = gf[0] @ xf[0, :, off : off + P].T
                        for bi in range(1, B):
                            tap += gf[bi] @ xf[bi, :, off : off + P].T
                        gw[:, :, i, j] = tap
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    out_t = record(out, inputs, bw, "conv2d")
    return reshape(out_t, out_t.shape[1:]) if squeezed else out_t


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; spatial dims must be even."""
    x, squeezed = _batched(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2d needs even spatial dims, got {H}x{W}")
    h, w = H // 2, W // 2
    win = x.data.reshape(B, C, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h, w, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((B, C, h, w, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    out_t = record(out, (x,), bw, "max_pool2d")
    return reshape(out_t, out_t.shape[1:]) if squeezed else out_t


# ----------------------------------------------------------------------
# resampling
# ----------------------------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` interpolation matrix, align_corners=False."""
    return _bilinear_matrix(n_in, n_out, np.dtype(dtype).str).copy()


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(n_in: int, n_out: int, dtype: str) -> np.ndarray:
    A = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        s = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(s)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        f = s - i0
        A[i, i0] += 1.0 - f
        A[i, i1] += f
    A.flags.writeable = False
    return A


def bilinear_upsample(x: Tensor, H: int, W: int) -> Tensor:
    """Bilinear resize to ``H x W`` (align_corners=False); target must not shrink."""
    x, squeezed = _batched(x)
    h, w = x.shape[-2:]
    if H < h or W < w:
        raise ValueError(f"bilinear_upsample target {H}x{W} is smaller than source {h}x{w}")
    Ay = _bilinear_matrix(h, H, x.dtype.str)
    Ax = _bilinear_matrix(w, W, x.dtype.str)
    out = Ay @ x.data @ Ax.T

    def bw(g):
        return (Ay.T @ g @ Ax,)

    out_t = record(out, (x,), bw, "bilinear_upsample")
    return reshape(out_t, out_t.shape[1:]) if squeezed else out_t


def _bilinear_taps(pts: np.ndarray, H: int, W: int):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    xs, ys = pts[:, 0], pts[:, 1]
    bad = np.flatnonzero((xs < 0) | (xs > W - 1) | (ys < 0) | (ys > H - 1) | ~np.isfinite(xs) | ~np.isfinite(ys))
    if bad.size:
        i = int(bad[0])
        raise IndexError(f"point {i} at (x={xs[i]}, y={ys[i]}) is outside the {H}x{W} feature map")
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx, fy = xs - x0, ys - y0
    idx = np.stack([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1])
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    return idx, wts


def point_sample(feat: Tensor, pts) -> Tensor:
    """Bilinearly sample ``feat[C,H,W]`` at pixel coordinates ``pts[P, (x, y)]``.

    Returns ``[C, P]``; integer coordinates give exact grid values.
    """
    if feat.ndim != 3:
        raise ValueError(f"point_sample expects [C,H,W], got shape {feat.shape}")
    C, H, W = feat.shape
    idx, wts = _bilinear_taps(pts, H, W)
    wts = wts.astype(feat.dtype)
    flat = feat.data.reshape(C, H * W)
    out = (flat[:, idx] * wts).sum(axis=1)

    def bw(g):
        gf = np.zeros((C, H * W), dtype=g.dtype)
        for t in range(4):
            np.add.at(gf.T, idx[t], (g * wts[t]).T)
        return (gf.reshape(C, H, W),)

    return record(out, (feat,), bw, "point_sample")
