"""Pure-numpy kernel implementations.

Convolutions are expressed as one einsum per kernel tap (kh * kw small
matrix products over shifted views), which vectorises well for the small
images this package trains on and supports arbitrary stride/padding.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def pad_input(x, padding):
    """Zero-pad the two trailing axes; returns a C-contiguous array."""
    if padding == 0:
        return np.ascontiguousarray(x)
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


def conv2d_fwd_padded(xp, w, b, stride):
    """Cross-correlate an already-padded input with ``w`` plus bias."""
    _, _, hp, wp = xp.shape
    oc, _, kh, kw = w.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.empty((xp.shape[0], oc, oh, ow), dtype=xp.dtype)
    out[:] = b[None, :, None, None]
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            out += np.einsum("bihw,oi->bohw", xs, w[:, :, i, j], optimize=True)
    return out


def conv2d_bwd_padded(xp, w, stride, padding, dout, need_dx=True):
    """Per-sample gradients from the padded input.

    Returns ``(dx, dwp, dbp)`` where ``dwp``/``dbp`` carry one weight/bias
    gradient per batch row (callers reduce over whichever groups they
    need); ``dx`` is unpadded, or None when ``need_dx`` is false.
    """
    bsz = xp.shape[0]
    oc, ic, kh, kw = w.shape
    _, _, oh, ow = dout.shape
    dxp = np.zeros_like(xp) if need_dx else None
    dwp = np.empty((bsz, oc, ic, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            sl_h = slice(i, i + stride * oh, stride)
            sl_w = slice(j, j + stride * ow, stride)
            dwp[:, :, :, i, j] = np.einsum(
                "bohw,bihw->boi", dout, xp[:, :, sl_h, sl_w], optimize=True)
            if need_dx:
                dxp[:, :, sl_h, sl_w] += np.einsum(
                    "bohw,oi->bihw", dout, w[:, :, i, j], optimize=True)
    dbp = dout.sum(axis=(2, 3))
    if need_dx and padding:
        h = xp.shape[2] - 2 * padding
        wdt = xp.shape[3] - 2 * padding
        dx = dxp[:, :, padding:padding + h, padding:padding + wdt]
    else:
        dx = dxp
    return dx, dwp, dbp


def reduce_rows(parts, lo, hi):
    """Sequential sum of ``parts[lo:hi]`` (deterministic accumulation order)."""
    acc = np.zeros(parts.shape[1:], dtype=parts.dtype)
    for b in range(lo, hi):
        acc += parts[b]
    return acc


def conv2d_fwd(x, w, b, stride, padding):
    """Cross-correlate ``x`` (B,C,H,W) with ``w`` (O,C,KH,KW) plus bias."""
    return conv2d_fwd_padded(pad_input(x, padding), w, b, stride)


def conv2d_bwd(x, w, stride, padding, dout, need_dx=True):
    """Gradients of :func:`conv2d_fwd`; returns ``(dx, dw, db)``.

    ``need_dx=False`` skips the input gradient (first layer of a network)
    and returns ``None`` in its place.
    """
    dx, dwp, dbp = conv2d_bwd_padded(
        pad_input(x, padding), w, stride, padding, dout, need_dx)
    return dx, reduce_rows(dwp, 0, dwp.shape[0]), reduce_rows(dbp, 0, dbp.shape[0])


def maxpool_fwd(x, window, stride):
    """Max pooling. Returns (out, idx) with idx the flat H*W input index of
    each window's first maximum (row-major scan order within the window)."""
    bsz, c, h, wdt = x.shape
    oh = (h - window) // stride + 1
    ow = (wdt - window) // stride + 1
    win = sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    flat = win.reshape(bsz, c, oh, ow, window * window)
    k = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, k[..., None], axis=-1)[..., 0]
    ih = (np.arange(oh) * stride)[None, None, :, None] + k // window
    iw = (np.arange(ow) * stride)[None, None, None, :] + k % window
    return out, ih * wdt + iw


def maxpool_bwd(dout, idx, h, wdt):
    """Scatter pooled gradients back to the (B,C,h,wdt) input positions."""
    bsz, c, oh, ow = dout.shape
    dx = np.zeros((bsz, c, h * wdt), dtype=dout.dtype)
    bi = np.arange(bsz)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (bi, ci, idx), dout)
    return dx.reshape(bsz, c, h, wdt)
