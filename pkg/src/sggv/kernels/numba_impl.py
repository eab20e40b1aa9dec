"""Numba-jitted kernel implementations.

Loops are parallelised with ``prange`` over the batch axis only; every
output element is written by exactly one thread and per-sample weight
gradients are reduced serially afterwards, so results do not depend on the
thread count.  The weight-gradient kernel allows reassociation/contraction
(``fastmath={'reassoc','nsz','contract'}``) so its dot products vectorise;
everything else stays strict IEEE.  Within one build of the kernels the
arithmetic is fixed, so repeated runs are bit-identical.
"""

import os

import numpy as np
import numba
from numba import njit, prange

_threads = os.environ.get("SGGV_THREADS")
if _threads:
    numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))

_REASSOC = {"reassoc", "nsz", "contract"}


def pad_input(x, padding):
    """Zero-pad the two trailing axes; returns a C-contiguous array."""
    if padding == 0:
        return np.ascontiguousarray(x)
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


@njit(cache=True, parallel=True)
def _conv_fwd(xp, w, b, stride, oh, ow):
    bsz, ic, _, _ = xp.shape
    oc, _, kh, kw = w.shape
    out = np.empty((bsz, oc, oh, ow), dtype=xp.dtype)
    for bb in prange(bsz):
        for o in range(oc):
            out[bb, o, :, :] = b[o]
            for ci in range(ic):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, ci, i, j]
                        for y in range(oh):
                            xrow = xp[bb, ci, y * stride + i]
                            orow = out[bb, o, y]
                            if stride == 1:
                                for z in range(ow):
                                    orow[z] += wv * xrow[z + j]
                            else:
                                for z in range(ow):
                                    orow[z] += wv * xrow[z * stride + j]
    return out


@njit(cache=True, parallel=True, fastmath=_REASSOC)
def _conv_dw_db(xp, dout, stride, kh, kw):
    bsz, ic, _, _ = xp.shape
    oc, oh, ow = dout.shape[1], dout.shape[2], dout.shape[3]
    dwp = np.zeros((bsz, oc, ic, kh, kw), dtype=xp.dtype)
    dbp = np.zeros((bsz, oc), dtype=xp.dtype)
    for bb in prange(bsz):
        for o in range(oc):
            s = 0.0
            for y in range(oh):
                drow = dout[bb, o, y]
                for z in range(ow):
                    s += drow[z]
            dbp[bb, o] = s
            for ci in range(ic):
                for i in range(kh):
                    for j in range(kw):
                        acc = 0.0
                        for y in range(oh):
                            drow = dout[bb, o, y]
                            xrow = xp[bb, ci, y * stride + i]
                            if stride == 1:
                                for z in range(ow):
                                    acc += drow[z] * xrow[z + j]
                            else:
                                for z in range(ow):
                                    acc += drow[z] * xrow[z * stride + j]
                        dwp[bb, o, ci, i, j] = acc
    return dwp, dbp


@njit(cache=True, parallel=True)
def _conv_dx(w, dout, stride, hp, wp):
    oc, ic, kh, kw = w.shape
    bsz, _, oh, ow = dout.shape
    dxp = np.zeros((bsz, ic, hp, wp), dtype=dout.dtype)
    for bb in prange(bsz):
        for o in range(oc):
            for ci in range(ic):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, ci, i, j]
                        for y in range(oh):
                            drow = dout[bb, o, y]
                            dxrow = dxp[bb, ci, y * stride + i]
                            if stride == 1:
                                for z in range(ow):
                                    dxrow[z + j] += wv * drow[z]
                            else:
                                for z in range(ow):
                                    dxrow[z * stride + j] += wv * drow[z]
    return dxp


@njit(cache=True)
def _reduce_rows(parts, lo, hi):
    # serial reduction in batch order keeps results thread-count independent
    out = np.zeros(parts.shape[1:], dtype=parts.dtype)
    flat_out = out.ravel()
    flat = parts.reshape(parts.shape[0], flat_out.size)
    for bb in range(lo, hi):
        for k in range(flat_out.size):
            flat_out[k] += flat[bb, k]
    return out


@njit(cache=True, parallel=True)
def _maxpool_fwd(x, window, stride, oh, ow):
    bsz, c, _, wdt = x.shape
    out = np.empty((bsz, c, oh, ow), dtype=x.dtype)
    idx = np.empty((bsz, c, oh, ow), dtype=np.int64)
    for bb in prange(bsz):
        for ci in range(c):
            plane = x[bb, ci]
            for y in range(oh):
                for z in range(ow):
                    iy0 = y * stride
                    ix0 = z * stride
                    best = plane[iy0, ix0]
                    bi = iy0 * wdt + ix0
                    for i in range(window):
                        for j in range(window):
                            v = plane[iy0 + i, ix0 + j]
                            if v > best:
                                best = v
                                bi = (iy0 + i) * wdt + (ix0 + j)
                    out[bb, ci, y, z] = best
                    idx[bb, ci, y, z] = bi
    return out, idx


@njit(cache=True, parallel=True)
def _maxpool_bwd(dout, idx, h, wdt):
    bsz, c, oh, ow = dout.shape
    dx = np.zeros((bsz, c, h * wdt), dtype=dout.dtype)
    for bb in prange(bsz):
        for ci in range(c):
            for y in range(oh):
                for z in range(ow):
                    dx[bb, ci, idx[bb, ci, y, z]] += dout[bb, ci, y, z]
    return dx.reshape(bsz, c, h, wdt)


def conv2d_fwd_padded(xp, w, b, stride):
    """Cross-correlate an already-padded input with ``w`` plus bias."""
    kh, kw = w.shape[2], w.shape[3]
    oh = (xp.shape[2] - kh) // stride + 1
    ow = (xp.shape[3] - kw) // stride + 1
    return _conv_fwd(xp, w, b, stride, oh, ow)


def conv2d_bwd_padded(xp, w, stride, padding, dout, need_dx=True):
    """Per-sample gradients from the padded input.

    Returns ``(dx, dwp, dbp)`` where ``dwp``/``dbp`` carry one weight/bias
    gradient per batch row (callers reduce over whichever groups they
    need); ``dx`` is unpadded, or None when ``need_dx`` is false.
    """
    dout = np.ascontiguousarray(dout)
    dwp, dbp = _conv_dw_db(xp, dout, stride, w.shape[2], w.shape[3])
    if not need_dx:
        return None, dwp, dbp
    dxp = _conv_dx(w, dout, stride, xp.shape[2], xp.shape[3])
    if padding:
        h = xp.shape[2] - 2 * padding
        wdt = xp.shape[3] - 2 * padding
        dx = dxp[:, :, padding:padding + h, padding:padding + wdt]
    else:
        dx = dxp
    return dx, dwp, dbp


def reduce_rows(parts, lo, hi):
    """Sequential sum of ``parts[lo:hi]`` (deterministic accumulation order)."""
    return _reduce_rows(parts, lo, hi)


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
    """Max pooling; idx holds the flat H*W index of each window's first max."""
    h, wdt = x.shape[2], x.shape[3]
    oh = (h - window) // stride + 1
    ow = (wdt - window) // stride + 1
    return _maxpool_fwd(np.ascontiguousarray(x), window, stride, oh, ow)


def maxpool_bwd(dout, idx, h, wdt):
    """Scatter pooled gradients back to the (B,C,h,wdt) input positions."""
    return _maxpool_bwd(np.ascontiguousarray(dout), idx, h, wdt)
