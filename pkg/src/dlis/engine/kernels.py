"""Convolution kernels in direct, im2col+GEMM and CSR-sparse form.

All kernels take a batch ``x`` of shape ``(N, C, H, W)`` and zero-pad it into
a scratch buffer first.  Work is split into items that each own whole output
elements, so results do not depend on the executor's thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from ..graph import conv_output_size
from ..tensor import CsrMatrix, gemm, ordered_sum, spmm
from .executor import SERIAL


def pad_input(x, pad):
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _windows(xp, k, stride, oh, ow):
    """View of shape ``(N, C, K, K, oH, oW)`` over a padded batch."""
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    v = v[:, :, :(oh - 1) * stride + 1:stride, :(ow - 1) * stride + 1:stride]
    return v.transpose(0, 1, 4, 5, 2, 3)


def conv_geometry(x_shape, k, stride, pad):
    _, _, h, w = x_shape
    return conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)


def _check_conv(x, w, b):
    if x.ndim != 4:
        raise ShapeError(f"input must be rank 4, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"filters must have shape (O, C, K, K), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"filters expect {w.shape[1]} channels, input has {x.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} filters")


def conv2d_direct(x, w, b=None, stride=1, pad=0, executor=SERIAL, tag=None):
    """Direct convolution, one work item per (image, output channel)."""
    _check_conv(x, w, b)
    n, c, _, _ = x.shape
    o, _, k, _ = w.shape
    oh, ow = conv_geometry(x.shape, k, stride, pad)
    win = _windows(pad_input(x, pad), k, stride, oh, ow)
    out = np.empty((n, o, oh, ow), dtype=np.result_type(x, w))

    def item(idx):
        img, oc = divmod(idx, o)
        prod = w[oc][:, :, :, None, None] * win[img]
        acc = ordered_sum(prod.reshape(c * k * k, oh * ow))
        if b is not None:
            acc += b[oc]
        out[img, oc] = acc.reshape(oh, ow)

    executor.run(n * o, item, tag)
    return out


@dataclass
class Im2colBuffer:
    """Unrolled receptive fields: column ``j`` is the patch of output position ``j``.

    Rows run channel-major, then kernel row, then kernel column.
    """

    matrix: np.ndarray
    channels: int
    kernel: int
    stride: int
    pad: int
    out_h: int
    out_w: int


def im2col(x_img, k, stride=1, pad=0) -> Im2colBuffer:
    """Unroll one image ``(C, H, W)`` into a ``(C*K*K, out_H*out_W)`` matrix."""
    x_img = np.asarray(x_img)
    if x_img.ndim != 3:
        raise ShapeError(f"im2col takes one image (C, H, W), got shape {x_img.shape}")
    c = x_img.shape[0]
    oh, ow = conv_geometry((1,) + x_img.shape, k, stride, pad)
    win = _windows(pad_input(x_img[None], pad), k, stride, oh, ow)[0]
    matrix = np.ascontiguousarray(win.reshape(c * k * k, oh * ow))
    return Im2colBuffer(matrix, c, k, stride, pad, oh, ow)


def _bands(rows, band_rows):
    return [(lo, min(lo + band_rows, rows)) for lo in range(0, rows, band_rows)]


def _lowered_conv(x, rows, k, stride, pad, multiply, b, executor, tag, band_rows):
    """Shared driver for the GEMM and sparse paths.

    Phase 1 builds one im2col buffer per image; phase 2 computes
    ``(image, row band)`` items of ``weights @ buffer``.
    """
    n = x.shape[0]
    oh, ow = conv_geometry(x.shape, k, stride, pad)
    xp = pad_input(x, pad)
    cols = [None] * n

    def lower(img):
        win = _windows(xp[img:img + 1], k, stride, oh, ow)[0]
        cols[img] = np.ascontiguousarray(win.reshape(-1, oh * ow))

    executor.run(n, lower, None if tag is None else (tag, "im2col"))
    out = np.empty((n, rows, oh * ow), dtype=x.dtype)
    bands = _bands(rows, band_rows)

    def item(idx):
        img, bi = divmod(idx, len(bands))
        lo, hi = bands[bi]
        multiply(cols[img], out[img], lo, hi)
        if b is not None:
            out[img, lo:hi] += b[lo:hi, None]

    executor.run(n * len(bands), item, tag)
    return out.reshape(n, rows, oh, ow)


def conv2d_gemm(x, w, b=None, stride=1, pad=0, executor=SERIAL, tag=None, band_rows=16):
    """Convolution as ``(O, C*K*K)`` filter matrix times the im2col buffer."""
    _check_conv(x, w, b)
    o, _, k, _ = w.shape
    wmat = np.ascontiguousarray(w.reshape(o, -1))

    def multiply(cols, out, lo, hi):
        gemm(wmat[lo:hi], cols, out=out[lo:hi])

    return _lowered_conv(x, o, k, stride, pad, multiply, b, executor, tag, band_rows)


def conv2d_sparse(x, w_csr: CsrMatrix, kernel, b=None, stride=1, pad=0, executor=SERIAL,
                  tag=None, band_rows=16):
    """Convolution with CSR filters: ``spmm`` against the im2col buffer."""
    if x.ndim != 4:
        raise ShapeError(f"input must be rank 4, got shape {x.shape}")
    if w_csr.cols != x.shape[1] * kernel * kernel:
        raise ShapeError(f"CSR filter matrix has {w_csr.cols} columns, expected "
                         f"{x.shape[1] * kernel * kernel}")
    if b is not None and b.shape != (w_csr.rows,):
        raise ShapeError("bias does not match filter count")

    def multiply(cols, out, lo, hi):
        spmm(w_csr, cols, out=out, row_range=(lo, hi))

    return _lowered_conv(x, w_csr.rows, kernel, stride, pad, multiply, b, executor, tag,
                         band_rows)


def depthwise_conv(x, w, b=None, stride=1, pad=0, executor=SERIAL, tag=None, algo="direct",
                   w_csr=None):
    """One ``K x K`` filter per channel; items are (image, channel) pairs.

    ``algo`` selects how each channel's product is formed: a direct window
    reduction, a ``1 x K*K`` GEMM, or a sparse row product with ``w_csr``.
    """
    if x.ndim != 4:
        raise ShapeError(f"input must be rank 4, got shape {x.shape}")
    n, c, _, _ = x.shape
    if w.shape[0] != c or w.shape[1] != 1:
        raise ShapeError(f"depthwise filters must have shape ({c}, 1, K, K), got {w.shape}")
    k = w.shape[2]
    oh, ow = conv_geometry(x.shape, k, stride, pad)
    win = _windows(pad_input(x, pad), k, stride, oh, ow)
    out = np.empty((n, c, oh, ow), dtype=np.result_type(x, w))
    wflat = w.reshape(c, k * k)
    if algo == "sparse_csr" and w_csr is None:
        raise ShapeError("sparse depthwise convolution needs CSR filters")

    def item(idx):
        img, ch = divmod(idx, c)
        patch = win[img, ch].reshape(k * k, oh * ow)
        if algo == "direct":
            acc = ordered_sum(wflat[ch][:, None] * patch)
        elif algo == "im2col_gemm":
            acc = gemm(wflat[ch:ch + 1], np.ascontiguousarray(patch))[0]
        else:
            cols, vals = w_csr.row(ch)
            if len(vals):
                acc = ordered_sum(vals[:, None] * patch[cols.astype(np.intp)])
            else:
                acc = np.zeros(oh * ow, dtype=out.dtype)
        if b is not None:
            acc = acc + b[ch]
        out[img, ch] = acc.reshape(oh, ow)

    executor.run(n * c, item, tag)
    return out
