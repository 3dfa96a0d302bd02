"""Layer dispatch and whole-network inference."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError
from ..graph import NetworkSpec, conv_output_size, validate
from ..tensor import as_tensor, gemm, spmm
from .executor import SERIAL, ExecConfig, ParallelExecutor
from .kernels import conv2d_direct, conv2d_gemm, conv2d_sparse, depthwise_conv

BN_EPS = 1e-5


def softmax(logits, axis=1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _pool_windows(x, k, s):
    _, _, h, w = x.shape
    oh, ow = conv_output_size(h, k, s, 0), conv_output_size(w, k, s, 0)
    v = sliding_window_view(x, (k, k), axis=(2, 3))
    return v[:, :, :(oh - 1) * s + 1:s, :(ow - 1) * s + 1:s]


def _per_image(x, fn, executor, tag, out_shape, dtype):
    out = np.empty((x.shape[0],) + out_shape, dtype=dtype)

    def item(img):
        out[img] = fn(x[img:img + 1])[0]

    executor.run(x.shape[0], item, tag)
    return out


def _conv(layer, x, cfg, executor, tag):
    p = layer.params
    b = p.get("bias")
    algo = cfg.conv_algo
    if algo == "sparse_csr" and layer.weight_format != "csr":
        raise ConfigError("sparse_csr execution requires csr weight format on every conv layer"
                          + (f" (layer {tag})" if tag is not None else ""))
    if layer.kind == "depthwise_conv2d":
        return depthwise_conv(x, p["weight"], b, layer.stride, layer.pad, executor, tag, algo,
                              layer.csr)
    if algo == "direct":
        return conv2d_direct(x, p["weight"], b, layer.stride, layer.pad, executor, tag)
    if algo == "im2col_gemm":
        return conv2d_gemm(x, p["weight"], b, layer.stride, layer.pad, executor, tag,
                           cfg.band_rows)
    return conv2d_sparse(x, layer.csr, layer.kernel, b, layer.stride, layer.pad, executor,
                         tag, cfg.band_rows)


def _fully_connected(layer, x, cfg, executor, tag):
    n = x.shape[0]
    flat = np.ascontiguousarray(x.reshape(n, -1).T)
    if flat.shape[0] != layer.in_channels:
        raise ShapeError(f"fully_connected expects {layer.in_channels} inputs, "
                         f"got {flat.shape[0]}", tag)
    rows = layer.out_channels
    out = np.empty((rows, n), dtype=np.result_type(x, layer.params["weight"]))
    use_csr = layer.weight_format == "csr" and cfg.conv_algo == "sparse_csr"
    wmat = layer.params["weight"]
    b = layer.params.get("bias")
    bands = [(lo, min(lo + cfg.band_rows, rows)) for lo in range(0, rows, cfg.band_rows)]

    def item(bi):
        lo, hi = bands[bi]
        if use_csr:
            spmm(layer.csr, flat, out=out, row_range=(lo, hi))
        else:
            gemm(wmat[lo:hi], flat, out=out[lo:hi])
        if b is not None:
            out[lo:hi] += b[lo:hi, None]

    executor.run(len(bands), item, tag)
    return out.T.reshape(n, rows, 1, 1).copy()


def batchnorm_inference(x, p, eps=BN_EPS):
    shape = (1, -1, 1, 1)
    denom = np.sqrt(p["var"] + eps).reshape(shape)
    return (x - p["mean"].reshape(shape)) / denom * p["gamma"].reshape(shape) \
        + p["beta"].reshape(shape)


def layer_forward(layer, x, cfg: ExecConfig | None = None, executor=None, tag=None,
                  skip=None):
    """Apply one layer.  ``skip`` is the skip-source activation for ``residual_add``."""
    cfg = cfg or ExecConfig()
    executor = executor or SERIAL
    kind = layer.kind
    if kind in ("conv2d", "depthwise_conv2d"):
        return _conv(layer, x, cfg, executor, tag)
    if kind == "fully_connected":
        return _fully_connected(layer, x, cfg, executor, tag)
    if kind == "relu":
        return np.maximum(x, 0).astype(x.dtype, copy=False)
    if kind == "batchnorm":
        if x.shape[1] != layer.in_channels:
            raise ShapeError(f"batchnorm over {layer.in_channels} channels fed {x.shape[1]}", tag)
        return batchnorm_inference(x, layer.params).astype(x.dtype, copy=False)
    if kind == "maxpool2d":
        k, s = layer.kernel, layer.stride

        def pool(xi):
            return _pool_windows(xi, k, s).max(axis=(-1, -2))

        oh = conv_output_size(x.shape[2], k, s, 0)
        ow = conv_output_size(x.shape[3], k, s, 0)
        return _per_image(x, pool, executor, tag, (x.shape[1], oh, ow), x.dtype)
    if kind == "avgpool2d":
        win = _pool_windows(x, layer.kernel, layer.stride)
        return (win.sum(axis=(-1, -2)) / (layer.kernel * layer.kernel)).astype(x.dtype)
    if kind == "softmax":
        n = x.shape[0]
        return softmax(x.reshape(n, -1)).reshape(x.shape)
    if kind == "residual_add":
        if skip is None:
            raise ShapeError("residual_add needs its skip-source activation", tag)
        branch = skip
        for j, sub in enumerate(layer.shortcut):
            branch = layer_forward(sub, branch, cfg, executor,
                                   None if tag is None else (tag, "shortcut", j))
        if branch.shape != x.shape:
            raise ShapeError(f"residual_add branch shapes differ: {branch.shape} vs {x.shape}",
                             tag)
        return x + branch
    raise ShapeError(f"unsupported layer kind {kind}", tag)


def forward(net: NetworkSpec, x, cfg: ExecConfig | None = None, trace=None, hooks=None,
            executor=None):
    """Run ``net`` on a batch and return logits of shape ``(N, num_classes)``.

    Layers execute one after another; each layer's work items all finish
    before the next layer starts.  ``hooks`` maps a layer index to a function
    applied to that layer's output (used for activation zero-out studies).
    """
    cfg = cfg or ExecConfig()
    if net.shapes is None:
        validate(net)
    x = as_tensor(x, net.dtype)
    if tuple(x.shape[1:]) != tuple(net.input_shape):
        raise ShapeError(f"input shape {x.shape[1:]} does not match network input "
                         f"{tuple(net.input_shape)}")
    needed = {layer.skip_from for layer in net.layers if layer.kind == "residual_add"}
    saved = {-1: x} if -1 in needed else {}
    own = executor is None
    if own:
        executor = ParallelExecutor.from_config(cfg, trace)
    try:
        h = x
        for i, layer in enumerate(net.layers):
            skip = saved.get(layer.skip_from) if layer.kind == "residual_add" else None
            h = layer_forward(layer, h, cfg, executor, i, skip)
            if hooks and i in hooks:
                h = hooks[i](h)
            if i in needed:
                saved[i] = h
    finally:
        if own:
            executor.close()
    return h.reshape(h.shape[0], -1)


def predict(net, images, cfg=None, batch_size=256):
    preds = []
    for lo in range(0, len(images), batch_size):
        preds.append(np.argmax(forward(net, images[lo:lo + batch_size], cfg), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(net, dataset, cfg=None, batch_size=256) -> float:
    """Top-1 accuracy: fraction of images whose argmax logit equals the label."""
    labels = np.asarray(dataset.labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    preds = predict(net, dataset.images, cfg, batch_size)
    return float(np.count_nonzero(preds == labels)) / len(labels)
