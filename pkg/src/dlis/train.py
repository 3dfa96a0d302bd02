"""Reverse-mode gradients and SGD training over a :class:`NetworkSpec`.

The forward pass records a tape with one cache entry per layer; the
backward pass walks it in reverse, accumulating output gradients into the
layer before each one and, for residual adds, into the skip source.  The
kernels here are vectorised with BLAS for training speed; inference goes
through :mod:`dlis.engine`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine.forward import BN_EPS, evaluate_accuracy
from .errors import ConfigError, ShapeError
from .graph import NetworkSpec, conv_output_size, validate
from .tensor import as_tensor, make_rng

TRAINABLE = ("weight", "bias", "gamma", "beta")
BN_MOMENTUM = 0.1


@dataclass
class GradientSet:
    """Gradients keyed like :meth:`NetworkSpec.parameters`.

    ``activations`` maps a captured layer index to ``(output, d_loss/d_output)``;
    ``batch_stats`` holds the batch mean/variance seen by each batch-norm.
    """

    params: dict = field(default_factory=dict)
    activations: dict = field(default_factory=dict)
    batch_stats: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.params[key]

    def keys(self):
        return self.params.keys()


@dataclass(frozen=True)
class TrainSchedule:
    base_lr: float = 0.1
    decay_factor: float = 0.1
    decay_every: int = 50
    epochs: int = 150
    batch_size: int = 128
    seed: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0
    augment: bool = False

    def __post_init__(self):
        if self.base_lr <= 0 or self.decay_factor <= 0:
            raise ConfigError("base_lr and decay_factor must be positive")
        if self.decay_every < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("decay_every and batch_size must be >= 1, epochs >= 0")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")

    def lr_at(self, epoch: int) -> float:
        """Stepped rate ``base_lr * decay_factor ** (epoch // decay_every)``."""
        return self.base_lr * self.decay_factor ** (epoch // self.decay_every)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    train_acc: float
    test_acc: float | None = None


# -- layer forward/backward --------------------------------------------------

def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp, k, s, oh, ow):
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    v = v[:, :, :(oh - 1) * s + 1:s, :(ow - 1) * s + 1:s]
    return v.transpose(0, 1, 4, 5, 2, 3)  # N, C, K, K, oH, oW


def _col2im(dwin, x_shape, k, s, p):
    """Scatter-add window gradients ``(N, C, K, K, oH, oW)`` back onto the input."""
    n, c, h, w = x_shape
    oh, ow = dwin.shape[-2:]
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dwin.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u:u + s * (oh - 1) + 1:s, v:v + s * (ow - 1) + 1:s] += dwin[:, :, u, v]
    return dxp[:, :, p:p + h, p:p + w] if p else dxp


def _conv_fwd(layer, x):
    w = layer.params["weight"]
    k, s, p = layer.kernel, layer.stride, layer.pad
    n = x.shape[0]
    oh = conv_output_size(x.shape[2], k, s, p)
    ow = conv_output_size(x.shape[3], k, s, p)
    win = _windows(_pad(x, p), k, s, oh, ow)
    if layer.kind == "depthwise_conv2d":
        c = x.shape[1]
        cols = win.reshape(n, c, k * k, oh * ow)
        y = np.einsum("nckp,ck->ncp", cols, w.reshape(c, k * k), optimize=False)
    else:
        cols = np.ascontiguousarray(win).reshape(n, -1, oh * ow)
        y = np.matmul(w.reshape(w.shape[0], -1), cols)
    b = layer.params.get("bias")
    if b is not None:
        y = y + b[None, :, None]
    return y.reshape(n, -1, oh, ow), (x.shape, cols, oh, ow)


def _conv_bwd(layer, cache, dy):
    x_shape, cols, oh, ow = cache
    w = layer.params["weight"]
    k, s, p = layer.kernel, layer.stride, layer.pad
    n = dy.shape[0]
    dy = dy.reshape(n, dy.shape[1], oh * ow)
    grads = {}
    if layer.kind == "depthwise_conv2d":
        c = x_shape[1]
        grads["weight"] = np.einsum("ncp,nckp->ck", dy, cols).reshape(w.shape)
        dcols = np.einsum("ncp,ck->nckp", dy, w.reshape(c, k * k))
    else:
        grads["weight"] = np.tensordot(dy, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        dcols = np.matmul(w.reshape(w.shape[0], -1).T, dy)
    if "bias" in layer.params:
        grads["bias"] = dy.sum(axis=(0, 2))
    dwin = dcols.reshape(n, x_shape[1], k, k, oh, ow)
    return _col2im(dwin, x_shape, k, s, p), grads


def _bn_fwd(layer, x, train):
    prm = layer.params
    shape = (1, -1, 1, 1)
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = prm["mean"], prm["var"]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = xhat * prm["gamma"].reshape(shape) + prm["beta"].reshape(shape)
    return y.astype(x.dtype, copy=False), (xhat, inv_std, train, mean, var)


def _bn_bwd(layer, cache, dy):
    xhat, inv_std, train, _, _ = cache
    gamma = layer.params["gamma"]
    shape = (1, -1, 1, 1)
    grads = {"gamma": (dy * xhat).sum(axis=(0, 2, 3)), "beta": dy.sum(axis=(0, 2, 3))}
    dxhat = dy * gamma.reshape(shape)
    if not train:
        return dxhat * inv_std.reshape(shape), grads
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
    return dx, grads


def _pool_fwd(layer, x):
    k, s = layer.kernel, layer.stride
    oh = conv_output_size(x.shape[2], k, s, 0)
    ow = conv_output_size(x.shape[3], k, s, 0)
    v = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, :(oh - 1) * s + 1:s, :(ow - 1) * s + 1:s]
    if layer.kind == "maxpool2d":
        flat = v.reshape(v.shape[:4] + (k * k,))
        arg = flat.argmax(axis=-1)  # first maximum in scan order
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg, oh, ow)
    return v.sum(axis=(-1, -2)) / (k * k), (x.shape, None, oh, ow)


def _pool_bwd(layer, cache, dy):
    x_shape, arg, oh, ow = cache
    k, s = layer.kernel, layer.stride
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for u in range(k):
        for v in range(k):
            part = dy * (arg == u * k + v) if arg is not None else dy / (k * k)
            dx[:, :, u:u + s * (oh - 1) + 1:s, v:v + s * (ow - 1) + 1:s] += part
    return dx, {}


def _fc_fwd(layer, x):
    flat = x.reshape(x.shape[0], -1)
    y = flat @ layer.params["weight"].T
    if "bias" in layer.params:
        y = y + layer.params["bias"]
    return y.reshape(x.shape[0], -1, 1, 1), (x.shape, flat)


def _fc_bwd(layer, cache, dy):
    x_shape, flat = cache
    dy = dy.reshape(dy.shape[0], -1)
    grads = {"weight": dy.T @ flat}
    if "bias" in layer.params:
        grads["bias"] = dy.sum(axis=0)
    return (dy @ layer.params["weight"]).reshape(x_shape), grads


def _layer_fwd(layer, x, train):
    kind = layer.kind
    if kind in ("conv2d", "depthwise_conv2d"):
        return _conv_fwd(layer, x)
    if kind == "fully_connected":
        return _fc_fwd(layer, x)
    if kind == "batchnorm":
        return _bn_fwd(layer, x, train)
    if kind == "relu":
        return np.maximum(x, 0), x > 0
    if kind in ("maxpool2d", "avgpool2d"):
        return _pool_fwd(layer, x)
    raise ShapeError(f"layer kind {kind} is not differentiable here")


def _layer_bwd(layer, cache, dy):
    kind = layer.kind
    if kind in ("conv2d", "depthwise_conv2d"):
        return _conv_bwd(layer, cache, dy)
    if kind == "fully_connected":
        return _fc_bwd(layer, cache, dy)
    if kind == "batchnorm":
        return _bn_bwd(layer, cache, dy)
    if kind == "relu":
        return dy * cache, {}
    return _pool_bwd(layer, cache, dy)


# -- network passes ----------------------------------------------------------

def _run_forward(net, x, train, hooks=None):
    """Forward pass returning ``(output, tape, outputs)``."""
    tape = []
    outputs = {}
    needed = {layer.skip_from for layer in net.layers if layer.kind == "residual_add"}
    if -1 in needed:
        outputs[-1] = x
    h = x
    for i, layer in enumerate(net.layers):
        if layer.kind == "residual_add":
            branch = outputs[layer.skip_from]
            sub_caches = []
            for sub in layer.shortcut:
                branch, c = _layer_fwd(sub, branch, train)
                sub_caches.append(c)
            h = h + branch
            tape.append(sub_caches)
        elif layer.kind == "softmax":
            raise ShapeError("training expects logits; remove the softmax layer", i)
        else:
            h, cache = _layer_fwd(layer, h, train)
            tape.append(cache)
        if hooks and i in hooks:
            h = hooks[i](h)
        outputs[i] = h
    return h.reshape(h.shape[0], -1), tape, outputs


def network_output(net, x, train=False):
    """Logits via the training kernels (batch-norm in eval mode unless ``train``)."""
    x = as_tensor(x, net.dtype)
    return _run_forward(net, x, train)[0]


def _cross_entropy(logits, labels):
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def _squared(logits, labels):
    n = logits.shape[0]
    target = np.zeros_like(logits)
    target[np.arange(n), labels] = 1.0
    diff = logits - target
    return float(0.5 * (diff ** 2).sum() / n), diff / n


LOSSES = {"cross_entropy": _cross_entropy, "squared": _squared}


def loss_and_grads(net: NetworkSpec, images, labels, masks=None, capture=(), loss="cross_entropy",
                   train=True, hooks=None):
    """Mean loss over the batch and exact gradients of every trainable array.

    Batch-norm uses batch statistics when ``train``.  Gradients of weights
    covered by ``masks`` (key -> 0/1 array) are zeroed.  ``capture`` lists
    layer indices whose ``(output, gradient)`` pairs are returned in
    ``GradientSet.activations``.
    """
    if net.shapes is None:
        validate(net)
    x = as_tensor(images, net.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if labels.shape != (x.shape[0],):
        raise ValueError("labels must be a vector with one entry per image")
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ValueError(f"labels must lie in [0, {net.num_classes - 1}]")
    logits, tape, outputs = _run_forward(net, x, train, hooks)
    value, dlogits = LOSSES[loss](logits, labels)

    gs = GradientSet()
    pending = {len(net.layers) - 1: dlogits.reshape(outputs[len(net.layers) - 1].shape)}
    capture = set(capture)

    def push(idx, g):
        if idx in pending:
            pending[idx] = pending[idx] + g
        else:
            pending[idx] = g

    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g = pending.pop(i, None)
        if g is None:
            continue
        if i in capture:
            gs.activations[i] = (outputs[i], g)
        if layer.kind == "residual_add":
            branch_g = g
            for j in range(len(layer.shortcut) - 1, -1, -1):
                sub = layer.shortcut[j]
                branch_g, sub_grads = _layer_bwd(sub, tape[i][j], branch_g)
                for name, arr in sub_grads.items():
                    gs.params[f"{i}.shortcut.{j}.{name}"] = arr
                if sub.kind == "batchnorm" and train:
                    gs.batch_stats[f"{i}.shortcut.{j}"] = tape[i][j][3:5]
            push(i - 1, g)
            push(layer.skip_from, branch_g)
            continue
        dx, grads = _layer_bwd(layer, tape[i], g)
        for name, arr in grads.items():
            gs.params[f"{i}.{name}"] = arr
        if layer.kind == "batchnorm" and train:
            gs.batch_stats[str(i)] = tape[i][3:5]
        push(i - 1, dx)

    if masks:
        for key, mask in masks.items():
            if key in gs.params:
                gs.params[key] = np.where(mask, gs.params[key], 0).astype(gs.params[key].dtype)
    return value, gs


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """Plain SGD ``p <- p - lr * g`` on a dict of arrays; returns the new dict.

    With ``momentum`` the velocity dict is updated in place:
    ``v <- momentum * v + g + weight_decay * p``.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    out = {}
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            out[key] = p
            continue
        if weight_decay:
            g = g + weight_decay * p
        if momentum:
            v = velocity.get(key)
            v = g if v is None else momentum * v + g
            velocity[key] = v
            g = v
        out[key] = np.asarray(p - lr * g, dtype=np.asarray(p).dtype)
    return out


def trainable_params(net):
    return {key: arr for key, arr in net.parameters() if key.rsplit(".", 1)[1] in TRAINABLE}


def apply_update(net, new_params, masks=None):
    for key, arr in new_params.items():
        if masks and key in masks:
            arr = np.where(masks[key], arr, 0).astype(arr.dtype)
        net.set_param(key, arr)


def update_running_stats(net, batch_stats, momentum=BN_MOMENTUM):
    for key, (mean, var) in batch_stats.items():
        if ".shortcut." in key:
            idx, _, j = key.split(".")
            layer = net.layers[int(idx)].shortcut[int(j)]
        else:
            layer = net.layers[int(key)]
        p = layer.params
        dtype = p["mean"].dtype
        p["mean"] = ((1 - momentum) * p["mean"] + momentum * mean).astype(dtype)
        p["var"] = ((1 - momentum) * p["var"] + momentum * var).astype(dtype)


def augment(image, rng=None, offset=None):
    """Zero-pad by 2 pixels per side and crop back to the original size.

    ``offset`` ``(dy, dx)`` in ``{0..4}^2`` fixes the crop; otherwise it is
    drawn uniformly from ``rng``.  ``(2, 2)`` is the identity.
    """
    image = np.asarray(image)
    c, h, w = image.shape
    if offset is None:
        offset = tuple(int(v) for v in rng.integers(0, 5, size=2))
    dy, dx = offset
    if not (0 <= dy <= 4 and 0 <= dx <= 4):
        raise ValueError("crop offset must lie in {0..4}")
    padded = np.zeros((c, h + 4, w + 4), dtype=image.dtype)
    padded[:, 2:2 + h, 2:2 + w] = image
    return padded[:, dy:dy + h, dx:dx + w].copy()


def _augment_batch(images, rng):
    offsets = rng.integers(0, 5, size=(len(images), 2))
    return np.stack([augment(img, offset=tuple(o)) for img, o in zip(images, offsets)])


def train_steps(net, dataset, lr, steps, batch_size, rng, masks=None, momentum=0.0,
                weight_decay=0.0, velocity=None, capture=(), on_step=None, augment_data=False):
    """Run ``steps`` SGD steps on random minibatches, updating ``net`` in place.

    ``on_step(gradient_set)`` is called after each step; returns the list of
    minibatch losses.
    """
    velocity = {} if velocity is None else velocity
    losses = []
    n = len(dataset)
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        x = dataset.images[idx]
        if augment_data:
            x = _augment_batch(x, rng)
        value, gs = loss_and_grads(net, x, dataset.labels[idx], masks, capture)
        new = sgd_step(trainable_params(net), gs.params, lr, momentum, weight_decay, velocity)
        apply_update(net, new, masks)
        update_running_stats(net, gs.batch_stats)
        losses.append(value)
        if on_step is not None:
            on_step(gs)
    return losses


def train(net: NetworkSpec, dataset, sched: TrainSchedule, masks=None, test_set=None,
          cfg=None):
    """Train a copy of ``net`` with stepped-rate SGD.

    Returns ``(trained_net, history)`` with one :class:`EpochStats` per epoch.
    The run is a pure function of the inputs and ``sched.seed``.
    """
    net = net.copy()
    validate(net)
    history = []
    rng = make_rng(sched.seed)
    velocity = {}
    n = len(dataset)
    for epoch in range(sched.epochs):
        lr = sched.lr_at(epoch)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, sched.batch_size):
            idx = order[lo:lo + sched.batch_size]
            x = dataset.images[idx]
            if sched.augment:
                x = _augment_batch(x, rng)
            value, gs = loss_and_grads(net, x, dataset.labels[idx], masks)
            new = sgd_step(trainable_params(net), gs.params, lr, sched.momentum,
                           sched.weight_decay, velocity)
            apply_update(net, new, masks)
            update_running_stats(net, gs.batch_stats)
            total += value * len(idx)
            count += len(idx)
        train_acc = evaluate_accuracy(net, dataset, cfg)
        test_acc = evaluate_accuracy(net, test_set, cfg) if test_set is not None else None
        history.append(EpochStats(epoch, lr, total / count, train_acc, test_acc))
    return net, history


def finite_diff_check(net, images, labels, eps=1e-5, loss="cross_entropy", grads=None,
                      train=True, zero_tol=1e-7):
    """Largest relative error between analytic and central-difference gradients.

    The error of one parameter array is ``||a - n|| / max(||a||, ||n||)``
    (Euclidean norms); the maximum over arrays is returned.  ``grads`` may
    supply the analytic gradients to audit (defaults to
    :func:`loss_and_grads`).  Arrays whose analytic and numeric norms are
    both below ``zero_tol`` count as agreeing (e.g. a conv bias feeding
    batch-norm, whose true gradient is zero).
    """
    if net.dtype != np.float64:
        raise ConfigError("finite-difference checks require a float64 network")
    if grads is None:
        _, gs = loss_and_grads(net, images, labels, loss=loss, train=train)
        grads = gs.params
    worst = 0.0
    for key, analytic in grads.items():
        param = net.get_param(key)
        numeric = np.zeros_like(param)
        flat = param.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up, _ = loss_and_grads(net, images, labels, loss=loss, train=train)
            flat[j] = orig - eps
            down, _ = loss_and_grads(net, images, labels, loss=loss, train=train)
            flat[j] = orig
            nflat[j] = (up - down) / (2 * eps)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if denom < zero_tol:
            continue
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
