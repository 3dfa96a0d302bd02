"""Trained ternary quantisation of conv weights to ``{-Wn, 0, +Wp}`` per layer."""

from __future__ import annotations

import warnings

import numpy as np

from ..engine.forward import evaluate_accuracy
from ..graph import NetworkSpec, validate
from ..tensor import make_rng
from ..train import EpochStats, TrainSchedule, loss_and_grads, sgd_step, trainable_params
from ..train import apply_update, update_running_stats
from .pruning import prunable_weights
from .state import TernaryLayer, TernaryParams


def ternary_codes(w, t):
    """``(codes, delta)`` with ``delta = t * max|w|`` and codes in ``{-1, 0, +1}``."""
    delta = float(t) * float(np.max(np.abs(w))) if w.size else 0.0
    codes = np.zeros(w.shape, dtype=np.int8)
    codes[w > delta] = 1
    codes[w < -delta] = -1
    return codes, delta


def _bucket_mean(w, codes, sign, key):
    sel = codes == sign
    if not np.any(sel):
        warnings.warn(f"{key}: empty {'positive' if sign > 0 else 'negative'} bucket, "
                      "scale set to 0", stacklevel=3)
        return 0.0
    return float(np.mean(np.abs(w[sel])))


def _check_t(t):
    if not 0.0 <= t <= 1.0:
        raise ValueError("TTQ threshold t must lie in [0, 1]")


def ttq_quantize(net: NetworkSpec, t: float):
    """Quantise every conv/depthwise weight array (shortcut convs included).

    Scales start at the mean ``|w|`` of their bucket.  Returns
    ``(quantised_net, TernaryParams)``; the shadow copies keep the
    full-precision weights for :func:`ttq_train`.
    """
    _check_t(t)
    net = net.copy()
    params = TernaryParams(threshold=float(t))
    for key in prunable_weights(net, include_fc=False):
        w = net.get_param(key)
        codes, delta = ternary_codes(w, t)
        tl = TernaryLayer(_bucket_mean(w, codes, 1, key), _bucket_mean(w, codes, -1, key),
                          delta, codes, w.copy())
        params.layers[key] = tl
        net.set_param(key, tl.decode(w.dtype))
    return net, params


def _requantize(net, params, t):
    for key, tl in params.layers.items():
        tl.codes, tl.threshold = ternary_codes(tl.shadow, t)
        net.set_param(key, tl.decode(tl.shadow.dtype))


def ttq_train(net: NetworkSpec, dataset, t: float, sched: TrainSchedule | None = None,
              params: TernaryParams | None = None, on_step=None, eval_set=None, cfg=None):
    """Fine-tune a ternary network, keeping the ternary invariant after every step.

    Forward passes use decoded weights.  Batches alternate between the two
    steps: even batches move the full-precision shadow weights (gradient
    scaled by ``Wp``, ``1`` or ``Wn`` according to the weight's bucket), odd
    batches move the two scales by the summed gradient of their bucket.
    Codes are then recomputed from the shadow weights.  Unquantised
    parameters (biases, batch-norm, FC) train every batch.
    ``on_step(net, params)`` runs after each step.  When ``params`` is not
    given the network is quantised first.  Returns ``(net, TernaryParams)``
    with per-epoch statistics in ``TernaryParams.history``.
    """
    _check_t(t)
    sched = sched or TrainSchedule(base_lr=0.01, epochs=10)
    if params is None:
        net, params = ttq_quantize(net, t)
    else:
        net = net.copy()
    validate(net)
    params.threshold = float(t)
    rng = make_rng(sched.seed)
    eval_set = eval_set if eval_set is not None else dataset
    qkeys = set(params.layers)
    velocity = {}
    step = 0
    n = len(dataset)
    for epoch in range(sched.epochs):
        lr = sched.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, sched.batch_size):
            idx = order[lo:lo + sched.batch_size]
            value, gs = loss_and_grads(net, dataset.images[idx], dataset.labels[idx])
            total += value * len(idx)
            plain = {k: v for k, v in trainable_params(net).items() if k not in qkeys}
            apply_update(net, sgd_step(plain, gs.params, lr, sched.momentum,
                                       sched.weight_decay, velocity))
            update_running_stats(net, gs.batch_stats)
            for key, tl in params.layers.items():
                g = gs.params[key]
                if step % 2 == 0:
                    scale = np.where(tl.codes > 0, tl.wp, np.where(tl.codes < 0, tl.wn, 1.0))
                    tl.shadow = (tl.shadow - lr * scale * g).astype(tl.shadow.dtype)
                else:
                    tl.wp = max(0.0, tl.wp - lr * float(np.sum(g[tl.codes > 0])))
                    tl.wn = max(0.0, tl.wn + lr * float(np.sum(g[tl.codes < 0])))
            _requantize(net, params, t)
            step += 1
            if on_step is not None:
                on_step(net, params)
        params.history.append(EpochStats(epoch, lr, total / n,
                                         evaluate_accuracy(net, eval_set, cfg)))
    return net, params


def decoded_values(net, params):
    """Distinct values of each quantised array, for invariant checks."""
    return {key: np.unique(net.get_param(key)) for key in params.layers}


def is_ternary(net, params) -> bool:
    """True when every quantised array holds only ``{-Wn, 0, +Wp}`` of its layer."""
    for key, tl in params.layers.items():
        w = net.get_param(key)
        allowed = np.array([0.0, tl.wp, -tl.wn], dtype=w.dtype)
        if not np.all(np.isin(w, allowed)):
            return False
    return True
