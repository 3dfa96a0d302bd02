"""Magnitude (weight) pruning and its iterative prune/fine-tune loop."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..engine.forward import evaluate_accuracy
from ..graph import WEIGHTED_KINDS, NetworkSpec
from ..train import TrainSchedule, train
from .state import PruneMask

FINETUNE_EPOCHS = 30
FIRST_LEVEL = 0.5


def prunable_weights(net: NetworkSpec, include_fc=True):
    """Parameter keys of every conv/depthwise/FC weight, shortcut convs included."""
    keys = []
    for i, layer in enumerate(net.layers):
        if layer.kind in WEIGHTED_KINDS and (include_fc or layer.kind != "fully_connected"):
            keys.append(f"{i}.weight")
        for j, sub in enumerate(layer.shortcut):
            if sub.kind == "conv2d":
                keys.append(f"{i}.shortcut.{j}.weight")
    return keys


def _smallest(magnitudes, count):
    """Boolean mask of the ``count`` smallest entries; ties go to lower flat index."""
    flat = magnitudes.reshape(-1)
    order = np.argsort(flat, kind="stable")
    pruned = np.zeros(flat.size, dtype=bool)
    pruned[order[:count]] = True
    return pruned.reshape(magnitudes.shape)


def magnitude_prune(net: NetworkSpec, sparsity=None, std_factor=None, per_layer=True,
                    include_fc=True, previous: PruneMask | None = None):
    """Zero small-magnitude weights; returns ``(pruned_net, mask)``.

    Exactly one of the two modes is used:

    * ``sparsity=s`` zeroes exactly ``floor(s * n)`` smallest-``|w|`` weights
      per layer (or over all layers jointly when ``per_layer`` is False);
    * ``std_factor=k`` zeroes weights with ``|w| < k * std(layer weights)``.

    Weights pruned by ``previous`` stay pruned.
    """
    if (sparsity is None) == (std_factor is None):
        raise ValueError("give exactly one of sparsity or std_factor")
    if sparsity is not None and not 0.0 <= sparsity <= 1.0:
        raise ValueError("sparsity must lie in [0, 1]")
    if std_factor is not None and std_factor < 0:
        raise ValueError("std_factor must be non-negative")
    net = net.copy()
    keys = prunable_weights(net, include_fc)
    weights = {k: net.get_param(k) for k in keys}
    keep = {}
    if std_factor is not None:
        for k, w in weights.items():
            thr = std_factor * float(np.std(w))
            keep[k] = ~(np.abs(w) < thr) & (w != 0)
    elif per_layer:
        for k, w in weights.items():
            keep[k] = ~_smallest(np.abs(w), int(np.floor(sparsity * w.size)))
    else:
        mags = np.concatenate([np.abs(w).reshape(-1) for w in weights.values()])
        pruned = _smallest(mags, int(np.floor(sparsity * mags.size)))
        offset = 0
        for k, w in weights.items():
            keep[k] = ~pruned[offset:offset + w.size].reshape(w.shape)
            offset += w.size
    if previous is not None:
        for k in keep:
            if k in previous.masks:
                keep[k] &= previous.masks[k]
    for k, w in weights.items():
        net.set_param(k, np.where(keep[k], w, 0).astype(w.dtype))
    return net, PruneMask(keep)


@dataclass
class PruneLevel:
    level: float
    net: NetworkSpec
    mask: PruneMask
    accuracy: float
    pre_finetune_accuracy: float
    history: list


def iterative_prune(net, dataset, levels=(FIRST_LEVEL,), finetune_epochs=FINETUNE_EPOCHS,
                    sched: TrainSchedule | None = None, eval_set=None, per_layer=True,
                    include_fc=True, cfg=None):
    """Prune to each sparsity in ``levels`` in turn, fine-tuning after each step.

    Masks accumulate, so a weight pruned at one level stays zero at every
    later level.  Accuracy is measured on ``eval_set`` (default: the training
    data) before and after fine-tuning.
    """
    levels = list(levels)
    if not levels:
        raise ValueError("levels must be non-empty")
    if any(b < a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be ascending")
    sched = sched or TrainSchedule()
    sched = replace(sched, epochs=finetune_epochs)
    eval_set = eval_set if eval_set is not None else dataset
    results = []
    mask = None
    current = net
    for i, level in enumerate(levels):
        current, mask = magnitude_prune(current, sparsity=level, per_layer=per_layer,
                                        include_fc=include_fc, previous=mask)
        pre = evaluate_accuracy(current, eval_set, cfg)
        step_sched = replace(sched, seed=sched.seed + i)
        current, history = train(current, dataset, step_sched, masks=mask.masks, cfg=cfg)
        acc = evaluate_accuracy(current, eval_set, cfg)
        results.append(PruneLevel(level, current, mask, acc, pre, history))
    return results


def weight_sparsity(net: NetworkSpec, include_fc=True):
    """Fraction of zero-valued weights over conv (and optionally FC) layers."""
    total = zeros = 0
    for key in prunable_weights(net, include_fc):
        w = net.get_param(key)
        total += w.size
        zeros += w.size - int(np.count_nonzero(w))
    return 0.0 if total == 0 else zeros / total


def parameter_sparsity(net: NetworkSpec):
    """Fraction of zero-valued entries over every parameter array."""
    total = zeros = 0
    for _, arr in net.parameters():
        total += arr.size
        zeros += arr.size - int(np.count_nonzero(arr))
    return 0.0 if total == 0 else zeros / total
