"""Fisher channel pruning with a MAC penalty, and dense recasting.

A *prunable group* is a ``conv2d`` producer whose output reaches exactly one
weighted consumer (``conv2d`` or ``fully_connected``) through a chain of
per-channel layers (batch-norm, relu, pooling, depthwise conv).  Removing
output channel ``c`` of the producer deletes filter ``c``, the matching
entries of every chain layer, and input slice ``c`` of the consumer.
Groups touching a residual connection are not prunable, so block input and
output widths never change.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import ChannelPruneError
from ..graph import NetworkSpec, count_params, input_shape_of, validate
from ..tensor import csr_from_dense, make_rng
from ..train import loss_and_grads, train_steps
from .state import ChannelRecord, ChannelRemoval

CHAIN_KINDS = ("batchnorm", "relu", "maxpool2d", "avgpool2d", "depthwise_conv2d")
DEFAULT_BETA = 1e-6
PRUNE_EVERY = 100
FINETUNE_LR = {"vgg16_cifar": 8e-4, "resnet18": 8e-3, "mobilenet": 8e-3}


@dataclass(frozen=True)
class PrunableGroup:
    producer: int
    chain: tuple
    consumer: int

    @property
    def tap(self) -> int:
        """Layer whose output is the channel activation fed to the consumer."""
        return self.chain[-1] if self.chain else self.producer


def prunable_groups(net: NetworkSpec):
    """Every channel-prunable ``(producer, chain, consumer)`` group, in layer order."""
    if net.shapes is None:
        validate(net)
    sources = {src for src, _ in net.skips}
    groups = []
    for i, layer in enumerate(net.layers):
        if layer.kind != "conv2d" or i in sources:
            continue
        chain = []
        j = i + 1
        ok = True
        while j < len(net.layers) and net.layers[j].kind in CHAIN_KINDS:
            if j in sources:
                ok = False
                break
            chain.append(j)
            j += 1
        if not ok or j >= len(net.layers):
            continue
        if net.layers[j].kind in ("conv2d", "fully_connected"):
            groups.append(PrunableGroup(i, tuple(chain), j))
    return groups


def _group_by_producer(net):
    return {g.producer: g for g in prunable_groups(net)}


def _removed_by_layer(removals):
    out = {}
    for layer, ch in removals:
        out.setdefault(layer, set()).add(ch)
    return out


def _check_removals(net, pairs, groups):
    seen = set()
    by_layer = {}
    for layer, ch in pairs:
        if (layer, ch) in seen:
            raise ChannelPruneError(f"channel {ch} of layer {layer} removed twice")
        seen.add((layer, ch))
        if layer not in groups:
            raise ChannelPruneError(f"layer {layer} is not channel-prunable (it is not a conv "
                                    "feeding a consumer outside any residual connection)")
        if not 0 <= ch < net.layers[layer].out_channels:
            raise ChannelPruneError(f"layer {layer} has no channel {ch}")
        by_layer.setdefault(layer, set()).add(ch)
    for layer, chans in by_layer.items():
        if len(chans) >= net.layers[layer].out_channels:
            raise ChannelPruneError(f"removal would delete every channel of layer {layer}")


def _slice_out(layer, keep):
    """Keep output channels ``keep`` of a producer/chain layer in place."""
    for name in list(layer.params):
        layer.params[name] = np.ascontiguousarray(layer.params[name][keep])
    if layer.kind in ("conv2d", "depthwise_conv2d", "batchnorm"):
        layer.out_channels = len(keep)
        if layer.kind != "conv2d":
            layer.in_channels = len(keep)


def _slice_in(layer, keep, in_shape):
    w = layer.params["weight"]
    if layer.kind == "conv2d":
        layer.params["weight"] = np.ascontiguousarray(w[:, keep])
        layer.in_channels = len(keep)
    else:
        c, h, wd = in_shape
        w3 = w.reshape(w.shape[0], c, h * wd)
        layer.params["weight"] = np.ascontiguousarray(w3[:, keep].reshape(w.shape[0], -1))
        layer.in_channels = len(keep) * h * wd


def _refresh_csr(layer):
    if layer.weight_format == "csr":
        layer.csr = csr_from_dense(layer.weight_matrix())


def recast_dense(net: NetworkSpec, removals) -> NetworkSpec:
    """Build the smaller dense network with the recorded channels deleted.

    ``removals`` is a :class:`ChannelRecord` or an iterable of
    ``(layer, channel)`` pairs in the numbering of ``net``.  The result is
    validated; if the removed channels' parameters were already zero the
    logits are unchanged bit for bit.
    """
    pairs = removals.pairs() if isinstance(removals, ChannelRecord) else list(removals)
    groups = _group_by_producer(net)
    _check_removals(net, pairs, groups)
    out = net.copy()
    for producer, chans in sorted(_removed_by_layer(pairs).items()):
        g = groups[producer]
        keep = np.array([c for c in range(net.layers[producer].out_channels) if c not in chans],
                        dtype=np.intp)
        _slice_out(out.layers[producer], keep)
        for j in g.chain:
            _slice_out(out.layers[j], keep)
        _slice_in(out.layers[g.consumer], keep, input_shape_of(net, g.consumer))
    for idx in {g.consumer for g in groups.values()} | set(groups):
        _refresh_csr(out.layers[idx])
    for j in {j for g in groups.values() for j in g.chain}:
        _refresh_csr(out.layers[j])
    out.shapes = None
    return validate(out)


def channel_param_keys(net, group: PrunableGroup):
    """``(key, axis, stride)`` triples naming every array entry tied to a channel."""
    keys = []
    for idx in (group.producer,) + group.chain:
        for name in net.layers[idx].params:
            keys.append((f"{idx}.{name}", 0, 1))
    cons = net.layers[group.consumer]
    if cons.kind == "conv2d":
        keys.append((f"{group.consumer}.weight", 1, 1))
    else:
        _, h, w = input_shape_of(net, group.consumer)
        keys.append((f"{group.consumer}.weight", 1, h * w))
    return keys


def _channel_index(arr, axis, stride, ch):
    index = [slice(None)] * arr.ndim
    index[axis] = slice(ch * stride, (ch + 1) * stride)
    return tuple(index)


def channel_masks(net, removals):
    """Keep-masks that freeze every parameter entry of the removed channels."""
    groups = _group_by_producer(net)
    masks = {}
    for producer, chans in _removed_by_layer(removals).items():
        for key, axis, stride in channel_param_keys(net, groups[producer]):
            if key.rsplit(".", 1)[1] in ("mean", "var"):
                continue
            arr = net.get_param(key)
            m = masks.setdefault(key, np.ones(arr.shape, dtype=bool))
            for ch in chans:
                m[_channel_index(arr, axis, stride, ch)] = False
    return masks


def zero_channel(net, layer, channel):
    """Zero every trainable parameter tied to output ``channel`` of ``layer`` (in place)."""
    groups = _group_by_producer(net)
    if layer not in groups:
        raise ChannelPruneError(f"layer {layer} is not channel-prunable")
    for key, axis, stride in channel_param_keys(net, groups[layer]):
        if key.rsplit(".", 1)[1] in ("mean", "var"):
            continue
        arr = net.get_param(key).copy()
        arr[_channel_index(arr, axis, stride, channel)] = 0
        net.set_param(key, arr)
        _refresh_csr(net.resolve(key)[0])
    return net


def channel_macs(net, removed=()):
    """MACs saved by removing one more channel, per prunable group.

    Counts the channel's own filter, its depthwise filters in the chain and
    the slice of the consumer it feeds, using the widths left after
    ``removed``.  Returns ``{producer: macs}``.
    """
    if net.shapes is None:
        validate(net)
    groups = _group_by_producer(net)
    gone = _removed_by_layer(removed)
    consumer_of = {g.consumer: g.producer for g in groups.values()}
    out = {}
    for p, g in groups.items():
        layer = net.layers[p]
        _, oh, ow = net.shapes[p]
        alive_in = layer.in_channels - len(gone.get(consumer_of.get(p), ()))
        macs = alive_in * layer.kernel ** 2 * oh * ow
        for j in g.chain:
            cl = net.layers[j]
            if cl.kind == "depthwise_conv2d":
                _, dh, dw = net.shapes[j]
                macs += cl.kernel ** 2 * dh * dw
        cons = net.layers[g.consumer]
        alive_out = cons.out_channels - len(gone.get(g.consumer, ()))
        if cons.kind == "conv2d":
            _, ch, cw = net.shapes[g.consumer]
            macs += alive_out * cons.kernel ** 2 * ch * cw
        else:
            _, h, w = input_shape_of(net, g.consumer)
            macs += alive_out * h * w
        out[p] = int(macs)
    return out


def fisher_saliency(net, batches, groups=None, train=False, form="theis"):
    """Per-channel Fisher saliency, ``{(producer, channel): score}``.

    For each sample the activation ``a`` tapped just before the consumer is
    multiplied by the per-sample loss gradient ``g`` and summed over space;
    ``form="theis"`` scores ``0.5 * mean_n (sum_hw a*g)^2``, ``form="pointwise"``
    scores ``sum_n sum_hw (a*g)^2``.  Lower means safer to remove.
    """
    groups = prunable_groups(net) if groups is None else groups
    if form not in ("theis", "pointwise"):
        raise ValueError(f"unknown saliency form {form!r}")
    batches = list(batches)
    if not batches:
        raise ValueError("fisher_saliency requires at least one batch")
    taps = sorted({g.tap for g in groups})
    acc = {t: 0.0 for t in taps}
    count = 0
    for images, labels in batches:
        _, gs = loss_and_grads(net, images, labels, capture=taps, train=train)
        n = len(labels)
        for t in taps:
            acc[t] = acc[t] + _saliency_terms(gs.activations[t], n, form)
        count += n
    result = {}
    for g in groups:
        scores = acc[g.tap] / count if form == "theis" else acc[g.tap]
        for c, s in enumerate(np.asarray(scores, dtype=np.float64)):
            result[(g.producer, c)] = float(s)
    return result


def _saliency_terms(pair, n, form):
    a, g = pair
    per_sample = g * n  # gradient of the summed rather than mean loss
    prod = (a * per_sample).astype(np.float64)
    if form == "theis":
        return 0.5 * (prod.sum(axis=(2, 3)) ** 2).sum(axis=0)
    return (prod ** 2).sum(axis=(0, 2, 3))


def _penalized(saliency, macs, beta):
    return saliency - beta * macs


def compression_rate(net, pairs):
    original = count_params(net).total_params
    removed = original - count_params(recast_dense(net, pairs)).total_params
    return removed, original


def channel_prune(net, dataset, removals=None, steps=None, beta=DEFAULT_BETA, lr=None,
                  prune_every=PRUNE_EVERY, batch_size=64, seed=0, target_rate=None,
                  momentum=0.0, on_removal=None):
    """Fine-tune and remove one channel every ``prune_every`` steps.

    Runs until ``removals`` channels are gone (``steps // prune_every`` when
    only ``steps`` is given) or the parameter compression rate reaches
    ``target_rate``.  The channel removed each round minimises
    ``saliency - beta * MACs_c`` (saliency accumulated over the round), so a
    large ``beta`` removes the most expensive channel first.  Removed
    channels are zeroed and frozen while fine-tuning continues; the final
    network is recast dense.  Returns ``(recast_net, ChannelRecord)``.
    """
    if removals is None and steps is None and target_rate is None:
        raise ValueError("give removals, steps or target_rate")
    if removals is None and steps is not None:
        removals = steps // prune_every
    if lr is None:
        lr = FINETUNE_LR.get(net.arch, 8e-3)
    groups = prunable_groups(net)
    if not groups:
        raise ChannelPruneError("network has no channel-prunable layers")
    work = net.copy()
    rng = make_rng(seed)
    record = ChannelRecord(original_params=count_params(net).total_params)
    pairs = []
    velocity = {}
    taps = sorted({g.tap for g in groups})
    while True:
        if removals is not None and len(pairs) >= removals:
            break
        if target_rate is not None and record.compression_rate >= target_rate:
            break
        acc = {t: 0.0 for t in taps}
        seen = [0]

        def collect(gs):
            n = len(next(iter(gs.activations.values()))[0])
            for t in taps:
                acc[t] = acc[t] + _saliency_terms(gs.activations[t], n, "theis")
            seen[0] += n

        masks = channel_masks(net, pairs) or None
        train_steps(work, dataset, lr, prune_every, batch_size, rng, masks, momentum,
                    velocity=velocity, capture=taps, on_step=collect)
        macs = channel_macs(net, pairs)
        gone = _removed_by_layer(pairs)
        best = None
        for g in groups:
            alive = [c for c in range(net.layers[g.producer].out_channels)
                     if c not in gone.get(g.producer, ())]
            if len(alive) <= 1:
                continue
            sal = acc[g.tap] / max(seen[0], 1)
            for c in alive:
                score = _penalized(float(sal[c]), macs[g.producer], beta)
                if best is None or score < best[0]:
                    best = (score, g.producer, c, float(sal[c]))
        if best is None:
            warnings.warn("every prunable layer is down to one channel; stopping", stacklevel=2)
            break
        score, layer, ch, sal = best
        pairs.append((layer, ch))
        zero_channel(work, layer, ch)
        removed, _ = compression_rate(net, pairs)
        record.removals.append(ChannelRemoval(layer, ch, sal, score))
        record.removed_params = removed
        if on_removal is not None:
            on_removal(work, record)
    final = net.copy()
    for key, arr in work.parameters():
        final.set_param(key, arr)
    return recast_dense(final, record), record


def removals_for_rate(net, rate):
    """Smallest-L1 filters to remove so the compression rate reaches ``rate``.

    The same fraction of channels is removed from every prunable group
    (always leaving one); the fraction is found by bisection.  Used to model
    channel-pruned networks without training.
    """
    if not 0 <= rate < 1:
        raise ValueError("rate must lie in [0, 1)")
    groups = prunable_groups(net)
    orders = {}
    for g in groups:
        w = net.layers[g.producer].params["weight"]
        l1 = np.abs(w.reshape(w.shape[0], -1)).sum(axis=1)
        orders[g.producer] = np.argsort(l1, kind="stable")

    def pairs_for(frac):
        out = []
        for g in groups:
            n = net.layers[g.producer].out_channels
            k = min(int(np.floor(frac * n)), n - 1)
            out.extend((g.producer, int(c)) for c in orders[g.producer][:k])
        return out

    original = count_params(net).total_params

    def achieved(frac):
        return (original - count_params(recast_dense(net, pairs_for(frac))).total_params) \
            / original

    if rate == 0:
        return []
    if achieved(1.0) < rate:
        raise ChannelPruneError(f"compression rate {rate} is out of reach for this network")
    lo, hi = 0.0, 1.0
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        if achieved(mid) >= rate:
            hi = mid
        else:
            lo = mid
    return pairs_for(hi)
