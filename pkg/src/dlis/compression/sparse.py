"""Conversion of (pruned or ternary) networks to CSR weight storage."""

from __future__ import annotations

from ..graph import CONV_KINDS, NetworkSpec, validate
from ..tensor import csr_from_dense
from .pruning import parameter_sparsity, weight_sparsity


def _convert(layer):
    layer.csr = csr_from_dense(layer.weight_matrix())
    layer.weight_format = "csr"


def to_sparse_format(net: NetworkSpec, include_fc=False) -> NetworkSpec:
    """Copy of ``net`` with conv filter matrices (and optionally FC) stored as CSR.

    The dense arrays are kept alongside so every execution path stays
    available; ``sparse_csr`` execution reads only the CSR copy.
    """
    net = net.copy()
    for layer in net.layers:
        if layer.kind in CONV_KINDS or (include_fc and layer.kind == "fully_connected"):
            _convert(layer)
        for sub in layer.shortcut:
            if sub.kind == "conv2d":
                _convert(sub)
    return validate(net)


def to_dense_format(net: NetworkSpec) -> NetworkSpec:
    net = net.copy()
    for layer in net.layers:
        for item in [layer] + list(layer.shortcut):
            item.csr = None
            item.weight_format = "dense"
    return validate(net)


def sparsity_report(net: NetworkSpec) -> dict:
    """Both readings of "sparsity": conv weights only and every parameter."""
    return {"conv_weights": weight_sparsity(net, include_fc=False),
            "weights": weight_sparsity(net, include_fc=True),
            "all_params": parameter_sparsity(net)}
