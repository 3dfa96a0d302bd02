"""Memory-footprint model and operation-count speedup predictions.

Every real and every index is counted as 4 bytes.  Buffers are counted at
the chosen batch size: each layer's output activation (plus the network
input), the zero-padded copy every conv kernel makes of its input, and for
the lowered algorithms the im2col matrix of each conv layer.  No buffer
reuse is assumed, so the totals are an upper bound on live memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..graph import CONV_KINDS, NetworkSpec, count_macs, input_shape_of, validate

REAL_BYTES = 4
INDEX_BYTES = 4
GRANULARITIES = ("per_filter_csr", "per_layer_csr")
CATEGORIES = ("weights_dense", "weights_sparse", "biases", "bn_params", "activation_buffers",
              "padding_buffers", "im2col_buffers")


def dense_filter_bytes(k: int) -> int:
    return REAL_BYTES * k * k


def per_filter_csr_bytes(nnz: int, k: int) -> int:
    """Values, column indices and ``K + 1`` row pointers of one ``K x K`` filter."""
    return REAL_BYTES * nnz + INDEX_BYTES * nnz + INDEX_BYTES * (k + 1)


def per_layer_csr_bytes(nnz: int, rows: int) -> int:
    return REAL_BYTES * nnz + INDEX_BYTES * nnz + INDEX_BYTES * (rows + 1)


def csr_break_even(k: int) -> int:
    """Largest filter nnz for which per-filter CSR is smaller than dense."""
    nnz = 0
    while per_filter_csr_bytes(nnz + 1, k) < dense_filter_bytes(k):
        nnz += 1
    return nnz if per_filter_csr_bytes(nnz, k) < dense_filter_bytes(k) else -1


@dataclass
class LayerFootprint:
    index: int
    kind: str
    weights_dense: int = 0
    weights_sparse: int = 0
    sparse_values: int = 0
    sparse_col_idx: int = 0
    sparse_row_ptr: int = 0
    biases: int = 0
    bn_params: int = 0
    activation_buffers: int = 0
    padding_buffers: int = 0
    im2col_buffers: int = 0

    @property
    def total(self) -> int:
        return sum(getattr(self, c) for c in CATEGORIES)


@dataclass
class FootprintReport:
    algo: str
    granularity: str
    batch: int
    layers: list = field(default_factory=list)

    def category(self, name) -> int:
        return sum(getattr(layer, name) for layer in self.layers)

    @property
    def totals(self) -> dict:
        return {c: self.category(c) for c in CATEGORIES}

    @property
    def weight_bytes(self) -> int:
        return self.category("weights_dense") + self.category("weights_sparse")

    @property
    def model_bytes(self) -> int:
        """Weights, biases and batch-norm arrays."""
        return self.weight_bytes + self.category("biases") + self.category("bn_params")

    @property
    def buffer_bytes(self) -> int:
        return sum(self.category(c) for c in
                   ("activation_buffers", "padding_buffers", "im2col_buffers"))

    @property
    def total(self) -> int:
        return sum(self.totals.values())

    def format(self) -> str:
        lines = [f"footprint algo={self.algo} granularity={self.granularity} batch={self.batch}",
                 "layer kind " + " ".join(CATEGORIES) + " total"]
        for lf in self.layers:
            lines.append(f"{lf.index} {lf.kind} " + " ".join(str(getattr(lf, c)) for c in
                                                           CATEGORIES) + f" {lf.total}")
        lines.append("total - " + " ".join(str(v) for v in self.totals.values())
                     + f" {self.total}")
        return "\n".join(lines)


def _weight_bytes(lf, layer, granularity):
    w = layer.params["weight"]
    if layer.weight_format != "csr":
        lf.weights_dense += REAL_BYTES * w.size
        return
    nnz = int(np.count_nonzero(w))
    if layer.kind in CONV_KINDS and granularity == "per_filter_csr":
        k = layer.kernel
        slices = w.shape[0] * w.shape[1]
        ptr = INDEX_BYTES * (k + 1) * slices
    else:
        ptr = INDEX_BYTES * (w.shape[0] + 1)
    lf.sparse_values += REAL_BYTES * nnz
    lf.sparse_col_idx += INDEX_BYTES * nnz
    lf.sparse_row_ptr += ptr
    lf.weights_sparse += REAL_BYTES * nnz + INDEX_BYTES * nnz + ptr


def _param_bytes(lf, layer, in_shape, out_shape, algo, granularity, batch):
    if layer.kind in CONV_KINDS + ("fully_connected",):
        _weight_bytes(lf, layer, granularity)
        if "bias" in layer.params:
            lf.biases += REAL_BYTES * layer.params["bias"].size
    if layer.kind == "batchnorm":
        lf.bn_params += REAL_BYTES * sum(arr.size for arr in layer.params.values())
    if layer.kind in CONV_KINDS:
        c, h, w = in_shape
        if layer.pad:
            lf.padding_buffers += REAL_BYTES * batch * c * (h + 2 * layer.pad) * (w + 2 * layer.pad)
        if layer.kind == "conv2d" and algo in ("im2col_gemm", "sparse_csr"):
            _, oh, ow = out_shape
            lf.im2col_buffers += REAL_BYTES * batch * c * layer.kernel ** 2 * oh * ow


def footprint(net: NetworkSpec, algo="direct", granularity="per_filter_csr",
              batch=1) -> FootprintReport:
    """Predicted bytes per layer and category for running ``net`` with ``algo``."""
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}")
    validate(net)
    report = FootprintReport(algo, granularity, batch)
    for i, layer in enumerate(net.layers):
        lf = LayerFootprint(i, layer.kind)
        in_shape = input_shape_of(net, i)
        out_shape = net.shapes[i]
        if i == 0:
            lf.activation_buffers += REAL_BYTES * batch * int(np.prod(in_shape))
        lf.activation_buffers += REAL_BYTES * batch * int(np.prod(out_shape))
        _param_bytes(lf, layer, in_shape, out_shape, algo, granularity, batch)
        if layer.kind == "residual_add":
            branch = tuple(net.input_shape) if layer.skip_from == -1 else net.shapes[layer.skip_from]
            for sub in layer.shortcut:
                _param_bytes(lf, sub, branch, out_shape, algo, granularity, batch)
                lf.activation_buffers += REAL_BYTES * batch * int(np.prod(out_shape))
        report.layers.append(lf)
    return report


def _is_csr(layer):
    return layer.weight_format == "csr" or any(s.weight_format == "csr" for s in layer.shortcut)


def effective_macs(net_or_report, sparse=True) -> int:
    """MACs actually executed.

    With ``sparse`` a network's CSR layers count only non-zero-weight
    multiplies (dense layers count in full); a bare cost report counts
    non-zero multiplies everywhere.  Otherwise every MAC counts.
    """
    if hasattr(net_or_report, "effective_macs"):
        c = net_or_report
        return c.effective_macs if sparse else c.total_macs
    c = count_macs(net_or_report)
    if not sparse:
        return c.total_macs
    return int(sum(e if _is_csr(layer) else m for layer, m, e in
                   zip(net_or_report.layers, c.per_layer_macs, c.per_layer_effective_macs)))


def expected_speedup(dense, compressed=None, sparse=True) -> float:
    """Operation-count speedup ``dense MACs / effective MACs``.

    ``dense`` and ``compressed`` are networks or cost reports.  With
    ``sparse`` the effective MACs count only multiplies by non-zero weights
    (a sparse kernel skips the rest); otherwise every MAC of ``compressed``
    counts, so a recast channel-pruned network gives the plain MAC ratio.
    With one argument the network is compared against its own dense cost.
    """
    d = dense if hasattr(dense, "total_macs") else count_macs(dense)
    eff = effective_macs(d if compressed is None else compressed, sparse)
    if eff == 0:
        return float("inf")
    return d.total_macs / eff


def expected_speedup_uniform(sparsity: float) -> float:
    """Speedup predicted when every weight layer has the same sparsity."""
    if not 0 <= sparsity < 1:
        raise ValueError("sparsity must lie in [0, 1)")
    return 1.0 / (1.0 - sparsity)
