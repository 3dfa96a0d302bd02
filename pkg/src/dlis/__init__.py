"""dlis: a small CNN inference, compression and benchmarking stack.

Networks are :class:`~dlis.graph.NetworkSpec` objects built by
:func:`~dlis.graph.build_network`; inference runs through
:func:`~dlis.engine.forward`, training through :mod:`dlis.train`, and the
three compression techniques live in :mod:`dlis.compression`.
"""

from .engine import ExecConfig, evaluate_accuracy, forward, predict
from .errors import (ChannelPruneError, ConfigError, DatasetError, DeterminismError, DlisError,
                     GeometryError, ModelFormatError, ShapeError)
from .graph import (ARCHS, LayerSpec, NetworkSpec, build_network, count_macs, count_params,
                    layer_inventory, validate)
from .tensor import CsrMatrix, csr_from_dense, csr_to_dense, gemm, spmm

__version__ = "0.1.0"

__all__ = [
    "ARCHS", "ChannelPruneError", "ConfigError", "CsrMatrix", "DatasetError",
    "DeterminismError", "DlisError", "ExecConfig", "GeometryError", "LayerSpec",
    "ModelFormatError", "NetworkSpec", "ShapeError", "build_network", "count_macs",
    "count_params", "csr_from_dense", "csr_to_dense", "evaluate_accuracy", "forward", "gemm",
    "layer_inventory", "predict", "spmm", "validate",
]
