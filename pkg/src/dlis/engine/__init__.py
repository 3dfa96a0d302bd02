"""Forward-pass kernels and the parallel execution contract."""

from .executor import CONV_ALGOS, ExecConfig, ExecutionTrace, ParallelExecutor, default_threads
from .forward import (batchnorm_inference, evaluate_accuracy, forward, layer_forward, predict,
                      softmax)
from .kernels import (Im2colBuffer, conv2d_direct, conv2d_gemm, conv2d_sparse, depthwise_conv,
                      im2col, pad_input)

__all__ = [
    "CONV_ALGOS", "ExecConfig", "ExecutionTrace", "ParallelExecutor", "default_threads",
    "batchnorm_inference", "evaluate_accuracy", "forward", "layer_forward", "predict",
    "softmax", "Im2colBuffer", "conv2d_direct", "conv2d_gemm", "conv2d_sparse",
    "depthwise_conv", "im2col", "pad_input",
]
