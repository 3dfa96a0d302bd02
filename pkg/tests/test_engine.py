import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlis import build_network, forward
from dlis.compression import magnitude_prune, to_sparse_format
from dlis.engine import (ExecConfig, ExecutionTrace, ParallelExecutor, conv2d_direct,
                         conv2d_gemm, conv2d_sparse, depthwise_conv, evaluate_accuracy, im2col,
                         pad_input, predict, softmax)
from dlis.errors import ConfigError, ShapeError
from dlis.io import synth_dataset
from dlis.tensor import csr_from_dense, make_rng


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    return out + (0 if b is None else b[None, :, None, None])


def test_conv_one_hot_oracle():
    # a single 1 at the centre picks out the filter's centre tap
    x = np.zeros((1, 1, 3, 3), dtype=np.float32)
    x[0, 0, 1, 1] = 1
    w = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    assert conv2d_direct(x, w, None, 1, 0)[0, 0, 0, 0] == 4.0
    out = conv2d_direct(x, w, None, 1, 1)
    assert out[0, 0].tolist() == [[8, 7, 6], [5, 4, 3], [2, 1, 0]]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_algorithms_match_naive(seed):
    rng = make_rng(seed)
    c, o = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    h = int(rng.integers(3, 9))
    k, stride, pad = int(rng.choice([1, 3])), int(rng.choice([1, 2])), int(rng.choice([0, 1]))
    x = rng.standard_normal((2, c, h, h))
    w = rng.standard_normal((o, c, k, k))
    w[rng.random(w.shape) < 0.5] = 0
    b = rng.standard_normal(o)
    ref = naive_conv(x, w, b, stride, pad)
    np.testing.assert_allclose(conv2d_direct(x, w, b, stride, pad), ref, atol=1e-10)
    np.testing.assert_allclose(conv2d_gemm(x, w, b, stride, pad), ref, atol=1e-10)
    sp = conv2d_sparse(x, csr_from_dense(w.reshape(o, -1)), k, b, stride, pad)
    np.testing.assert_allclose(sp, ref, atol=1e-10)


def test_depthwise_algorithms_agree():
    rng = make_rng(2)
    x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 1, 3, 3)).astype(np.float32)
    w[0, 0, 0] = 0
    ref = depthwise_conv(x, w, None, 2, 1)
    for algo in ("im2col_gemm", "sparse_csr"):
        got = depthwise_conv(x, w, None, 2, 1, algo=algo, w_csr=csr_from_dense(w.reshape(4, 9)))
        np.testing.assert_allclose(got, ref, atol=1e-5)
    manual = naive_conv(x[:, 1:2], w[1:2], None, 2, 1)
    np.testing.assert_allclose(ref[:, 1:2], manual, atol=1e-5)


def test_depthwise_shape_errors():
    with pytest.raises(ShapeError):
        depthwise_conv(np.ones((1, 3, 4, 4)), np.ones((2, 1, 3, 3)))
    with pytest.raises(ShapeError):
        depthwise_conv(np.ones((1, 2, 4, 4)), np.ones((2, 1, 3, 3)), algo="sparse_csr")


def test_im2col_layout():
    x = np.arange(16.0).reshape(1, 4, 4)
    buf = im2col(x, 3, 1, 0)
    assert buf.matrix.shape == (9, 4)
    assert buf.matrix[:, 0].tolist() == [0, 1, 2, 4, 5, 6, 8, 9, 10]


def test_pad_input():
    assert pad_input(np.ones((1, 1, 2, 2)), 1).shape == (1, 1, 4, 4)


def test_conv_rejects_mismatched_channels():
    with pytest.raises(ShapeError):
        conv2d_direct(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_exec_config_validation():
    with pytest.raises(ConfigError):
        ExecConfig(threads=0)
    with pytest.raises(ConfigError):
        ExecConfig(conv_algo="winograd")


def test_sparse_csr_needs_csr_layers(image):
    net = build_network("tiny")
    with pytest.raises(ConfigError):
        forward(net, image, ExecConfig(conv_algo="sparse_csr"))


@pytest.mark.parametrize("arch", ["tiny", "resnet18", "mobilenet"])
def test_thread_counts_bitwise_equal(arch, image):
    net = build_network(arch, 0.125, seed=1)
    sparse = to_sparse_format(magnitude_prune(net, sparsity=0.6)[0])
    for algo, n in (("direct", net), ("im2col_gemm", net), ("sparse_csr", sparse)):
        ref = forward(n, image, ExecConfig(1, algo))
        for t in (2, 3, 8):
            assert np.array_equal(forward(n, image, ExecConfig(t, algo, chunking=2)), ref)


def test_algorithms_agree_on_network(image):
    net = build_network("resnet18", 0.125, seed=3)
    sparse = to_sparse_format(net)
    d = forward(net, image, ExecConfig(conv_algo="direct"))
    g = forward(net, image, ExecConfig(conv_algo="im2col_gemm"))
    s = forward(sparse, image, ExecConfig(conv_algo="sparse_csr"))
    np.testing.assert_allclose(d, g, atol=1e-4)
    np.testing.assert_allclose(g, s, atol=1e-4)


def test_layers_run_as_barriers(image):
    net = build_network("tiny")
    trace = ExecutionTrace()
    forward(net, np.repeat(image, 4, axis=0), ExecConfig(threads=4), trace=trace)
    tags = [t for t in trace.tags() if t is not None]
    assert tags
    for a, b in zip(tags, tags[1:]):
        assert trace.span(a)[1] < trace.span(b)[0]


def test_executor_runs_every_item_once():
    seen = []
    with ParallelExecutor(4, chunking=3) as ex:
        ex.run(50, seen.append)
    assert sorted(seen) == list(range(50))


def test_forward_rejects_wrong_input_shape():
    with pytest.raises(ShapeError):
        forward(build_network("tiny"), np.ones((1, 3, 16, 16), dtype=np.float32))


def test_softmax_rows_sum_to_one():
    p = softmax(np.array([[1000.0, 1000.0], [0.0, np.log(3.0)]]))
    np.testing.assert_allclose(p, [[0.5, 0.5], [0.25, 0.75]])


def test_accuracy_and_predict():
    ds = synth_dataset(0, 20, classes=3)
    net = build_network("tiny", num_classes=3)
    preds = predict(net, ds.images, batch_size=7)
    assert preds.shape == (20,)
    assert evaluate_accuracy(net, ds) == float(np.mean(preds == ds.labels))
