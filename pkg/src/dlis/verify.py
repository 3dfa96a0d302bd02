"""Self-check suites run by ``dlis verify``: kernels, gradients, formats."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .bench import BenchRecord, emit_csv, parse_csv, rounded
from .compression import magnitude_prune, to_sparse_format
from .engine import conv2d_direct, conv2d_gemm, conv2d_sparse, forward
from .errors import ModelFormatError
from .graph import LayerSpec, NetworkSpec, build_network, make_batchnorm, make_conv, make_fc
from .graph import validate
from .io.modelfile import from_bytes, to_bytes
from .tensor import csr_from_dense, csr_to_dense, make_rng, spmm
from .train import finite_diff_check

KERNEL_TOL = 1e-4
GRAD_TOL = 1e-5
SUITES = ("kernels", "gradients", "formats")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_conv_case(rng, max_c=16, max_hw=16):
    """One random geometry from the acceptance envelope."""
    while True:
        c = int(rng.integers(1, max_c + 1))
        o = int(rng.integers(1, max_c + 1))
        h = int(rng.integers(1, max_hw + 1))
        w = int(rng.integers(1, max_hw + 1))
        k = int(rng.choice([1, 3]))
        pad = int(rng.choice([0, 1]))
        stride = int(rng.choice([1, 2]))
        if h + 2 * pad >= k and w + 2 * pad >= k:
            break
    n = int(rng.integers(1, 3))
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    wt = rng.standard_normal((o, c, k, k)).astype(np.float32)
    wt[rng.random(wt.shape) < rng.uniform(0, 0.9)] = 0
    b = rng.standard_normal(o).astype(np.float32)
    return x, wt, b, stride, pad


def kernel_equivalence(cases=100, seed=0):
    """Largest ``|direct - gemm|`` and ``|gemm - sparse|`` over random geometries."""
    rng = make_rng(seed)
    worst_dg = worst_gs = 0.0
    for _ in range(cases):
        x, w, b, s, p = random_conv_case(rng)
        d = conv2d_direct(x, w, b, s, p)
        g = conv2d_gemm(x, w, b, s, p)
        csr = csr_from_dense(w.reshape(w.shape[0], -1))
        sp = conv2d_sparse(x, csr, w.shape[2], b, s, p)
        worst_dg = max(worst_dg, float(np.max(np.abs(d - g))))
        worst_gs = max(worst_gs, float(np.max(np.abs(g - sp))))
    return worst_dg, worst_gs


def suite_kernels(seed=0):
    worst_dg, worst_gs = kernel_equivalence(100, seed)
    out = [CheckResult("direct_vs_gemm", worst_dg <= KERNEL_TOL, f"max abs diff {worst_dg:.3e}"),
           CheckResult("gemm_vs_sparse", worst_gs <= KERNEL_TOL, f"max abs diff {worst_gs:.3e}")]
    rng = make_rng(seed + 1)
    worst = 0.0
    for _ in range(50):
        m = rng.standard_normal((int(rng.integers(1, 20)), int(rng.integers(1, 20))))
        m[rng.random(m.shape) < 0.6] = 0
        b = rng.standard_normal((m.shape[1], int(rng.integers(1, 6))))
        a = csr_from_dense(m)
        ok = np.array_equal(csr_to_dense(a), m)
        worst = max(worst, float(np.max(np.abs(spmm(a, b) - m @ b))) if ok else np.inf)
    out.append(CheckResult("spmm_vs_dense", worst <= 1e-12, f"max abs diff {worst:.3e}"))
    return out


def toy_gradient_net(seed=0):
    """conv+BN+relu+pool+FC in float64, the gradient-check network."""
    rng = make_rng(seed)
    layers = [make_conv(2, 3, 3, 1, 1, rng=rng, dtype=np.float64), make_batchnorm(3, np.float64),
              LayerSpec("relu"), LayerSpec("maxpool2d", kernel=2, stride=2),
              make_fc(3 * 2 * 2, 3, rng=rng, dtype=np.float64)]
    bn = layers[1].params
    bn["gamma"] = rng.uniform(0.5, 1.5, 3)
    bn["beta"] = rng.standard_normal(3) * 0.1
    layers[0].params["bias"] = rng.standard_normal(3) * 0.1
    layers[4].params["bias"] = rng.standard_normal(3) * 0.1
    return validate(NetworkSpec("toy", layers, (2, 4, 4), 3))


def gradient_error(seed=0):
    rng = make_rng(seed + 7)
    net = toy_gradient_net(seed)
    x = rng.standard_normal((4, 2, 4, 4))
    y = rng.integers(0, 3, size=4)
    return finite_diff_check(net, x, y, eps=1e-5)


def suite_gradients(seed=0):
    err = gradient_error(seed)
    return [CheckResult("finite_difference", err <= GRAD_TOL, f"max relative error {err:.3e}")]


def suite_formats(seed=0):
    out = []
    net = build_network("resnet18", 0.125, seed=seed)
    pruned, _ = magnitude_prune(net, sparsity=0.7)
    sparse = to_sparse_format(pruned)
    for label, n in (("dense", net), ("csr", sparse)):
        data = to_bytes(n)
        back, _ = from_bytes(data)
        same = all(np.array_equal(a, back.get_param(k)) and a.dtype == back.get_param(k).dtype
                   for k, a in n.parameters())
        same = same and to_bytes(back) == data
        x = make_rng(seed).standard_normal((1,) + n.input_shape).astype(np.float32)
        same = same and np.array_equal(forward(n, x), forward(back, x))
        out.append(CheckResult(f"modelfile_roundtrip_{label}", same, f"{len(data)} bytes"))
    try:
        from_bytes(to_bytes(net)[:-9])
        out.append(CheckResult("modelfile_truncation", False, "truncated file parsed"))
    except ModelFormatError as exc:
        out.append(CheckResult("modelfile_truncation", exc.offset is not None, str(exc)))
    rng = make_rng(seed)
    recs = []
    for i in range(5):
        lo = int(rng.integers(1, 1000))
        recs.append(BenchRecord("m", "weight_prune", float(rng.random()), "csr", i + 1, 3, lo + 5,
                                lo, lo + 9, None if i == 0 else float(rng.random()), 100, 40,
                                999, float(rng.uniform(1, 5)), float(rng.uniform(0.5, 2))))
    fd, path = tempfile.mkstemp(suffix=".csv")
    os.close(fd)
    try:
        emit_csv(recs, path)
        ok = parse_csv(path) == [rounded(r) for r in recs]
    finally:
        os.unlink(path)
    out.append(CheckResult("csv_roundtrip", ok, f"{len(recs)} records"))
    return out


def run_suite(name, seed=0):
    if name == "all":
        return [r for s in SUITES for r in run_suite(s, seed)]
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; expected one of {SUITES} or 'all'")
    return {"kernels": suite_kernels, "gradients": suite_gradients,
            "formats": suite_formats}[name](seed)
