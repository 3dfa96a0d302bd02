"""Network topologies, shape inference and operation/parameter counting.

A network is an ordered list of :class:`LayerSpec` objects.  Every layer
consumes the output of the layer before it; a ``residual_add`` layer also
consumes the output of ``skip_from`` (``-1`` is the network input), passed
through its optional projection ``shortcut`` layers.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import CsrMatrix, make_rng, resolve_dtype

LAYER_KINDS = (
    "conv2d",
    "depthwise_conv2d",
    "fully_connected",
    "maxpool2d",
    "avgpool2d",
    "batchnorm",
    "relu",
    "residual_add",
    "softmax",
)
CONV_KINDS = ("conv2d", "depthwise_conv2d")
WEIGHTED_KINDS = CONV_KINDS + ("fully_connected",)
ARCHS = ("vgg16_cifar", "resnet18", "mobilenet", "tiny")

BN_PARAMS = ("gamma", "beta", "mean", "var")


@dataclass
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    weight_format: str = "dense"
    params: dict = field(default_factory=dict)
    skip_from: int | None = None
    shortcut: list = field(default_factory=list)
    csr: CsrMatrix | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.weight_format not in ("dense", "csr"):
            raise ValueError(f"unknown weight format {self.weight_format!r}")

    @property
    def groups(self) -> int:
        return self.in_channels if self.kind == "depthwise_conv2d" else 1

    @property
    def weight(self):
        return self.params.get("weight")

    @property
    def bias(self):
        return self.params.get("bias")

    def weight_matrix(self) -> np.ndarray:
        """Filters flattened to ``(out, in/groups * K * K)`` (or FC ``(out, in)``)."""
        w = self.params["weight"]
        return w.reshape(w.shape[0], -1)

    def expected_weight_shape(self):
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if self.kind == "depthwise_conv2d":
            return (self.out_channels, 1, self.kernel, self.kernel)
        if self.kind == "fully_connected":
            return (self.out_channels, self.in_channels)
        return None

    def param_items(self, prefix=""):
        """Yield ``(name, array)`` for this layer and its shortcut layers."""
        for pname, arr in self.params.items():
            yield prefix + pname, arr
        for j, sub in enumerate(self.shortcut):
            yield from sub.param_items(f"{prefix}shortcut.{j}.")


@dataclass
class NetworkSpec:
    name: str
    layers: list
    input_shape: tuple
    num_classes: int
    arch: str = "custom"
    shapes: list | None = None

    @property
    def skips(self):
        return [(layer.skip_from, i) for i, layer in enumerate(self.layers)
                if layer.kind == "residual_add"]

    @property
    def dtype(self):
        for _, arr in self.parameters():
            return arr.dtype
        return np.dtype(np.float32)

    def parameters(self):
        """Yield ``(key, array)`` pairs; keys look like ``"3.weight"``."""
        for i, layer in enumerate(self.layers):
            for pname, arr in layer.param_items():
                yield f"{i}.{pname}", arr

    def get_param(self, key):
        layer, name = self.resolve(key)
        return layer.params[name]

    def set_param(self, key, value):
        layer, name = self.resolve(key)
        layer.params[name] = value

    def resolve(self, key):
        """Return ``(layer, param_name)`` addressed by a parameter key."""
        parts = key.split(".")
        layer = self.layers[int(parts[0])]
        parts = parts[1:]
        while parts[0] == "shortcut":
            layer = layer.shortcut[int(parts[1])]
            parts = parts[2:]
        return layer, parts[0]

    def conv_layers(self):
        """Indices of every conv/depthwise layer in the main path."""
        return [i for i, layer in enumerate(self.layers) if layer.kind in CONV_KINDS]

    def copy(self) -> "NetworkSpec":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "NetworkSpec":
        dtype = resolve_dtype(dtype)
        net = self.copy()
        for i, layer in enumerate(net.layers):
            _cast_layer(layer, dtype)
        return net


def _cast_layer(layer, dtype):
    for k, v in layer.params.items():
        layer.params[k] = v.astype(dtype)
    if layer.csr is not None:
        c = layer.csr
        layer.csr = CsrMatrix(c.rows, c.cols, c.values.astype(dtype), c.col_idx, c.row_ptr)
    for sub in layer.shortcut:
        _cast_layer(sub, dtype)


# -- shape inference ---------------------------------------------------------

def conv_output_size(size, kernel, stride, pad, layer_index=None):
    """Spatial output extent ``floor((size + 2*pad - kernel) / stride) + 1``."""
    from .errors import GeometryError

    if stride < 1 or pad < 0 or kernel < 1:
        raise GeometryError(f"invalid window kernel={kernel} stride={stride} pad={pad}",
                            layer_index)
    span = size + 2 * pad - kernel
    if span < 0:
        raise GeometryError(f"window {kernel} with pad {pad} does not fit extent {size}",
                            layer_index)
    return span // stride + 1


def _layer_output_shape(layer, shape, i):
    c, h, w = shape
    kind = layer.kind
    if kind in CONV_KINDS:
        if c != layer.in_channels:
            raise ShapeError(f"{kind} expects {layer.in_channels} input channels, got {c}", i)
        if kind == "depthwise_conv2d" and layer.out_channels != layer.in_channels:
            raise ShapeError("depthwise conv must preserve channel count", i)
        oh = conv_output_size(h, layer.kernel, layer.stride, layer.pad, i)
        ow = conv_output_size(w, layer.kernel, layer.stride, layer.pad, i)
        return (layer.out_channels, oh, ow)
    if kind == "fully_connected":
        if c * h * w != layer.in_channels:
            raise ShapeError(f"fully_connected expects {layer.in_channels} inputs, "
                             f"got {c}x{h}x{w}={c * h * w}", i)
        return (layer.out_channels, 1, 1)
    if kind in ("maxpool2d", "avgpool2d"):
        oh = conv_output_size(h, layer.kernel, layer.stride, 0, i)
        ow = conv_output_size(w, layer.kernel, layer.stride, 0, i)
        return (c, oh, ow)
    if kind == "batchnorm":
        if layer.in_channels != c:
            raise ShapeError(f"batchnorm over {layer.in_channels} channels fed {c}", i)
        return shape
    return shape  # relu, softmax, residual_add handled by caller


def _check_params(layer, i):
    expected = layer.expected_weight_shape()
    if expected is not None:
        w = layer.params.get("weight")
        if w is None or tuple(w.shape) != expected:
            got = None if w is None else tuple(w.shape)
            raise ShapeError(f"{layer.kind} weight has shape {got}, expected {expected}", i)
        b = layer.params.get("bias")
        if b is not None and b.shape != (layer.out_channels,):
            raise ShapeError(f"bias has shape {b.shape}, expected ({layer.out_channels},)", i)
        if layer.weight_format == "csr":
            rows, cols = layer.weight_matrix().shape
            if layer.csr is None or layer.csr.shape != (rows, cols):
                raise ShapeError("csr weight missing or mis-shaped", i)
    if layer.kind == "batchnorm":
        for pname in BN_PARAMS:
            arr = layer.params.get(pname)
            if arr is None or arr.shape != (layer.in_channels,):
                raise ShapeError(f"batchnorm parameter {pname} missing or mis-shaped", i)
        if np.any(layer.params["var"] < 0):
            raise ShapeError("batchnorm running variance must be non-negative", i)


def validate(spec: NetworkSpec) -> NetworkSpec:
    """Infer every activation shape; raise :class:`ShapeError` on the first mismatch.

    The inferred ``(C, H, W)`` output of each layer is stored on
    ``spec.shapes`` and the same spec is returned.
    """
    shapes = []
    shape = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        _check_params(layer, i)
        if layer.kind == "residual_add":
            src = layer.skip_from
            if src is None or not -1 <= src < i:
                raise ShapeError(f"residual_add skip source {src} is not an earlier layer", i)
            branch = tuple(spec.input_shape) if src == -1 else shapes[src]
            for j, sub in enumerate(layer.shortcut):
                _check_params(sub, i)
                if sub.kind not in ("conv2d", "batchnorm"):
                    raise ShapeError(f"shortcut layer {j} must be conv2d or batchnorm", i)
                branch = _layer_output_shape(sub, branch, i)
            if branch != shape:
                raise ShapeError(f"residual_add branch shapes differ: {branch} vs {shape}", i)
        else:
            shape = _layer_output_shape(layer, shape, i)
        shapes.append(shape)
    if shape[0] * shape[1] * shape[2] != spec.num_classes:
        raise ShapeError(f"network output {shape} does not match {spec.num_classes} classes",
                         len(spec.layers) - 1 if spec.layers else None)
    spec.shapes = shapes
    return spec


def input_shape_of(spec, i):
    """Input ``(C, H, W)`` of layer ``i`` (requires a validated spec)."""
    if spec.shapes is None:
        validate(spec)
    return tuple(spec.input_shape) if i == 0 else spec.shapes[i - 1]


# -- cost accounting ---------------------------------------------------------

@dataclass
class CostReport:
    """Per-layer MAC/parameter counts; FLOPs are reported as 2 x MACs."""

    per_layer_macs: list
    per_layer_params: list
    per_layer_nnz: list
    per_layer_effective_macs: list

    @property
    def total_macs(self) -> int:
        return int(sum(self.per_layer_macs))

    @property
    def total_params(self) -> int:
        return int(sum(self.per_layer_params))

    @property
    def total_nnz(self) -> int:
        return int(sum(self.per_layer_nnz))

    @property
    def effective_macs(self) -> int:
        return int(sum(self.per_layer_effective_macs))

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    def summary(self) -> str:
        return (f"MACs={self.total_macs} (FLOPs=2*MACs={self.total_flops}) "
                f"effective_MACs={self.effective_macs} params={self.total_params}")


def _weighted_costs(layer, in_shape, out_shape):
    """``(macs, effective_macs, nnz)`` of one weighted layer."""
    _, oh, ow = out_shape
    w = layer.params["weight"]
    nnz = int(np.count_nonzero(w))
    if layer.kind == "fully_connected":
        return layer.in_channels * layer.out_channels, nnz, nnz
    per_pos = layer.out_channels * (layer.in_channels // layer.groups) * layer.kernel ** 2
    return per_pos * oh * ow, nnz * oh * ow, nnz


def _param_count(layer) -> int:
    n = sum(int(arr.size) for arr in layer.params.values())
    return n + sum(_param_count(sub) for sub in layer.shortcut)


def cost_report(spec: NetworkSpec) -> CostReport:
    validate(spec)
    macs, params, nnzs, eff = [], [], [], []
    for i, layer in enumerate(spec.layers):
        in_shape = input_shape_of(spec, i)
        m = e = z = 0
        if layer.kind in WEIGHTED_KINDS:
            m, e, z = _weighted_costs(layer, in_shape, spec.shapes[i])
        elif layer.kind == "residual_add":
            branch = tuple(spec.input_shape) if layer.skip_from == -1 else spec.shapes[layer.skip_from]
            for sub in layer.shortcut:
                nxt = _layer_output_shape(sub, branch, i)
                if sub.kind == "conv2d":
                    sm, se, sz = _weighted_costs(sub, branch, nxt)
                    m, e, z = m + sm, e + se, z + sz
                branch = nxt
        macs.append(int(m))
        eff.append(int(e))
        nnzs.append(int(z))
        params.append(_param_count(layer))
    return CostReport(macs, params, nnzs, eff)


def count_macs(spec: NetworkSpec) -> CostReport:
    """Conv MACs are ``out_C*out_H*out_W*(in_C/groups)*K*K``; FC MACs ``in*out``."""
    return cost_report(spec)


def count_params(spec: NetworkSpec) -> CostReport:
    """Weights + biases + the four batch-norm arrays of every layer."""
    return cost_report(spec)


# -- construction ------------------------------------------------------------

def scale_channels(c: int, width_scale: float) -> int:
    """Round-half-up of ``c * width_scale``, never below 1."""
    return max(1, int(np.floor(c * width_scale + 0.5)))


class _Builder:
    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.layers = []

    def _normal(self, shape, fan_in):
        std = np.sqrt(2.0 / fan_in)
        return (self.rng.standard_normal(shape) * std).astype(self.dtype)

    def conv(self, cin, cout, k, stride=1, pad=None, bias=True, depthwise=False):
        self.layers.append(make_conv(cin, cout, k, stride, k // 2 if pad is None else pad,
                                     bias, depthwise, self.rng, self.dtype))
        return len(self.layers) - 1

    def bn(self, c):
        self.layers.append(make_batchnorm(c, self.dtype))

    def relu(self):
        self.layers.append(LayerSpec("relu"))

    def maxpool(self, k=2, s=2):
        self.layers.append(LayerSpec("maxpool2d", kernel=k, stride=s))

    def avgpool(self, k):
        self.layers.append(LayerSpec("avgpool2d", kernel=k, stride=k))

    def fc(self, cin, cout):
        self.layers.append(make_fc(cin, cout, self.rng, self.dtype))


def make_conv(cin, cout, k, stride=1, pad=0, bias=True, depthwise=False, rng=None,
              dtype=np.float32) -> LayerSpec:
    """Conv layer with Kaiming fan-in initialisation from ``rng``."""
    rng = make_rng(0) if rng is None else rng
    kind = "depthwise_conv2d" if depthwise else "conv2d"
    cin_g = 1 if depthwise else cin
    fan_in = cin_g * k * k
    shape = (cout, cin_g, k, k)
    w = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    params = {"weight": w}
    if bias:
        params["bias"] = np.zeros(cout, dtype=dtype)
    return LayerSpec(kind, cin, cout, k, stride, pad, params=params)


def make_batchnorm(c, dtype=np.float32) -> LayerSpec:
    return LayerSpec("batchnorm", c, c, params={
        "gamma": np.ones(c, dtype=dtype), "beta": np.zeros(c, dtype=dtype),
        "mean": np.zeros(c, dtype=dtype), "var": np.ones(c, dtype=dtype)})


def make_fc(cin, cout, rng=None, dtype=np.float32) -> LayerSpec:
    rng = make_rng(0) if rng is None else rng
    w = (rng.standard_normal((cout, cin)) * np.sqrt(2.0 / cin)).astype(dtype)
    return LayerSpec("fully_connected", cin, cout,
                     params={"weight": w, "bias": np.zeros(cout, dtype=dtype)})


_VGG16_CHANNELS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
_VGG16_POOL_AFTER = (2, 4, 7, 10, 13)
_MOBILENET_BLOCKS = ((64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
                     (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1))


def _vgg16(b, s, input_shape, num_classes):
    cin, h, _ = input_shape
    for n, c in enumerate(_VGG16_CHANNELS, start=1):
        c = scale_channels(c, s)
        b.conv(cin, c, 3)
        b.relu()
        cin = c
        if n in _VGG16_POOL_AFTER:
            b.maxpool()
            h //= 2
    hidden = scale_channels(512, s)
    b.fc(cin * h * h, hidden)
    b.relu()
    b.fc(hidden, num_classes)


def _resnet18(b, s, input_shape, num_classes):
    cin, h, _ = input_shape
    c = scale_channels(64, s)
    b.conv(cin, c, 3, bias=False)
    b.bn(c)
    b.relu()
    cin = c
    for stage, base in enumerate((64, 128, 256, 512)):
        cout = scale_channels(base, s)
        for block in range(2):
            stride = 2 if stage > 0 and block == 0 else 1
            src = len(b.layers) - 1
            b.conv(cin, cout, 3, stride, bias=False)
            b.bn(cout)
            b.relu()
            b.conv(cout, cout, 3, 1, bias=False)
            b.bn(cout)
            shortcut = []
            if stride != 1 or cin != cout:
                shortcut = [make_conv(cin, cout, 1, stride, 0, False, False, b.rng, b.dtype),
                            make_batchnorm(cout, b.dtype)]
            b.layers.append(LayerSpec("residual_add", cout, cout, skip_from=src,
                                      shortcut=shortcut))
            b.relu()
            cin = cout
            h = (h - 1) // stride + 1
    b.avgpool(h)
    b.fc(cin, num_classes)


def _mobilenet(b, s, input_shape, num_classes):
    cin, h, _ = input_shape
    c = scale_channels(32, s)
    b.conv(cin, c, 3, 2, bias=False)
    b.bn(c)
    b.relu()
    h = (h - 1) // 2 + 1
    cin = c
    for base, stride in _MOBILENET_BLOCKS:
        b.conv(cin, cin, 3, stride, bias=False, depthwise=True)
        b.bn(cin)
        b.relu()
        cout = scale_channels(base, s)
        b.conv(cin, cout, 1, 1, 0, bias=False)
        b.bn(cout)
        b.relu()
        cin = cout
        h = (h - 1) // stride + 1
    b.avgpool(h)
    b.fc(cin, num_classes)


def _tiny(b, s, input_shape, num_classes):
    cin, h, _ = input_shape
    c1, c2 = scale_channels(8, s), scale_channels(16, s)
    b.conv(cin, c1, 3)
    b.relu()
    b.maxpool()
    b.conv(c1, c2, 3)
    b.relu()
    b.maxpool()
    h //= 4
    hidden = scale_channels(32, s)
    b.fc(c2 * h * h, hidden)
    b.relu()
    b.fc(hidden, num_classes)


_BUILDERS = {"vgg16_cifar": _vgg16, "resnet18": _resnet18, "mobilenet": _mobilenet,
             "tiny": _tiny}


def build_network(arch: str, width_scale: float = 1.0, num_classes: int = 10,
                  input_shape=(3, 32, 32), seed: int = 0, dtype="float32") -> NetworkSpec:
    """Build one of the reference topologies with seeded initial weights.

    ``width_scale`` multiplies every channel count (round-half-up, minimum 1)
    to give desk-scale variants; ``1.0`` is the full-size topology.  ``tiny``
    is a 4-weight-layer CNN used for fast experiments.
    """
    if arch not in _BUILDERS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    if not 0 < width_scale <= 1:
        raise ValueError("width_scale must lie in (0, 1]")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    b = _Builder(make_rng(seed), resolve_dtype(dtype))
    _BUILDERS[arch](b, width_scale, tuple(input_shape), num_classes)
    net = NetworkSpec(f"{arch}@{width_scale:g}", b.layers, tuple(input_shape), num_classes,
                      arch=arch)
    return validate(net)


def layer_inventory(spec: NetworkSpec) -> dict:
    """Counts of each layer kind in the main path (shortcut convs reported apart)."""
    counts = {}
    for layer in spec.layers:
        counts[layer.kind] = counts.get(layer.kind, 0) + 1
        for sub in layer.shortcut:
            key = f"shortcut_{sub.kind}"
            counts[key] = counts.get(key, 0) + 1
    return counts
