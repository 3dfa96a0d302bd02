import warnings

import numpy as np
import pytest

from dlis import build_network
from dlis.compression import is_ternary, ternary_codes, ttq_quantize, ttq_train
from dlis.compression.state import TernaryLayer
from dlis.graph import NetworkSpec, make_conv, make_fc, validate
from dlis.io import synth_dataset
from dlis.train import TrainSchedule, loss_and_grads


def test_codes_example():
    codes, delta = ternary_codes(np.array([0.5, -0.8, 0.05]), 0.2)
    assert delta == pytest.approx(0.16)
    assert codes.tolist() == [1, -1, 0]


def example_net():
    conv = make_conv(1, 3, 1, bias=False)
    conv.params["weight"] = np.array([0.5, -0.8, 0.05], dtype=np.float32).reshape(3, 1, 1, 1)
    return validate(NetworkSpec("t", [conv, make_fc(3, 2)], (1, 1, 1), 2))


def test_quantize_example_scales():
    q, params = ttq_quantize(example_net(), 0.2)
    tl = params.layers["0.weight"]
    assert tl.wp == pytest.approx(0.5) and tl.wn == pytest.approx(0.8)
    assert q.get_param("0.weight").reshape(-1).tolist() == pytest.approx([0.5, -0.8, 0.0])
    assert is_ternary(q, params)
    assert "1.weight" not in params.layers  # FC stays full precision


def test_decode():
    tl = TernaryLayer(2.0, 3.0, 0.1, np.array([1, 0, -1], dtype=np.int8))
    assert tl.decode().tolist() == [2.0, 0.0, -3.0]
    assert tl.sparsity == pytest.approx(1 / 3)


def test_threshold_bounds():
    with pytest.raises(ValueError):
        ttq_quantize(example_net(), 1.5)


def test_empty_bucket_warns():
    conv = make_conv(1, 2, 1, bias=False)
    conv.params["weight"] = np.array([0.5, 0.4], dtype=np.float32).reshape(2, 1, 1, 1)
    net = validate(NetworkSpec("t", [conv, make_fc(2, 2)], (1, 1, 1), 2))
    with pytest.warns(UserWarning, match="negative bucket"):
        _, params = ttq_quantize(net, 0.1)
    assert params.layers["0.weight"].wn == 0.0


def test_sparsity_monotone_in_threshold():
    net = build_network("mobilenet", 0.125, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sp = [ttq_quantize(net, t)[1].sparsity for t in np.linspace(0, 1, 11)]
    assert sp == sorted(sp) and sp[0] == 0.0 and sp[-1] > 0.99


def test_invariant_every_step_and_shortcuts():
    net = build_network("resnet18", 0.0625, num_classes=2, seed=0)
    ds = synth_dataset(0, 16, classes=2)
    seen = []
    qnet, params = ttq_train(net, ds, 0.05, TrainSchedule(base_lr=0.01, epochs=1, batch_size=4),
                             on_step=lambda n, p: seen.append(is_ternary(n, p)))
    assert seen == [True] * 4
    assert any(".shortcut." in k for k in params.layers)
    assert len(params.history) == 1


def test_scale_step_uses_bucket_gradient_sum():
    ds = synth_dataset(1, 12, classes=2, size=8)
    net = build_network("tiny", num_classes=2, input_shape=(3, 8, 8), seed=1)
    snaps = []

    def grab(n, p):
        snaps.append((n.copy(), {k: (t.wp, t.wn, t.codes.copy()) for k, t in p.layers.items()}))

    lr = 0.05
    ttq_train(net, ds, 0.1, TrainSchedule(base_lr=lr, epochs=2, batch_size=len(ds),
                                          decay_every=10), on_step=grab)
    after_shadow_step, scales0 = snaps[0]
    _, scales1 = snaps[1]
    _, gs = loss_and_grads(after_shadow_step, ds.images, ds.labels)
    for key, (wp, wn, codes) in scales0.items():
        g = gs.params[key]
        assert scales1[key][0] == pytest.approx(max(0.0, wp - lr * g[codes > 0].sum()), rel=1e-4)
        assert scales1[key][1] == pytest.approx(max(0.0, wn + lr * g[codes < 0].sum()), rel=1e-4)
        assert np.array_equal(scales1[key][2], codes)  # scale steps leave codes alone
