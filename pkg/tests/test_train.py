import numpy as np
import pytest

from dlis import build_network, forward
from dlis.errors import ConfigError
from dlis.graph import LayerSpec, NetworkSpec, make_batchnorm, make_conv, make_fc, validate
from dlis.io import synth_dataset
from dlis.tensor import make_rng
from dlis.train import (TrainSchedule, augment, finite_diff_check, loss_and_grads, network_output,
                        sgd_step, train, train_steps)
from dlis.verify import gradient_error, toy_gradient_net


def test_schedule_steps_down():
    s = TrainSchedule(base_lr=0.1, decay_every=50)
    assert [s.lr_at(e) for e in (0, 49)] == [0.1, 0.1]
    assert s.lr_at(50) == pytest.approx(0.01)
    assert s.lr_at(100) == pytest.approx(0.001)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        TrainSchedule(base_lr=0)
    with pytest.raises(ConfigError):
        TrainSchedule(batch_size=0)


def test_sgd_step_formula():
    p = {"w": np.array([1.0, 2.0])}
    g = {"w": np.array([0.5, -1.0])}
    assert sgd_step(p, g, 0.1)["w"].tolist() == [0.95, 2.1]
    vel = {}
    sgd_step(p, g, 0.1, momentum=0.9, velocity=vel)
    out = sgd_step(p, g, 0.1, momentum=0.9, velocity=vel)
    np.testing.assert_allclose(out["w"], [1.0 - 0.1 * 0.95, 2.0 + 0.1 * 1.9])
    with pytest.raises(ValueError):
        sgd_step(p, g, 0.0)


def test_gradient_check_toy_network():
    assert gradient_error(0) <= 1e-5


def _residual_net(rng):
    f = np.float64
    shortcut = [make_conv(2, 3, 1, 1, 0, bias=False, rng=rng, dtype=f), make_batchnorm(3, f)]
    layers = [make_conv(2, 2, 3, 1, 1, rng=rng, dtype=f), make_batchnorm(2, f), LayerSpec("relu"),
              make_conv(2, 3, 3, 1, 1, rng=rng, dtype=f), make_batchnorm(3, f),
              LayerSpec("residual_add", skip_from=2, shortcut=shortcut), LayerSpec("relu"),
              make_fc(3 * 4 * 4, 3, rng=rng, dtype=f)]
    return validate(NetworkSpec("res", layers, (2, 4, 4), 3))


def _depthwise_net(rng):
    f = np.float64
    layers = [make_conv(2, 3, 3, 1, 1, rng=rng, dtype=f), make_batchnorm(3, f), LayerSpec("relu"),
              make_conv(3, 3, 3, 2, 1, depthwise=True, rng=rng, dtype=f), make_batchnorm(3, f),
              LayerSpec("relu"), LayerSpec("avgpool2d", kernel=2, stride=2),
              make_fc(3, 3, rng=rng, dtype=f)]
    return validate(NetworkSpec("dw", layers, (2, 4, 4), 3))


@pytest.mark.parametrize("builder", [_residual_net, _depthwise_net])
def test_gradient_check_residual_and_depthwise(builder):
    rng = make_rng(1)
    net = builder(rng)
    x = rng.standard_normal((4, 2, 4, 4))
    assert finite_diff_check(net, x, rng.integers(0, 3, 4), eps=1e-5) <= 1e-5


def test_output_gradient_of_cross_entropy():
    rng = make_rng(0)
    net = validate(NetworkSpec("fc", [make_fc(4, 3, rng=rng, dtype=np.float64)], (4, 1, 1), 3))
    x = rng.standard_normal((2, 4, 1, 1))
    y = np.array([0, 2])
    _, gs = loss_and_grads(net, x, y, capture=[0])
    logits, dl = gs.activations[0]
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    p[np.arange(2), y] -= 1
    np.testing.assert_allclose(dl, p / 2)


def test_masks_zero_gradients():
    net = build_network("tiny", num_classes=2)
    ds = synth_dataset(0, 8, classes=2)
    key = "0.weight"
    mask = {key: np.zeros_like(net.get_param(key), dtype=bool)}
    _, gs = loss_and_grads(net, ds.images, ds.labels, masks=mask)
    assert not np.any(gs[key])


def test_train_is_pure_and_reproducible():
    ds = synth_dataset(1, 32, classes=2)
    net = build_network("tiny", num_classes=2)
    before = net.get_param("0.weight").copy()
    sched = TrainSchedule(base_lr=0.05, epochs=2, batch_size=8, seed=3, augment=True)
    a, ha = train(net, ds, sched)
    b, hb = train(net, ds, sched)
    assert np.array_equal(net.get_param("0.weight"), before)
    assert np.array_equal(a.get_param("3.weight"), b.get_param("3.weight"))
    assert [h.loss for h in ha] == [h.loss for h in hb]
    assert len(ha) == 2 and ha[0].lr == 0.05


def test_train_learns_synthetic_task():
    ds = synth_dataset(0, 128, classes=2)
    net, hist = train(build_network("tiny", num_classes=2), ds,
                      TrainSchedule(base_lr=0.05, epochs=8, batch_size=32))
    assert hist[-1].train_acc >= 0.95
    assert hist[-1].loss < hist[0].loss


def test_bn_running_stats_move_in_training():
    net = build_network("resnet18", 0.0625, num_classes=2, seed=0)
    ds = synth_dataset(0, 16, classes=2)
    rng = make_rng(0)
    train_steps(net, ds, 0.01, 2, 8, rng)
    assert not np.allclose(net.layers[1].params["mean"], 0)


def test_network_output_matches_inference_forward():
    net = build_network("mobilenet", 0.125, seed=4)
    x = make_rng(1).standard_normal((2, 3, 32, 32)).astype(np.float32)
    np.testing.assert_allclose(network_output(net, x, train=False), forward(net, x), atol=1e-4)


def test_augment_identity_offset():
    img = make_rng(0).standard_normal((3, 5, 5))
    assert np.array_equal(augment(img, offset=(2, 2)), img)
    shifted = augment(img, offset=(0, 2))
    assert np.array_equal(shifted[:, 2:], img[:, :3]) and not shifted[:, :2].any()
    with pytest.raises(ValueError):
        augment(img, offset=(5, 0))


def test_loss_rejects_bad_labels():
    net = toy_gradient_net()
    with pytest.raises(ValueError):
        loss_and_grads(net, np.zeros((1, 2, 4, 4)), np.array([3]))
