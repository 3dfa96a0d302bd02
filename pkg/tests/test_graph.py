import numpy as np
import pytest

from dlis import build_network, count_macs, count_params, layer_inventory
from dlis.errors import GeometryError, ShapeError
from dlis.graph import (LayerSpec, NetworkSpec, conv_output_size, make_batchnorm, make_conv,
                        make_fc, scale_channels, validate)
from dlis.tensor import make_rng

# hand-summed layer by layer at width 1.0, 10 classes, 3x32x32 input
FULL_MACS = {"vgg16_cifar": 313_463_808, "resnet18": 555_422_720, "mobilenet": 11_596_288}


def test_conv_output_size_floor():
    assert conv_output_size(32, 3, 1, 1) == 32
    assert conv_output_size(5, 2, 2, 0) == 2
    with pytest.raises(GeometryError):
        conv_output_size(2, 5, 1, 0)


def test_mac_oracles():
    rng = make_rng(0)
    conv = validate(NetworkSpec("c", [make_conv(2, 3, 3, 1, 1, rng=rng), make_fc(48, 3, rng=rng)],
                                (2, 4, 4), 3))
    assert count_macs(conv).per_layer_macs == [864, 144]
    fc = validate(NetworkSpec("f", [make_fc(512, 10, rng=rng)], (512, 1, 1), 10))
    assert count_macs(fc).total_macs == 5120
    assert count_macs(fc).total_flops == 10240


def test_param_count_examples():
    rng = make_rng(0)
    conv = validate(NetworkSpec("c", [make_conv(2, 3, 3, rng=rng), make_fc(12, 3, rng=rng)],
                                (2, 4, 4), 3))
    assert count_params(conv).per_layer_params[0] == 57
    fc = validate(NetworkSpec("f", [make_fc(512, 10, rng=rng)], (512, 1, 1), 10))
    assert count_params(fc).total_params == 5130
    assert sum(a.size for a in make_batchnorm(16).params.values()) == 64


def test_empty_network_costs_nothing():
    net = validate(NetworkSpec("e", [], (10, 1, 1), 10))
    assert count_macs(net).total_macs == 0


def test_param_count_includes_bn_arrays():
    rng = make_rng(0)
    net = validate(NetworkSpec("p", [make_conv(3, 4, 3, 1, 1, rng=rng), make_batchnorm(4),
                                     make_fc(4 * 8 * 8, 2, rng=rng)], (3, 8, 8), 2))
    assert count_params(net).per_layer_params == [3 * 4 * 9 + 4, 16, 256 * 2 + 2]


@pytest.mark.parametrize("arch", sorted(FULL_MACS))
def test_full_size_macs_frozen(arch):
    assert count_macs(build_network(arch)).total_macs == FULL_MACS[arch]


def test_inventories():
    assert layer_inventory(build_network("vgg16_cifar")) == {
        "conv2d": 13, "relu": 14, "maxpool2d": 5, "fully_connected": 2}
    mob = layer_inventory(build_network("mobilenet"))
    assert mob["conv2d"] + mob["depthwise_conv2d"] == 27 and mob["fully_connected"] == 1
    res = build_network("resnet18")
    inv = layer_inventory(res)
    assert inv["residual_add"] == 8 and inv["shortcut_conv2d"] == 3 and inv["conv2d"] == 17


def test_resnet_skips_join_block_boundaries():
    net = build_network("resnet18", 0.25)
    for src, add in net.skips:
        assert net.layers[add].kind == "residual_add"
        # each block: conv bn relu conv bn add
        assert add - src == 6


def test_width_scale_rounding():
    assert scale_channels(64, 0.25) == 16
    assert scale_channels(3, 0.1) == 1
    assert scale_channels(10, 0.25) == 3  # 2.5 rounds half up
    net = build_network("vgg16_cifar", 0.25)
    assert net.layers[0].out_channels == 16


def test_build_is_seeded():
    a, b = build_network("tiny", seed=3), build_network("tiny", seed=3)
    c = build_network("tiny", seed=4)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.get_param("0.weight"), c.get_param("0.weight"))


def test_build_rejects_bad_arguments():
    with pytest.raises(ValueError):
        build_network("alexnet")
    with pytest.raises(ValueError):
        build_network("tiny", width_scale=0)
    with pytest.raises(ValueError):
        build_network("tiny", num_classes=0)


def test_validate_catches_channel_mismatch():
    rng = make_rng(0)
    net = NetworkSpec("bad", [make_conv(3, 4, 3, rng=rng), make_conv(5, 2, 3, rng=rng)],
                      (3, 8, 8), 2)
    with pytest.raises(ShapeError) as err:
        validate(net)
    assert err.value.layer_index == 1


def test_validate_catches_wrong_weight_shape():
    rng = make_rng(0)
    conv = make_conv(3, 4, 3, rng=rng)
    conv.params["weight"] = conv.params["weight"][:, :2]
    with pytest.raises(ShapeError):
        validate(NetworkSpec("bad", [conv, make_fc(4 * 6 * 6, 2, rng=rng)], (3, 8, 8), 2))


def test_validate_catches_oversized_window():
    rng = make_rng(0)
    with pytest.raises(GeometryError):
        validate(NetworkSpec("bad", [make_conv(3, 2, 5, rng=rng)], (3, 2, 2), 2))


def test_unknown_layer_kind():
    with pytest.raises(ValueError):
        LayerSpec("lstm")


def test_param_keys_and_copy_are_independent():
    net = build_network("resnet18", 0.125)
    keys = [k for k, _ in net.parameters()]
    assert "0.weight" in keys and any(".shortcut.0.weight" in k for k in keys)
    twin = net.copy()
    twin.get_param("0.weight")[...] = 0
    assert np.any(net.get_param("0.weight") != 0)


def test_astype_float64():
    net = build_network("tiny").astype("float64")
    assert net.dtype == np.float64
