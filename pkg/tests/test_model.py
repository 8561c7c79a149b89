import numpy as np
import pytest

from tracc import cases, golden
from tracc.fxp import Q8_8, QFormat
from tracc.model import (CIFAR_RECORD, ConfigError, ConfigSyntaxError, DatasetError, DatasetSpec, HardwareConfig,
                         LayerKind, LossKind, builtin_hardware, builtin_network, config_from_dict, conv_layer,
                         decode_cifar_records, expand_description, load_arrays, load_dataset, parse_config,
                         pool_layer, serialize_config, write_cifar_binary)

DESC_1X = "16C3-16C3-P-32C3-32C3-P-64C3-64C3-P-FC"


def test_description_expansion_1x():
    layers = expand_description(DESC_1X, (32, 32, 3), 10)
    kinds = [l.kind for l in layers]
    assert kinds.count(LayerKind.CONV) == 6
    assert kinds.count(LayerKind.MAXPOOL) == 3
    assert kinds.count(LayerKind.FLATTEN) == 1
    assert kinds.count(LayerKind.FC) == 1
    assert kinds[-1] == LayerKind.LOSS
    # ReLUs ride on the conv layers as flags instead of separate entries
    assert len(layers) == 12
    assert all(l.relu for l in layers if l.kind == LayerKind.CONV)
    assert not layers[-2].relu
    assert layers[0].in_shape == (32, 32, 3)
    assert layers[-2].nif == 4 * 4 * 64


def test_same_padding_conv_accepted():
    l = conv_layer((32, 32, 3), 16, 3, 1, 1)
    assert l.out_shape == (32, 32, 16)
    l.validate()


def test_pool_non_exact_division_rejected():
    bad = pool_layer((31, 31, 4), 2)
    with pytest.raises(ConfigError, match="non-exact pooling division"):
        bad.validate()


def test_builtin_networks():
    depth = lambda n: [l.nof for l in builtin_network(n).layers if l.kind == LayerKind.CONV]
    assert depth("cifar10_1x") == [16, 16, 32, 32, 64, 64]
    assert depth("cifar10_2x") == [32, 32, 64, 64, 128, 128]
    assert depth("cifar10_4x") == [64, 64, 128, 128, 256, 256]
    with pytest.raises(ConfigError):
        builtin_network("cifar10_3x")
    assert builtin_hardware("cifar10_2x").pof == 32


def test_cifar_record_decoding(tmp_path):
    rec = np.zeros(CIFAR_RECORD, dtype=np.uint8)
    rec[0] = 5
    rec[1] = 255
    x, y = decode_cifar_records(rec.tobytes(), Q8_8)
    assert y.tolist() == [5]
    assert x.shape == (1, 3, 32, 32)
    assert x[0, 0, 0, 0] / 256 == 255 / 256
    spec = DatasetSpec("cifar10", str(tmp_path / "one.bin"))
    (tmp_path / "one.bin").write_bytes(rec.tobytes())
    img, label = next(load_dataset(spec))
    assert label == 5 and img.dims == (32, 32, 3)


def test_cifar_errors_carry_record_index(tmp_path):
    recs = np.zeros((3, CIFAR_RECORD), dtype=np.uint8)
    recs[2, 0] = 11
    with pytest.raises(DatasetError) as e:
        decode_cifar_records(recs.tobytes())
    assert e.value.record == 2
    with pytest.raises(DatasetError) as e:
        decode_cifar_records(recs.tobytes()[:-5])
    assert e.value.record == 2
    with pytest.raises(DatasetError):
        load_arrays(DatasetSpec("cifar10", str(tmp_path / "missing")))


def test_cifar_directory_layout(tmp_path):
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, size=(7, 3, 32, 32), dtype=np.uint8)
    lab = rng.integers(0, 10, size=7)
    write_cifar_binary(tmp_path / "data_batch_1.bin", px, lab)
    write_cifar_binary(tmp_path / "test_batch.bin", px[:2], lab[:2])
    x, y = load_arrays(DatasetSpec("cifar10", str(tmp_path)), "train")
    assert np.array_equal(x, px.astype(np.int64)) and np.array_equal(y, lab)
    x, y = load_arrays(DatasetSpec("cifar10", str(tmp_path)), "test")
    assert len(y) == 2
    x, y = load_arrays(DatasetSpec("cifar10", str(tmp_path)), "train", limit=3)
    assert len(y) == 3


def test_synthetic_is_deterministic():
    spec = DatasetSpec("synthetic", seed=7, num_samples=16)
    a = [(t.raw.tobytes(), l) for t, l in load_dataset(spec)]
    b = [(t.raw.tobytes(), l) for t, l in load_dataset(spec)]
    assert a == b and len(a) == 16
    assert not np.array_equal(load_arrays(spec, "train")[0], load_arrays(spec, "test")[0])


CONFIG = """
version = 1
[network]
description = "8C3-P-FC"
input = [8, 8, 2]
num_classes = 3
loss = "euclidean"
[training]
batch_size = 4
learning_rate = 0.01
momentum = 0.5
seed = 9
rounding = "stochastic"
[formats]
activations = 7
[hardware]
pox = 2
poy = 2
pof = 4
tile_ox = 4
tile_oy = 4
tile_of = 8
tile_if = 2
[dataset]
source = "synthetic"
seed = 3
num_samples = 12
"""


def test_parse_serialize_round_trip():
    net, hw, ds = parse_config(CONFIG)
    assert net.loss_kind == LossKind.EUCLIDEAN
    assert net.numerics.activations == QFormat(7) and net.numerics.rounding == "stochastic"
    assert (hw.pox, hw.tile_if) == (2, 2) and ds.num_samples == 12
    text = serialize_config(net, hw, ds)
    again = parse_config(text)
    assert again == (net, hw, ds)
    assert serialize_config(*again) == text


def test_overrides_apply_before_validation():
    net, hw, _ = parse_config(CONFIG, ["training.batch_size=8", "hardware.double_buffering=false"])
    assert net.batch_size == 8 and not hw.double_buffering
    with pytest.raises(ConfigError):
        parse_config(CONFIG, ["hardware.pox=9"])
    with pytest.raises(ConfigError):
        parse_config(CONFIG, ["training.momentum=1.5"])


def test_config_errors():
    with pytest.raises(ConfigSyntaxError):
        parse_config("version = [")
    with pytest.raises(ConfigError, match="unknown token"):
        parse_config('[network]\ndescription = "8Q3-FC"\ninput=[8,8,1]')
    with pytest.raises(ConfigError, match="unknown hardware"):
        parse_config('[network]\nbuiltin = "cifar10_1x"\n[hardware]\nfoo = 1')
    with pytest.raises(ConfigError):
        config_from_dict({})


def test_explicit_layers_and_relu_folding():
    text = """
[network]
input = [6, 6, 1]
num_classes = 2
[[network.layers]]
kind = "conv"
filters = 3
kernel = 3
pad = 1
relu = false
[[network.layers]]
kind = "relu"
[[network.layers]]
kind = "flatten"
[[network.layers]]
kind = "fc"
outputs = 2
[hardware]
pox = 1
poy = 1
pof = 1
tile_ox = 6
tile_oy = 6
tile_of = 3
tile_if = 1
"""
    net, hw, _ = parse_config(text)
    assert [l.kind for l in net.layers] == [LayerKind.CONV, LayerKind.FLATTEN, LayerKind.FC, LayerKind.LOSS]
    assert net.layers[0].relu


def test_hardware_validation():
    with pytest.raises(ConfigError):
        HardwareConfig(pox=16, tile_ox=8).validate()
    with pytest.raises(ConfigError):
        HardwareConfig(pkx=2).validate()
    HardwareConfig().validate(builtin_network("cifar10_1x"))


def test_forward_shapes_match_declared():
    rng = np.random.default_rng(3)
    for _ in range(30):
        net = cases.random_network(rng)
        state = golden.init_state(net)
        x, _ = cases.random_batches(rng, net, 1)
        records, scores = golden.forward(net, state.params(), x, golden.FixedPoint(net.numerics))
        for i, layer in net.compute_layers:
            assert records[i].output.shape[1:] == layer.out_array_shape or layer.kind == LayerKind.FLATTEN
        assert scores.shape == (net.batch_size, net.num_classes)
