import numpy as np
import pytest

from loraforget import container, nets
from loraforget import ndgrad as nd
from loraforget.ndgrad import Tensor


def test_seg_shapes():
    net = nets.SegNet(feature_point="bottleneck")
    logits, feats = net(Tensor(np.zeros((2, 1, 32, 32), np.float32)))
    assert logits.shape == (2, 1, 32, 32)
    assert feats.shape == (2, 64, 8, 8)
    _, dec = nets.SegNet()(Tensor(np.zeros((1, 1, 16, 16), np.float32)))
    assert dec.shape == (1, 16, 16, 16)


def test_seg_rejects_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        nets.SegNet()(Tensor(np.zeros((1, 1, 30, 30), np.float32)))


def test_zero_weights_zero_logits():
    net = nets.SegNet()
    net.zero_weights()
    logits, _ = net(Tensor(np.random.default_rng(0).random((1, 1, 16, 16)).astype(np.float32)))
    assert not logits.data.any()


def test_cls_forward():
    net = nets.ClsNet(n_classes=3)
    z = net(Tensor(np.random.default_rng(0).random((4, 1, 16, 16)).astype(np.float32)))
    assert z.shape == (4, 3)
    np.testing.assert_allclose(nd.softmax(z, axis=1).data.sum(axis=1), 1, atol=1e-6)
    net.zero_weights()
    np.testing.assert_allclose(nd.softmax(net(Tensor(np.ones((2, 1, 16, 16)))), axis=1).data, 1 / 3)


def test_registry_tags_unique():
    for net in (nets.SegNet(), nets.ClsNet()):
        ids = [id(t) for t, _ in net.registry.values()]
        assert len(ids) == len(set(ids))
        assert all(tag in ("encoder", "decoder", "head", "trunk") for _, tag in net.registry.values())
    tags = {n.split(".")[0]: tag for n, (_, tag) in nets.SegNet().registry.items()}
    assert tags["head"] == "head" and tags["dec1b"] == "decoder" and tags["enc1a"] == "encoder"


def test_closed_form_param_count():
    def count(w1, w2, b):
        convs = [(1, w1), (w1, w1), (w1, w2), (w2, w2), (w2, b), (b, b),
                 (b + w2, w2), (w2, w2), (w2 + w1, w1), (w1, w1)]
        return sum(ci * co * 9 + co for ci, co in convs) + w1 + 1

    for widths, b in (((16, 32), 64), ((8, 16), 32)):
        assert nets.SegNet(widths, b).num_params() == count(*widths, b)
        assert nets.count_params(nets.seg_layers(widths, b)) == count(*widths, b)


def test_forward_matches_manual_chain():
    net = nets.SegNet(seed=2, dtype=np.float64)
    x = Tensor(np.random.default_rng(1).random((1, 1, 8, 8)))

    def conv(name, h):
        return nd.conv2d(h, net.weight(name), padding=net.layers[name].ksize // 2) + net.bias(name).reshape(1, -1, 1, 1)

    def block(a, b, h):
        return nd.relu(conv(b, nd.relu(conv(a, h))))

    e1 = block("enc1a", "enc1b", x)
    e2 = block("enc2a", "enc2b", nd.max_pool2d(e1))
    bt = block("bott_a", "bott_b", nd.max_pool2d(e2))
    d2 = block("dec2a", "dec2b", nd.concat([nd.upsample_nearest2d(bt), e2], axis=1))
    d1 = block("dec1a", "dec1b", nd.concat([nd.upsample_nearest2d(d2), e1], axis=1))
    assert np.array_equal(net(x)[0].data, conv("head", d1).data)


def test_clone_frozen_bitwise():
    net = nets.SegNet(seed=4)
    clone = nets.clone_frozen(net)
    assert clone.frozen() and not net.frozen()
    x = Tensor(np.random.default_rng(0).random((2, 1, 16, 16)).astype(np.float32))
    assert np.array_equal(net(x)[0].data, clone(x)[0].data)
    assert {n: tag for n, (_, tag) in net.registry.items()} == {n: tag for n, (_, tag) in clone.registry.items()}
    clone.weight("head").data += 1
    assert not nets.identical(net, clone)


def test_checkpoint_roundtrip_bytes(tmp_path):
    for net in (nets.SegNet(seed=1), nets.ClsNet(seed=1)):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        nets.save(net, a)
        loaded = nets.load(a)
        nets.save(loaded, b)
        assert a.read_bytes() == b.read_bytes()
        assert nets.identical(net, loaded)
        assert a.read_bytes()[:6] == b"ERNET1"


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOTNET")
    with pytest.raises(container.ContainerError, match="magic"):
        nets.load(p)
    nets.save(nets.SegNet(), p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(container.ContainerError, match="truncated"):
        nets.load(p)
