"""Teacher/student backbones: a 3-level U-Net and a small conv classifier.

Layers are registered by name with a single tag so adapter policies can
target e.g. the decoder and head of the segmentation network.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import container
from . import ndgrad as nd
from .ndgrad import Tensor


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "linear"
    c_in: int
    c_out: int
    ksize: int
    tag: str

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "linear":
            return (self.c_out, self.c_in)
        return (self.c_out, self.c_in, self.ksize, self.ksize)

    @property
    def fan_in(self) -> int:
        return self.c_in * (self.ksize ** 2 if self.kind == "conv" else 1)


def seg_layers(widths=(16, 32), bottleneck: int = 64, in_channels: int = 1) -> list[LayerSpec]:
    w1, w2 = widths
    return [
        LayerSpec("enc1a", "conv", in_channels, w1, 3, "encoder"),
        LayerSpec("enc1b", "conv", w1, w1, 3, "encoder"),
        LayerSpec("enc2a", "conv", w1, w2, 3, "encoder"),
        LayerSpec("enc2b", "conv", w2, w2, 3, "encoder"),
        LayerSpec("bott_a", "conv", w2, bottleneck, 3, "encoder"),
        LayerSpec("bott_b", "conv", bottleneck, bottleneck, 3, "encoder"),
        LayerSpec("dec2a", "conv", bottleneck + w2, w2, 3, "decoder"),
        LayerSpec("dec2b", "conv", w2, w2, 3, "decoder"),
        LayerSpec("dec1a", "conv", w2 + w1, w1, 3, "decoder"),
        LayerSpec("dec1b", "conv", w1, w1, 3, "decoder"),
        LayerSpec("head", "conv", w1, 1, 1, "head"),
    ]


def cls_layers(widths=(16, 32), n_classes: int = 3, in_channels: int = 1) -> list[LayerSpec]:
    w1, w2 = widths
    return [
        LayerSpec("conv1", "conv", in_channels, w1, 3, "trunk"),
        LayerSpec("conv2", "conv", w1, w2, 3, "trunk"),
        LayerSpec("fc", "linear", w2, n_classes, 1, "head"),
    ]


def count_params(layers: list[LayerSpec]) -> int:
    """Closed-form weight + bias count of a layer list."""
    return sum(int(np.prod(s.weight_shape)) + s.c_out for s in layers)


class Net:
    """Common machinery: a named, tagged parameter registry plus adapters.

    ``registry`` maps ``"<layer>.weight"`` / ``"<layer>.bias"`` to
    ``(tensor, tag)``. ``adapters`` maps layer names to attached low-rank
    adapters (filled by :func:`loraforget.lora.inject`).
    """

    kind = "base"

    def __init__(self, layers: list[LayerSpec], seed: int = 0, dtype=np.float32):
        self.layers = {s.name: s for s in layers}
        self.registry: dict[str, tuple[Tensor, str]] = {}
        self.adapters: dict = {}
        self.merged = False
        self.training = False
        self.dropout_rng = np.random.default_rng(seed + 1)
        rng = np.random.default_rng(seed)
        for s in layers:
            w = rng.standard_normal(s.weight_shape) * np.sqrt(2.0 / s.fan_in)
            self.registry[f"{s.name}.weight"] = (Tensor(w.astype(dtype), requires_grad=True), s.tag)
            self.registry[f"{s.name}.bias"] = (Tensor(np.zeros(s.c_out, dtype=dtype), requires_grad=True), s.tag)

    # -- registry helpers --------------------------------------------------
    def weight(self, layer: str) -> Tensor:
        return self.registry[f"{layer}.weight"][0]

    def bias(self, layer: str) -> Tensor:
        return self.registry[f"{layer}.bias"][0]

    def parameters(self) -> list[Tensor]:
        return [t for t, _ in self.registry.values()]

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    @property
    def dtype(self):
        return self.weight(next(iter(self.layers))).dtype

    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.parameters())

    def train(self, mode: bool = True) -> "Net":
        self.training = mode
        return self

    def eval(self) -> "Net":
        return self.train(False)

    def zero_weights(self) -> None:
        for t in self.parameters():
            t.data[...] = 0

    # -- layer application -------------------------------------------------
    def _conv(self, name: str, x: Tensor) -> Tensor:
        spec = self.layers[name]
        pad = spec.ksize // 2
        out = nd.conv2d(x, self.weight(name), padding=pad)
        adapter = self.adapters.get(name)
        if adapter is not None:
            out = out + adapter.delta(x, padding=pad, training=self.training, rng=self.dropout_rng)
        return out + self.bias(name).reshape(1, -1, 1, 1)

    def _linear(self, name: str, x: Tensor) -> Tensor:
        out = x @ self.weight(name).T
        adapter = self.adapters.get(name)
        if adapter is not None:
            out = out + adapter.delta(x, training=self.training, rng=self.dropout_rng)
        return out + self.bias(name)


class SegNet(Net):
    """U-Net: two encoder levels, a bottleneck, two decoder levels, 1x1 head.

    ``feature_point`` picks the feature map returned next to the logits:
    ``"bottleneck"`` ([N, 64, H/4, W/4]) or ``"decoder"`` (the pre-head
    decoder activation, [N, 16, H, W]). With the default decoder+head
    adapter policy the bottleneck is identical for teacher and student, so
    the decoder point is the default.
    """

    kind = "seg"

    def __init__(self, widths=(16, 32), bottleneck: int = 64, seed: int = 0, dtype=np.float32,
                 feature_point: str = "decoder"):
        if feature_point not in ("bottleneck", "decoder"):
            raise ValueError(f"unknown feature point {feature_point!r}")
        self.widths = tuple(widths)
        self.bottleneck_width = bottleneck
        self.feature_point = feature_point
        super().__init__(seg_layers(widths, bottleneck), seed=seed, dtype=dtype)

    def _block(self, a: str, b: str, x: Tensor) -> Tensor:
        return nd.relu(self._conv(b, nd.relu(self._conv(a, x))))

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        if images.ndim != 4:
            raise ValueError(f"expected [N, 1, H, W] images, got {images.shape}")
        h, w = images.shape[2:]
        if h % 4 or w % 4:
            raise ValueError(f"spatial dims {h}x{w} must be divisible by 4")
        e1 = self._block("enc1a", "enc1b", images)
        e2 = self._block("enc2a", "enc2b", nd.max_pool2d(e1, 2))
        bott = self._block("bott_a", "bott_b", nd.max_pool2d(e2, 2))
        d2 = self._block("dec2a", "dec2b", nd.concat([nd.upsample_nearest2d(bott, 2), e2], axis=1))
        d1 = self._block("dec1a", "dec1b", nd.concat([nd.upsample_nearest2d(d2, 2), e1], axis=1))
        logits = self._conv("head", d1)
        return logits, (bott if self.feature_point == "bottleneck" else d1)

    __call__ = forward


class ClsNet(Net):
    """Conv(16)-pool-conv(32)-pool, global average pool, linear head."""

    kind = "cls"

    def __init__(self, widths=(16, 32), n_classes: int = 3, seed: int = 0, dtype=np.float32):
        self.widths = tuple(widths)
        self.n_classes = n_classes
        super().__init__(cls_layers(widths, n_classes), seed=seed, dtype=dtype)

    def forward_features(self, images: Tensor) -> Tensor:
        x = nd.max_pool2d(nd.relu(self._conv("conv1", images)), 2)
        x = nd.max_pool2d(nd.relu(self._conv("conv2", x)), 2)
        return nd.global_avg_pool2d(x)

    def forward(self, images: Tensor) -> Tensor:
        return self._linear("fc", self.forward_features(images))

    __call__ = forward


def forward_seg(net: SegNet, images: Tensor) -> tuple[Tensor, Tensor]:
    return net.forward(images)


def forward_cls(net: ClsNet, images: Tensor) -> Tensor:
    return net.forward(images)


def clone_frozen(net: Net) -> Net:
    """Deep copy with every weight frozen and no adapters."""
    if net.adapters:
        raise ValueError("clone_frozen expects a bare network; remove or merge adapters first")
    clone = copy.copy(net)
    clone.registry = {
        name: (Tensor(t.data.copy(), requires_grad=False), tag) for name, (t, tag) in net.registry.items()
    }
    clone.adapters = {}
    clone.layers = dict(net.layers)
    clone.dropout_rng = copy.deepcopy(net.dropout_rng)
    clone.training = False
    return clone


def freeze(net: Net) -> Net:
    for t in net.parameters():
        t.requires_grad = False
        t.grad = None
    return net


# -- checkpoints ------------------------------------------------------------

def save(net: Net, path) -> None:
    container.write(path, [container.Record(name, tag, t.data) for name, (t, tag) in net.registry.items()])


def load(path, dtype=np.float32, feature_point: str = "decoder", frozen: bool = True) -> Net:
    """Rebuild a SegNet or ClsNet from a checkpoint; widths come from shapes."""
    records = {r.name: r for r in container.read(path)}
    if "dec1b.weight" in records:
        w1 = records["enc1a.weight"].array.shape[0]
        w2 = records["enc2a.weight"].array.shape[0]
        bott = records["bott_a.weight"].array.shape[0]
        net: Net = SegNet((w1, w2), bott, dtype=dtype, feature_point=feature_point)
    elif "fc.weight" in records:
        w1 = records["conv1.weight"].array.shape[0]
        w2 = records["conv2.weight"].array.shape[0]
        net = ClsNet((w1, w2), records["fc.weight"].array.shape[0], dtype=dtype)
    else:
        raise container.ContainerError(f"{path}: not a recognised network checkpoint")
    if set(records) != set(net.registry):
        raise container.ContainerError(f"{path}: registry mismatch {sorted(set(records) ^ set(net.registry))}")
    for name, (t, tag) in net.registry.items():
        rec = records[name]
        if rec.tag != tag or rec.array.shape != t.shape:
            raise container.ContainerError(f"{path}: entry {name} has tag/shape {rec.tag}/{rec.array.shape}")
        t.data = rec.array.astype(dtype)
    if frozen:
        freeze(net)
    return net


def build(kind: str, seed: int = 0, dtype=np.float32, n_classes: int = 3, feature_point: str = "decoder",
          widths=(16, 32), bottleneck: int = 64) -> Net:
    if kind in ("seg", "segmentation"):
        return SegNet(widths, bottleneck, seed=seed, dtype=dtype, feature_point=feature_point)
    if kind in ("cls", "classification"):
        return ClsNet(widths, n_classes, seed=seed, dtype=dtype)
    raise ValueError(f"unknown network kind {kind!r}")


def max_abs_diff(a: Net, b: Net) -> float:
    """Largest absolute weight difference between two registries."""
    return max(float(np.abs(ta.data - b.registry[n][0].data).max()) for n, (ta, _) in a.registry.items())


def identical(a: Net, b: Net) -> bool:
    return set(a.registry) == set(b.registry) and all(
        np.array_equal(t.data, b.registry[n][0].data) for n, (t, _) in a.registry.items()
    )

