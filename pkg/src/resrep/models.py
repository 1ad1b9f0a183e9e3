"""Architecture builders.  Target layers are flagged on the conv nodes."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .graph import ModelGraph
from .layers import Add, BatchNorm2d, Conv2d, GlobalAvgPool, ReLU


@dataclass
class ArchSpec:
    name: str
    input_shape: tuple[int, int, int] = (3, 32, 32)
    widths: tuple[int, ...] = ()
    blocks: int = 0
    num_classes: int = 10
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class _Builder:
    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.nodes = []

    def add(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def conv(self, x, cin, cout, k, stride=1, target=False, bias=False):
        # He-normal, fan-in
        std = np.sqrt(2.0 / (cin * k * k))
        kernel = (self.rng.standard_normal((cout, cin, k, k)) * std).astype(self.dtype)
        b = np.zeros(cout, self.dtype) if bias else None
        return self.add(Conv2d(kernel, b, stride, k // 2, inputs=(x,), target=target))

    def conv_bn(self, x, cin, cout, k, stride=1, target=False, relu=True):
        x = self.conv(x, cin, cout, k, stride, target)
        x = self.add(BatchNorm2d.fresh(cout, self.dtype, inputs=(x,)))
        return self.add(ReLU((x,))) if relu else x

    def head(self, x, cin, num_classes):
        x = self.add(GlobalAvgPool((x,)))
        kernel = (self.rng.standard_normal((num_classes, cin, 1, 1)) / np.sqrt(cin)).astype(self.dtype)
        return self.add(Conv2d(kernel, np.zeros(num_classes, self.dtype), inputs=(x,)))


def _resnet(n, spec: ArchSpec, dtype=np.float32) -> ModelGraph:
    b = _Builder(np.random.default_rng(spec.seed), dtype)
    widths = spec.widths or (16, 32, 64)
    x = b.conv_bn(-1, spec.input_shape[0], widths[0], 3)
    cin = widths[0]
    for stage, width in enumerate(widths):
        for block in range(n):
            stride = 2 if stage > 0 and block == 0 else 1
            y = b.conv_bn(x, cin, width, 3, stride, target=True)
            y = b.conv_bn(y, width, width, 3, relu=False)
            if stride != 1 or cin != width:
                x = b.conv_bn(x, cin, width, 1, stride, relu=False)
            x = b.add(ReLU((b.add(Add((x, y))),)))
            cin = width
    b.head(x, cin, spec.num_classes)
    return ModelGraph(b.nodes, spec.input_shape, spec.num_classes, name=spec.name)


def build_resnet(depth: int, num_classes=10, seed=0, input_shape=(3, 32, 32), dtype=np.float32) -> ModelGraph:
    """CIFAR ResNet of depth 6n+2; the first conv of every block is a target layer."""
    if (depth - 2) % 6:
        raise ValueError(f"CIFAR ResNet depth must be 6n+2, got {depth}")
    spec = ArchSpec(f"resnet{depth}", tuple(input_shape), (16, 32, 64), (depth - 2) // 6, num_classes, seed)
    return _resnet(spec.blocks, spec, dtype)


def build_resnet56(**kw) -> ModelGraph:
    return build_resnet(56, **kw)


def build_resnet110(**kw) -> ModelGraph:
    return build_resnet(110, **kw)


def build_miniconv(widths, num_classes=10, seed=0, input_shape=(3, 32, 32), dtype=np.float32) -> ModelGraph:
    """Plain conv-BN-ReLU chain, stride 2 between stages; every conv but the last is a target."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ValueError("miniconv needs at least two widths")
    b = _Builder(np.random.default_rng(seed), dtype)
    x, cin = -1, input_shape[0]
    for i, w in enumerate(widths):
        x = b.conv_bn(x, cin, w, 3, stride=1 if i == 0 else 2, target=i < len(widths) - 1)
        cin = w
    b.head(x, cin, num_classes)
    return ModelGraph(b.nodes, tuple(input_shape), num_classes, name="miniconv")


ARCHS = ("miniconv", "resnet56", "resnet110")


def build(spec: ArchSpec, dtype=np.float32) -> ModelGraph:
    kw = dict(num_classes=spec.num_classes, seed=spec.seed, input_shape=spec.input_shape, dtype=dtype)
    if spec.name == "miniconv":
        return build_miniconv(spec.widths, **kw)
    if spec.name.startswith("resnet") and spec.name[6:].isdigit():
        return build_resnet(int(spec.name[6:]), **kw)
    raise ValueError(f"unknown architecture {spec.name!r}; choose from {', '.join(ARCHS)}")
