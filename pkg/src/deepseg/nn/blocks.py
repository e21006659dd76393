"""Encoder building blocks: plain U-Net, VGG, residual, dense, Xception,
MobileNet, inverted residual (MobileNetV2) and simplified NASNet cells."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deepseg.nn.graph import Graph, Subgraph
from deepseg.nn.layers import (
    Add,
    BatchNorm,
    Concat,
    Conv2D,
    DepthwiseConv2D,
    DropPath,
    MaxPool2x2,
    PadEven,
    ReLU,
)

FAMILIES = (
    "unet_plain",
    "vgg",
    "residual",
    "dense",
    "xception",
    "mobilenet",
    "inverted_residual",
    "nasnet_normal",
    "nasnet_reduction",
)


class BlockError(ValueError):
    pass


@dataclass
class BlockSpec:
    family: str
    in_channels: int
    out_channels: int
    stride: int = 1
    # unet_plain / vgg
    conv_count: int = 2
    batch_norm: bool = False
    # residual
    projection: bool = False
    # dense
    growth_rate: int = 12
    layer_count: int = 3
    # inverted_residual
    expansion_factor: int = 6
    # nasnet
    drop_path_rate: float = 0.0
    drop_path_gates: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise BlockError(f"unknown block family {self.family!r}; expected one of {FAMILIES}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise BlockError(f"channel counts must be positive, got {self.in_channels}->{self.out_channels}")
        if self.stride not in (1, 2):
            raise BlockError(f"stride must be 1 or 2, got {self.stride}")
        if self.family == "dense":
            if self.layer_count < 1 or self.growth_rate < 1:
                raise BlockError("dense block needs layer_count >= 1 and growth_rate >= 1")
            expected = self.in_channels + self.layer_count * self.growth_rate
            if self.out_channels != expected:
                raise BlockError(
                    f"dense block emits in + L*growth = {expected} channels, spec declares {self.out_channels}"
                )
        if self.family == "nasnet_normal" and self.stride != 1:
            raise BlockError("a normal cell keeps the spatial extent; use nasnet_reduction for stride 2")
        if self.family == "nasnet_reduction" and self.stride != 2:
            raise BlockError("a reduction cell always has stride 2")
        if self.family.startswith("nasnet") and self.out_channels % 2:
            raise BlockError(f"nasnet cells concatenate two equal halves; out_channels={self.out_channels} is odd")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise BlockError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")

    @property
    def has_shortcut(self) -> bool:
        """Whether the block declares an additive identity shortcut."""
        if self.family == "inverted_residual":
            return self.stride == 1 and self.in_channels == self.out_channels
        return self.family in ("residual", "xception")


def dense_spec(in_channels: int, growth_rate: int, layer_count: int) -> BlockSpec:
    return BlockSpec("dense", in_channels, in_channels + growth_rate * layer_count,
                     growth_rate=growth_rate, layer_count=layer_count)


class _Builder:
    def __init__(self, graph: Graph, rng: np.random.Generator):
        self.g = graph
        self.rng = rng
        self.ids: list[int] = []

    def add(self, layer, *inputs, tag=""):
        nid = self.g.add(layer, *inputs, tag=tag)
        self.ids.append(nid)
        return nid

    def conv(self, x, c_in, c_out, k=3, stride=1, tag=""):
        return self.add(Conv2D(c_in, c_out, k, stride, rng=self.rng), x, tag=tag)

    def dw(self, x, ch, k=3, stride=1):
        return self.add(DepthwiseConv2D(ch, k, stride, rng=self.rng), x)

    def bn(self, x, ch):
        return self.add(BatchNorm(ch), x)

    def relu(self, x, cap=None):
        return self.add(ReLU(cap), x)

    def cbr(self, x, c_in, c_out, k=3, stride=1, bn=True, cap=None):
        y = self.conv(x, c_in, c_out, k, stride)
        if bn:
            y = self.bn(y, c_out)
        return self.relu(y, cap)

    def separable(self, x, c_in, c_out, k=3, stride=1):
        y = self.dw(x, c_in, k, stride)
        y = self.conv(y, c_in, c_out, 1)
        return self.bn(y, c_out)

    def maxpool(self, x):
        return self.add(MaxPool2x2(), self.add(PadEven(), x))


def build_block(spec: BlockSpec, graph: Graph | None = None, source: int | None = None, rng=None) -> Subgraph:
    """Append the block described by ``spec`` to ``graph`` after node ``source``.

    With no graph a fresh one is created whose input feeds the block, which is
    convenient for testing a block in isolation.
    """
    if graph is None:
        graph = Graph()
        source = graph.input_id
    elif source is None:
        source = graph.output_id
    if rng is None:
        rng = np.random.default_rng(0)
    b = _Builder(graph, rng)
    build = _BUILDERS.get(spec.family)
    if build is None:
        raise BlockError(f"unknown block family {spec.family!r}")
    out, meta = build(b, source, spec)
    graph.output_id = out
    return Subgraph(graph, source, out, b.ids, spec.in_channels, spec.out_channels, meta)


def _plain(b: _Builder, x, s: BlockSpec):
    # conv -> [BN] -> ReLU repeated; a stride-2 spec downsamples with a pool first
    if s.stride == 2:
        x = b.maxpool(x)
    c = s.in_channels
    for _ in range(s.conv_count):
        x = b.cbr(x, c, s.out_channels, bn=s.batch_norm)
        c = s.out_channels
    return x, {}


def _residual(b: _Builder, x, s: BlockSpec):
    if (s.in_channels != s.out_channels or s.stride != 1) and not s.projection:
        raise BlockError(
            f"residual block {s.in_channels}->{s.out_channels} (stride {s.stride}) cannot use an identity "
            "shortcut; set projection=True"
        )
    y = b.cbr(x, s.in_channels, s.out_channels, stride=s.stride)
    y = b.bn(b.conv(y, s.out_channels, s.out_channels), s.out_channels)
    shortcut = x
    if s.projection:
        shortcut = b.bn(b.conv(x, s.in_channels, s.out_channels, k=1, stride=s.stride), s.out_channels)
    return b.relu(b.add(Add(), y, shortcut, tag="shortcut")), {}


def _dense(b: _Builder, x, s: BlockSpec):
    if s.stride != 1:
        raise BlockError("dense blocks keep the spatial extent; downsample outside the block")
    sources = [x]
    channels = [s.in_channels]
    feeds = []
    for _ in range(s.layer_count):
        if len(sources) == 1:
            feed = sources[0]
        else:
            feed = b.add(Concat(), *sources, tag="dense_feed")
        feeds.append(feed)
        y = b.relu(b.bn(feed, sum(channels)))
        y = b.conv(y, sum(channels), s.growth_rate)
        sources.append(y)
        channels.append(s.growth_rate)
    out = b.add(Concat(), *sources, tag="dense_out")
    return out, {"feeds": feeds, "sources": sources[1:]}


def _xception(b: _Builder, x, s: BlockSpec):
    y = b.relu(b.separable(x, s.in_channels, s.out_channels))
    y = b.separable(y, s.out_channels, s.out_channels, stride=s.stride)
    shortcut = b.bn(b.conv(x, s.in_channels, s.out_channels, k=1, stride=s.stride), s.out_channels)
    return b.relu(b.add(Add(), y, shortcut, tag="shortcut")), {}


def _mobilenet(b: _Builder, x, s: BlockSpec):
    y = b.relu(b.bn(b.dw(x, s.in_channels, 3, s.stride), s.in_channels))
    y = b.relu(b.bn(b.conv(y, s.in_channels, s.out_channels, k=1), s.out_channels))
    return y, {}


def _inverted_residual(b: _Builder, x, s: BlockSpec):
    hidden = s.in_channels * s.expansion_factor
    y = b.cbr(x, s.in_channels, hidden, k=1, cap=6)
    y = b.relu(b.bn(b.dw(y, hidden, 3, s.stride), hidden), cap=6)
    y = b.bn(b.conv(y, hidden, s.out_channels, k=1), s.out_channels)
    if s.has_shortcut:
        y = b.add(Add(), y, x, tag="shortcut")
    return y, {}


def _nasnet(b: _Builder, x, s: BlockSpec):
    half = s.out_channels // 2
    reduce = s.family == "nasnet_reduction"
    stride = 2 if reduce else 1
    h = b.bn(b.conv(b.relu(x), s.in_channels, half, k=1), half)

    def gate(node):
        if not s.drop_path_gates:
            return node
        return b.add(DropPath(s.drop_path_rate), node, tag="drop_path")

    sep3 = b.separable(b.relu(h), half, half, k=3, stride=stride)
    sep5 = b.separable(b.relu(h), half, half, k=5, stride=stride)
    keep = b.maxpool(h) if reduce else h
    left = b.add(Add(), gate(sep3), gate(keep))
    right = b.add(Add(), gate(sep5), gate(keep))
    return b.add(Concat(), left, right), {}


_BUILDERS = {
    "unet_plain": _plain,
    "vgg": _plain,
    "residual": _residual,
    "dense": _dense,
    "xception": _xception,
    "mobilenet": _mobilenet,
    "inverted_residual": _inverted_residual,
    "nasnet_normal": _nasnet,
    "nasnet_reduction": _nasnet,
}


def build_nasnet_cell(spec: BlockSpec, graph: Graph | None = None, source: int | None = None, rng=None) -> Subgraph:
    if not spec.family.startswith("nasnet"):
        raise BlockError(f"build_nasnet_cell needs a nasnet family, got {spec.family!r}")
    return build_block(spec, graph, source, rng)


def dense_connections(block: Subgraph) -> int:
    """Count feed connections into the dense layers by walking graph edges.

    Each dense layer is fed either directly by one tensor or through a
    concatenation node; every tensor entering a layer is one connection.
    """
    graph = block.graph
    total = 0
    for nid in block.node_ids:
        node = graph.node(nid)
        if node.layer.kind != "batchnorm":
            continue
        (src,) = node.inputs
        feeder = graph.node(src)
        if feeder.tag == "dense_feed":
            total += len(feeder.inputs)
        elif src == block.input_id:
            total += 1
    return total
