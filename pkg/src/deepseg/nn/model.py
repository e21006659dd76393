"""Encoder-decoder assembly with skip wiring, plus parameter/layer accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from deepseg.nn.blocks import BlockError, BlockSpec, _Builder, build_block, dense_spec
from deepseg.nn.graph import Graph, GraphError, Subgraph, Trace
from deepseg.nn.layers import Concat, CropTo, RunContext, Softmax, SpatialDropout, UpConv2x

ENCODER_FAMILIES = (
    "unet_plain",
    "unet_modified",
    "vgg",
    "residual",
    "dense",
    "xception",
    "mobilenet",
    "inverted_residual",
    "nasnet",
)


@dataclass
class ModelConfig:
    encoder_family: str = "unet_plain"
    depth: int = 4
    base_filters: int = 32
    num_classes: int = 2
    input_shape: tuple[int, int, int] = (1, 224, 224)
    seed: int = 0
    expansion_factor: int = 6
    dense_layers: int = 4
    drop_path_rate: float = 0.1

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.encoder_family not in ENCODER_FAMILIES:
            raise BlockError(f"unknown encoder family {self.encoder_family!r}; expected one of {ENCODER_FAMILIES}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (channels, height, width), got {self.input_shape}")

    def filters(self, stage: int) -> int:
        return self.base_filters * 2**stage

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelGraph(Graph):
    """An assembled network. ``logits_id`` feeds the single softmax ``head_id``."""

    config: ModelConfig = None
    skip_taps: list[int] = field(default_factory=list)
    bottleneck_id: int = 0
    dropout_id: int = 0
    logits_id: int = 0
    head_id: int = 0

    def __post_init__(self):
        Graph.__init__(self)

    def predict_proba(self, x: np.ndarray, ctx: RunContext | None = None) -> np.ndarray:
        probs, _ = self.forward(x, ctx or RunContext(train=False))
        return probs

    def backward_from_logits(self, trace: Trace, grad_logits: np.ndarray):
        """Backpropagate a gradient taken with respect to the pre-softmax logits."""
        return self.backward(trace, grad_logits, seed_node=self.logits_id)

    def check(self) -> None:
        super().check()
        heads = [n for n in self.layers() if n.layer.kind == "softmax"]
        if len(heads) != 1:
            raise GraphError(f"expected exactly one softmax head, found {len(heads)}")
        if len(self.skip_taps) != self.config.depth:
            raise GraphError(f"{len(self.skip_taps)} skip taps for decoder depth {self.config.depth}")


# ---------------------------------------------------------------------------
# Encoder stages
# ---------------------------------------------------------------------------


def _stage(b: _Builder, x: int, cfg: ModelConfig, c_in: int, c_out: int, downsample: bool) -> int:
    """One encoder resolution level: optional downsampling then the family body."""
    fam = cfg.encoder_family
    stride = 2 if downsample else 1

    def block(spec: BlockSpec, src: int) -> int:
        sub = build_block(spec, b.g, src, b.rng)
        b.ids.extend(sub.node_ids)
        return sub.output_id

    if fam in ("unet_plain", "unet_modified"):
        spec = BlockSpec("unet_plain", c_in, c_out, stride, conv_count=2, batch_norm=fam == "unet_modified")
        return block(spec, x)
    if fam == "vgg":
        level = int(np.log2(c_out // cfg.base_filters))
        return block(BlockSpec("vgg", c_in, c_out, stride, conv_count=2 if level < 2 else 3), x)
    if fam == "residual":
        if downsample:
            x = b.maxpool(x)
        x = block(BlockSpec("residual", c_in, c_out, projection=c_in != c_out), x)
        return block(BlockSpec("residual", c_out, c_out), x)
    if fam == "dense":
        if downsample:
            x = b.maxpool(x)
        growth = max(c_out // 4, 1)
        spec = dense_spec(c_in, growth, cfg.dense_layers)
        x = block(spec, x)
        return b.cbr(x, spec.out_channels, c_out, k=1)

    # stride-2 families: the stem conv makes the single-channel input usable
    if not downsample:
        x = b.cbr(x, c_in, c_out)
        c_in = c_out
    if fam == "xception":
        x = block(BlockSpec("xception", c_in, c_out, stride), x)
        return block(BlockSpec("xception", c_out, c_out), x)
    if fam == "mobilenet":
        x = block(BlockSpec("mobilenet", c_in, c_out, stride), x)
        return block(BlockSpec("mobilenet", c_out, c_out), x)
    if fam == "inverted_residual":
        t = cfg.expansion_factor
        x = block(BlockSpec("inverted_residual", c_in, c_out, stride, expansion_factor=t), x)
        return block(BlockSpec("inverted_residual", c_out, c_out, 1, expansion_factor=t), x)
    if fam == "nasnet":
        rate = cfg.drop_path_rate
        first = "nasnet_reduction" if downsample else "nasnet_normal"
        x = block(BlockSpec(first, c_in, c_out, stride, drop_path_rate=rate), x)
        return block(BlockSpec("nasnet_normal", c_out, c_out, drop_path_rate=rate), x)
    raise BlockError(f"unknown encoder family {fam!r}")


def build_decoder(graph: Graph, config: ModelConfig, source: int, source_channels: int,
                  skip_taps: list[int], skip_channel_list: list[int], rng=None) -> Subgraph:
    """Up-convolve, concatenate the matching skip, then two conv->BN->ReLU per stage.

    ``skip_taps`` are ordered shallow to deep; the decoder consumes them deep
    to shallow and finishes with a 1x1 conv to num_classes and a softmax.
    """
    if len(skip_taps) != config.depth or len(skip_channel_list) != config.depth:
        raise GraphError(
            f"decoder depth {config.depth} needs {config.depth} skips, got {len(skip_taps)} taps / "
            f"{len(skip_channel_list)} channel counts"
        )
    b = _Builder(graph, rng if rng is not None else np.random.default_rng(config.seed))
    x, c = source, source_channels
    for d in reversed(range(config.depth)):
        f = config.filters(d)
        skip, skip_c = skip_taps[d], skip_channel_list[d]
        up = b.add(UpConv2x(c, f, rng=b.rng), x)
        # odd extents were padded before downsampling; trim the surplus row/col
        up = b.add(CropTo(), up, skip)
        x = b.add(Concat(), up, skip, tag="skip_concat")
        x = b.cbr(x, f + skip_c, f)
        x = b.cbr(x, f, f)
        c = f
    logits = b.conv(x, c, config.num_classes, k=1, tag="logits")
    head = b.add(Softmax(), logits, tag="head")
    graph.output_id = head
    return Subgraph(graph, source, head, b.ids, source_channels, config.num_classes,
                    {"logits": logits, "head": head})


def assemble_model(config: ModelConfig) -> ModelGraph:
    model = ModelGraph(config=config)
    b = _Builder(model, np.random.default_rng(config.seed))
    x = model.input_id
    c_in = config.input_shape[0]
    taps, tap_channels = [], []
    for d in range(config.depth):
        x = _stage(b, x, config, c_in, config.filters(d), downsample=d > 0)
        taps.append(x)
        tap_channels.append(config.filters(d))
        c_in = config.filters(d)
    x = _stage(b, x, config, c_in, config.filters(config.depth), downsample=True)
    model.bottleneck_id = x
    model.dropout_id = b.add(SpatialDropout(), x, tag="dropout")
    model.skip_taps = taps
    dec = build_decoder(model, config, model.dropout_id, config.filters(config.depth), taps, tap_channels, b.rng)
    model.logits_id = dec.meta["logits"]
    model.head_id = dec.meta["head"]
    model.check()
    return model


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


def count_parameters(model: Graph) -> int:
    """Trainable scalars from each layer's declared shape arithmetic
    (conv weights + bias, depthwise kernels, BN gamma + beta)."""
    return sum(n.layer.expected_param_count() for n in model.layers())


def count_layers(model: Graph) -> int:
    """Count graph nodes: every conv, depthwise conv, BN, activation, pool,
    up-convolution, concat/add, dropout, drop-path gate and softmax is one
    layer. The input placeholder and the pad/crop shape-repair nodes are not."""
    return sum(1 for n in model.layers() if n.layer.counts_as_layer)


def skip_channels(model: ModelGraph) -> list[int]:
    return [model.config.filters(d) for d in range(len(model.skip_taps))]
