"""Graph nodes wrapping the tensor-core primitives.

A layer owns its parameters and exposes ``forward(inputs, ctx) -> (y, cache)``
and ``backward(grad, cache) -> (input_grads, param_grads)``. Nothing is cached
on the layer itself, so one built graph can serve several forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deepseg import tensor_core as tc
from deepseg.tensor_core import DTYPE, BatchNormState, ConvParams, RngStream


@dataclass
class RunContext:
    """Per-pass switches: train/infer mode, randomness and drop-path progress."""

    train: bool = False
    rng: RngStream | None = None
    progress: float = 0.0
    dropout_rate: float = 0.5
    update_stats: bool = True

    def stream_for(self, node_id: int) -> np.random.Generator:
        base = self.rng if self.rng is not None else RngStream(0)
        return base.child(node_id).generator()


def he_normal(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class Layer:
    kind = "layer"
    # shape-repair helpers (pad/crop) are excluded from the layer count
    counts_as_layer = True
    arity = 1

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, inputs, ctx: RunContext, node_id: int = 0):
        raise NotImplementedError

    def backward(self, grad, cache):
        raise NotImplementedError

    def expected_param_count(self) -> int:
        return 0

    def out_channels(self, in_channels: list[int]) -> int:
        return in_channels[0]

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, rng=None):
        super().__init__()
        if k % 2 == 0:
            raise ValueError(f"conv kernel size must be odd, got {k}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.params["weight"] = he_normal((c_out, c_in, k, k), c_in * k * k, rng)
        self.params["bias"] = np.zeros(c_out, dtype=DTYPE)

    def _pads(self, x):
        _, _, h, w = x.shape
        return (*tc.same_padding(h, self.k, self.stride), *tc.same_padding(w, self.k, self.stride))

    def _conv(self):
        return ConvParams(self.params["weight"], self.params["bias"], self.stride, 0)

    def forward(self, inputs, ctx, node_id=0):
        (x,) = inputs
        pads = self._pads(x)
        xp = tc.pad2d(x, *pads)
        return tc.conv2d_forward(xp, self._conv()), (xp, pads)

    def backward(self, grad, cache):
        xp, pads = cache
        gx, gw, gb = tc.conv2d_backward(xp, self._conv(), grad)
        return [tc.pad2d_backward(gx, *pads)], {"weight": gw, "bias": gb}

    def expected_param_count(self):
        return self.c_out * self.c_in * self.k * self.k + self.c_out

    def out_channels(self, in_channels):
        return self.c_out

    def __repr__(self):
        return f"Conv2D({self.c_in}->{self.c_out}, k={self.k}, s={self.stride})"


class DepthwiseConv2D(Layer):
    kind = "depthwise_conv"

    def __init__(self, channels: int, k: int = 3, stride: int = 1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.k, self.stride = channels, k, stride
        self.params["weight"] = he_normal((channels, 1, k, k), k * k, rng)

    def _pads(self, x):
        _, _, h, w = x.shape
        return (*tc.same_padding(h, self.k, self.stride), *tc.same_padding(w, self.k, self.stride))

    def forward(self, inputs, ctx, node_id=0):
        (x,) = inputs
        pads = self._pads(x)
        xp = tc.pad2d(x, *pads)
        return tc.depthwise_conv_forward(xp, self.params["weight"], self.stride, 0), (xp, pads)

    def backward(self, grad, cache):
        xp, pads = cache
        gx, gk = tc.depthwise_conv_backward(xp, self.params["weight"], grad, self.stride, 0)
        return [tc.pad2d_backward(gx, *pads)], {"weight": gk}

    def expected_param_count(self):
        return self.channels * self.k * self.k

    def __repr__(self):
        return f"DepthwiseConv2D({self.channels}, k={self.k}, s={self.stride})"


class UpConv2x(Layer):
    kind = "upconv"

    def __init__(self, c_in: int, c_out: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        self.params["weight"] = he_normal((c_in, c_out, 2, 2), c_in, rng)
        self.params["bias"] = np.zeros(c_out, dtype=DTYPE)

    def forward(self, inputs, ctx, node_id=0):
        (x,) = inputs
        return tc.upconv2x_forward(x, self.params["weight"], self.params["bias"]), x

    def backward(self, grad, cache):
        gx, gw, gb = tc.upconv2x_backward(cache, self.params["weight"], grad)
        return [gx], {"weight": gw, "bias": gb}

    def expected_param_count(self):
        return self.c_in * self.c_out * 4 + self.c_out

    def out_channels(self, in_channels):
        return self.c_out

    def __repr__(self):
        return f"UpConv2x({self.c_in}->{self.c_out})"


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        state = BatchNormState.fresh(channels, momentum=momentum, epsilon_bn=eps)
        self.params["gamma"] = state.gamma
        self.params["beta"] = state.beta
        self.buffers["running_mean"] = state.running_mean
        self.buffers["running_var"] = state.running_var
        self.momentum, self.eps = momentum, eps

    def state(self, train: bool) -> BatchNormState:
        return BatchNormState(
            self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            self.momentum, self.eps, "train" if train else "infer",
        )

    def forward(self, inputs, ctx, node_id=0):
        (x,) = inputs
        return tc.batchnorm_forward(x, self.state(ctx.train), update_stats=ctx.train and ctx.update_stats)

    def backward(self, grad, cache):
        gx, gg, gb = tc.batchnorm_backward(grad, cache)
        return [gx], {"gamma": gg, "beta": gb}

    def expected_param_count(self):
        return 2 * self.channels

    def __repr__(self):
        return f"BatchNorm({self.channels})"


class ReLU(Layer):
    kind = "relu"

    def __init__(self, cap: float | None = None):
        super().__init__()
        self.cap = cap

    def forward(self, inputs, ctx, node_id=0):
        (x,) = inputs
        return tc.relu_forward(x, self.cap), x

    def backward(self, grad, cache):
        return [tc.relu_backward(cache, grad, self.cap)], {}

    def __repr__(self):
        return "ReLU6()" if self.cap == 6 else "ReLU()"


class MaxPool2x2(Layer):
    kind = "maxpool"

    def forward(self, inputs, ctx, node_id=0):
        (x,) = inputs
        return tc.maxpool2x2_forward(x)

    def backward(self, grad, cache):
        return [tc.maxpool2x2_backward(grad, cache)], {}


class SpatialDropout(Layer):
    """Channel dropout; the rate comes from the run context."""

    kind = "dropout"

    def forward(self, inputs, ctx, node_id=0):
        (x,) = inputs
        rng = ctx.stream_for(node_id) if ctx.train and ctx.dropout_rate > 0 else None
        return tc.spatial_dropout_forward(x, ctx.dropout_rate, rng, ctx.train)

    def backward(self, grad, cache):
        return [tc.spatial_dropout_backward(grad, cache)], {}


class DropPath(Layer):
    """Scheduled drop-path gate around one cell branch."""

    kind = "drop_path"

    def __init__(self, rate_final: float):
        super().__init__()
        if not 0.0 <= rate_final < 1.0:
            raise ValueError(f"drop-path rate must lie in [0, 1), got {rate_final}")
        self.rate_final = rate_final

    def forward(self, inputs, ctx, node_id=0):
        (x,) = inputs
        rng = ctx.stream_for(node_id) if ctx.train else None
        return scheduled_drop_path(x, self.rate_final, ctx.progress, rng, ctx.train)

    def backward(self, grad, cache):
        return [grad if cache is None else grad * cache[:, None, None, None]], {}


def scheduled_drop_path(x, rate_final: float, progress: float, rng, train: bool):
    """Drop whole per-sample branch outputs with probability rate_final * progress.

    Returns (output, mask); mask is the (n,) multiplier or None for identity.
    """
    if not 0.0 <= rate_final < 1.0:
        raise ValueError(f"drop-path rate must lie in [0, 1), got {rate_final}")
    p = rate_final * min(max(progress, 0.0), 1.0)
    if not train or p == 0.0:
        return x, None
    keep = rng.random(x.shape[0]) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * mask[:, None, None, None], mask


class Add(Layer):
    kind = "add"
    arity = 2

    def forward(self, inputs, ctx, node_id=0):
        a, b = inputs
        return tc.add_elementwise(a, b), None

    def backward(self, grad, cache):
        return list(tc.add_backward(grad)), {}


class Concat(Layer):
    kind = "concat"
    arity = -1

    def forward(self, inputs, ctx, node_id=0):
        return tc.concat_channels(*inputs), [t.shape[1] for t in inputs]

    def backward(self, grad, cache):
        return tc.concat_backward(grad, cache), {}

    def out_channels(self, in_channels):
        return sum(in_channels)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, inputs, ctx, node_id=0):
        (x,) = inputs
        p = tc.softmax_channel_forward(x)
        return p, p

    def backward(self, grad, cache):
        return [tc.softmax_channel_backward(cache, grad)], {}


class PadEven(Layer):
    kind = "pad_even"
    counts_as_layer = False

    def forward(self, inputs, ctx, node_id=0):
        (x,) = inputs
        return tc.pad_to_even(x), x.shape

    def backward(self, grad, cache):
        _, _, h, w = cache
        return [np.ascontiguousarray(grad[:, :, :h, :w])], {}


class CropTo(Layer):
    """Crop the first input to the spatial extents of the second (reference)."""

    kind = "crop"
    counts_as_layer = False
    arity = 2

    def forward(self, inputs, ctx, node_id=0):
        x, ref = inputs
        return tc.center_crop(x, ref.shape[2], ref.shape[3]), (x.shape, ref.shape)

    def backward(self, grad, cache):
        full, ref = cache
        return [tc.crop_backward(grad, full), None], {}
