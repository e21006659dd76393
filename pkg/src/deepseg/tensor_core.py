"""Rank-4 tensor helpers and the differentiable layer primitives.

Every tensor is a numpy array laid out as (batch, channels, rows, cols).
Operations are pure functions: forward returns the result (plus whatever the
backward pass needs), backward takes the same inputs and the upstream gradient.
All kernels preserve the dtype of their inputs; the engine itself stores
float32, while gradient oracles may call the same kernels in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor extents violate an operation's contract."""


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


def as_tensor4(data, dtype=None, name: str = "tensor") -> np.ndarray:
    """Validate (and convert) ``data`` into a Tensor4 value.

    The array must have four axes, every extent >= 1. ``dtype`` defaults to
    keeping floating inputs as they are and casting everything else to float32.
    """
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected 4 axes (n, c, h, w), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"{name}: every extent must be >= 1, got shape {arr.shape}")
    return arr


def zeros4(n: int, c: int, h: int, w: int, dtype=DTYPE) -> np.ndarray:
    return as_tensor4(np.zeros((n, c, h, w), dtype=dtype))


@dataclass
class ConvParams:
    """Weights (c_out, c_in, k_h, k_w), bias (c_out,), stride and symmetric padding."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-D, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match c_out={self.weights.shape[0]}"
            )
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon_bn: float = 1e-5
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, dtype=DTYPE, **kwargs) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kwargs,
        )

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ShapeError(f"batch-norm vector {name} has shape {getattr(self, name).shape}, expected {c}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.epsilon_bn <= 0:
            raise ValueError("epsilon_bn must be positive")
        if self.mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {self.mode!r}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream (Philox) keyed by a 64-bit seed.

    Identical (seed, counter) pairs give identical draw sequences. ``child``
    derives an independent stream from a tuple of integer keys, so draws for
    a given (epoch, sample) never depend on the order workers run in.
    """

    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        key = self.seed & 0xFFFFFFFFFFFFFFFF
        return np.random.Generator(np.random.Philox(key=key, counter=self.counter))

    def child(self, *keys: int) -> "RngStream":
        words = [self.seed & 0xFFFFFFFFFFFFFFFF, self.counter & 0xFFFFFFFFFFFFFFFF]
        words += [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
        state = np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)
        return RngStream(int(state[0]))

    def advance(self, steps: int = 1) -> "RngStream":
        return RngStream(self.seed, self.counter + steps)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _out_extent(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral or empty output {axis}: ({size} + 2*{pad} - {k})/{stride} + 1"
        )
    return span // stride + 1


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _window(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Cross-correlation plus per-channel bias; output (n, c_out, h_out, w_out)."""
    x = as_tensor4(x, name="conv2d input")
    w = params.weights
    c_out, c_in, kh, kw = w.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d: input shape {x.shape} does not match weights shape {w.shape}")
    n, _, h, wd = x.shape
    s, p = params.stride, params.padding
    ho = _out_extent(h, kh, s, p, "height")
    wo = _out_extent(wd, kw, s, p, "width")
    xp = _pad(x, p)
    dtype = np.result_type(x.dtype, w.dtype)
    out = np.zeros((n, ho, wo, c_out), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            patch = _window(xp, i, j, s, ho, wo)
            out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1]))
    out = out.transpose(0, 3, 1, 2)
    out += params.bias.astype(dtype)[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Return (grad_input, grad_weights, grad_bias) of ``conv2d_forward``."""
    x = as_tensor4(x, name="conv2d input")
    w = params.weights
    c_out, c_in, kh, kw = w.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d: input shape {x.shape} does not match weights shape {w.shape}")
    n, _, h, wd = x.shape
    s, p = params.stride, params.padding
    ho = _out_extent(h, kh, s, p, "height")
    wo = _out_extent(wd, kw, s, p, "width")
    if grad_out.shape != (n, c_out, ho, wo):
        raise ShapeError(
            f"conv2d_backward: grad_out shape {grad_out.shape} != forward output {(n, c_out, ho, wo)}"
        )
    xp = _pad(x, p)
    dtype = np.result_type(x.dtype, w.dtype, grad_out.dtype)
    g = grad_out.transpose(0, 2, 3, 1)  # n, ho, wo, c_out
    grad_xp = np.zeros(xp.shape, dtype=dtype)
    grad_w = np.zeros(w.shape, dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            patch = _window(xp, i, j, s, ho, wo)
            grad_w[:, :, i, j] = np.tensordot(g, patch, axes=([0, 1, 2], [0, 2, 3]))
            contrib = np.tensordot(g, w[:, :, i, j], axes=([3], [0]))  # n, ho, wo, c_in
            _window(grad_xp, i, j, s, ho, wo)[...] += contrib.transpose(0, 3, 1, 2)
    grad_b = grad_out.sum(axis=(0, 2, 3)).astype(dtype)
    grad_x = grad_xp[:, :, p : p + h, p : p + wd] if p else grad_xp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def depthwise_conv_forward(x: np.ndarray, kernels: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Per-channel spatial filtering; ``kernels`` is (c, 1, k_h, k_w) or (c, k_h, k_w)."""
    x = as_tensor4(x, name="depthwise input")
    k = _depthwise_kernels(kernels, x.shape[1])
    c, kh, kw = k.shape
    n, _, h, wd = x.shape
    ho = _out_extent(h, kh, stride, padding, "height")
    wo = _out_extent(wd, kw, stride, padding, "width")
    xp = _pad(x, padding)
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x.dtype, k.dtype))
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, stride, ho, wo) * k[None, :, i, j, None, None]
    return out


def depthwise_conv_backward(x, kernels, grad_out, stride: int = 1, padding: int = 0):
    """Return (grad_input, grad_kernels) with grad_kernels shaped like ``kernels``."""
    x = as_tensor4(x, name="depthwise input")
    k = _depthwise_kernels(kernels, x.shape[1])
    c, kh, kw = k.shape
    n, _, h, wd = x.shape
    ho = _out_extent(h, kh, stride, padding, "height")
    wo = _out_extent(wd, kw, stride, padding, "width")
    if grad_out.shape != (n, c, ho, wo):
        raise ShapeError(f"depthwise backward: grad_out shape {grad_out.shape} != {(n, c, ho, wo)}")
    xp = _pad(x, padding)
    dtype = np.result_type(x.dtype, k.dtype, grad_out.dtype)
    grad_xp = np.zeros(xp.shape, dtype=dtype)
    grad_k = np.zeros(k.shape, dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            patch = _window(xp, i, j, stride, ho, wo)
            grad_k[:, i, j] = np.einsum("nchw,nchw->c", patch, grad_out)
            _window(grad_xp, i, j, stride, ho, wo)[...] += grad_out * k[None, :, i, j, None, None]
    grad_x = grad_xp[:, :, padding : padding + h, padding : padding + wd] if padding else grad_xp
    return np.ascontiguousarray(grad_x), grad_k.reshape(np.shape(kernels))


def _depthwise_kernels(kernels: np.ndarray, channels: int) -> np.ndarray:
    k = np.asarray(kernels)
    if k.ndim == 4:
        if k.shape[1] != 1:
            raise ShapeError(f"depthwise kernels must be (c, 1, kh, kw), got {k.shape}")
        k = k[:, 0]
    if k.ndim != 3:
        raise ShapeError(f"depthwise kernels must be (c, 1, kh, kw), got {k.shape}")
    if k.shape[0] != channels:
        raise ShapeError(f"depthwise: {k.shape[0]} kernels for {channels} input channels")
    return k


def upconv2x_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-2 transposed convolution with 2x2 kernels; ``weights`` is (c_in, c_out, 2, 2)."""
    x = as_tensor4(x, name="upconv input")
    c_in, c_out, kh, kw = weights.shape
    if (kh, kw) != (2, 2):
        raise ShapeError(f"upconv2x expects 2x2 kernels, got {weights.shape}")
    if x.shape[1] != c_in:
        raise ShapeError(f"upconv2x: input shape {x.shape} does not match weights shape {weights.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"upconv2x: bias shape {bias.shape} != ({c_out},)")
    n, _, h, w = x.shape
    # (n, h, w, c_out, 2, 2) -> interleave the kernel taps into the doubled grid
    y = np.tensordot(x, weights, axes=([1], [0]))
    y = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, c_out, 2 * h, 2 * w)
    y = y + bias.astype(y.dtype)[None, :, None, None]
    return np.ascontiguousarray(y)


def upconv2x_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    """Return (grad_input, grad_weights, grad_bias)."""
    x = as_tensor4(x, name="upconv input")
    c_in, c_out, _, _ = weights.shape
    n, _, h, w = x.shape
    if grad_out.shape != (n, c_out, 2 * h, 2 * w):
        raise ShapeError(f"upconv2x_backward: grad_out shape {grad_out.shape} != {(n, c_out, 2 * h, 2 * w)}")
    g = grad_out.reshape(n, c_out, h, 2, w, 2)  # n, o, h, i, w, j
    grad_x = np.einsum("nohiwj,coij->nchw", g, weights, optimize=True)
    grad_w = np.einsum("nchw,nohiwj->coij", x, g, optimize=True)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Pooling, normalization, activations
# ---------------------------------------------------------------------------


def maxpool2x2_forward(x: np.ndarray):
    """2x2/stride-2 max pooling. Returns (output, argmax) where argmax holds the
    winning tap 0..3 of each window in row-major order (first index on ties)."""
    x = as_tensor4(x, name="maxpool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even extents, got {h}x{w}; pad to even first")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    argmax = win.argmax(axis=-1)
    out = np.take_along_axis(win, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool2x2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    n, c, ho, wo = grad_out.shape
    if argmax.shape != grad_out.shape:
        raise ShapeError(f"maxpool backward: argmax shape {argmax.shape} != grad shape {grad_out.shape}")
    taps = np.zeros((n, c, ho, wo, 4), dtype=grad_out.dtype)
    np.put_along_axis(taps, argmax[..., None], grad_out[..., None], axis=-1)
    grad = taps.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    return grad


def batchnorm_forward(x: np.ndarray, state: BatchNormState, update_stats: bool = True):
    """Normalize per channel. Returns (output, cache).

    Train mode uses biased batch statistics over (n, h, w) and, when
    ``update_stats`` is set, folds them into the running statistics in place.
    """
    x = as_tensor4(x, name="batchnorm input")
    if x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm: input shape {x.shape} has {x.shape[1]} channels, state has {state.channels}")
    dtype = x.dtype
    gamma = state.gamma.astype(dtype)[None, :, None, None]
    beta = state.beta.astype(dtype)[None, :, None, None]
    if state.mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mean
            state.running_var[...] = (1 - m) * state.running_var + m * var
    else:
        mean = state.running_mean.astype(dtype)
        var = state.running_var.astype(dtype)
    inv_std = (1.0 / np.sqrt(var + state.epsilon_bn)).astype(dtype)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma * xhat + beta
    cache = (xhat, inv_std, state.gamma.astype(dtype), state.mode)
    return out, cache


def batchnorm_backward(grad_out: np.ndarray, cache):
    """Return (grad_input, grad_gamma, grad_beta)."""
    xhat, inv_std, gamma, mode = cache
    if grad_out.shape != xhat.shape:
        raise ShapeError(f"batchnorm backward: grad shape {grad_out.shape} != {xhat.shape}")
    axes = (0, 2, 3)
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    scale = (gamma * inv_std)[None, :, None, None]
    if mode == "infer":
        return grad_out * scale, grad_gamma, grad_beta
    count = grad_out.size // grad_out.shape[1]
    grad_x = scale / count * (
        count * grad_out - grad_beta[None, :, None, None] - xhat * grad_gamma[None, :, None, None]
    )
    return grad_x, grad_gamma, grad_beta


def relu_forward(x: np.ndarray, cap: float | None = None) -> np.ndarray:
    out = np.maximum(x, 0)
    if cap is not None:
        out = np.minimum(out, cap)
    return out


def relu_backward(x: np.ndarray, grad_out: np.ndarray, cap: float | None = None) -> np.ndarray:
    # zero gradient exactly at 0 and at the cap
    active = x > 0
    if cap is not None:
        active &= x < cap
    return grad_out * active


def spatial_dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator | None, train: bool):
    """Zero whole (sample, channel) planes with probability ``rate`` in train mode.

    Returns (output, mask) where mask is the (n, c) multiplier applied, or
    None when the op is an identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    n, c = x.shape[:2]
    keep = rng.random((n, c)) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask[:, :, None, None], mask


def spatial_dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return grad_out
    return grad_out * mask[:, :, None, None]


def softmax_channel_forward(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] < 2:
        raise ShapeError(f"softmax over channels needs c >= 2, got shape {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channel_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    dot = (grad_out * probs).sum(axis=1, keepdims=True)
    return probs * (grad_out - dot)


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------


def concat_channels(*tensors: np.ndarray) -> np.ndarray:
    """Stack channels in argument order; all inputs need equal n, h, w."""
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: shapes {ref} and {t.shape} differ outside the channel axis")
    return np.concatenate(tensors, axis=1)


def concat_backward(grad_out: np.ndarray, channel_counts) -> list[np.ndarray]:
    bounds = np.cumsum(channel_counts)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_out, bounds, axis=1)]


def add_elementwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add_elementwise: shapes {a.shape} and {b.shape} differ")
    return a + b


def add_backward(grad_out: np.ndarray):
    return grad_out, grad_out.copy()


def pad_to_even(x: np.ndarray) -> np.ndarray:
    """Zero-pad the bottom row / right column so both extents are even."""
    _, _, h, w = x.shape
    if h % 2 == 0 and w % 2 == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)))


def center_crop(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Crop to (h, w); with an odd surplus the extra row/column is dropped at the end."""
    _, _, xh, xw = x.shape
    if xh < h or xw < w:
        raise ShapeError(f"center_crop: cannot crop {xh}x{xw} to {h}x{w}")
    top, left = (xh - h) // 2, (xw - w) // 2
    return x[:, :, top : top + h, left : left + w]


def crop_backward(grad_out: np.ndarray, full_shape) -> np.ndarray:
    _, _, h, w = grad_out.shape
    top, left = (full_shape[2] - h) // 2, (full_shape[3] - w) // 2
    grad = np.zeros(full_shape, dtype=grad_out.dtype)
    grad[:, :, top : top + h, left : left + w] = grad_out
    return grad


def same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    """(before, after) amounts giving exactly ceil(size / stride) outputs.

    Uneven totals put the extra row/column after, so stride-2 windows on even
    extents stay integral without symmetric padding. A negative ``after``
    means trailing rows the windows never reach (e.g. 1x1 kernels, stride 2).
    """
    out = -(-size // stride)
    total = (out - 1) * stride + k - size
    if total < 0:
        return 0, total
    return total // 2, total - total // 2


def pad2d(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Zero-pad by the given amounts; a negative amount crops that side instead."""
    if not (top or bottom or left or right):
        return x
    _, _, h, w = x.shape
    x = x[:, :, max(-top, 0) : h - max(-bottom, 0), max(-left, 0) : w - max(-right, 0)]
    pads = [max(v, 0) for v in (top, bottom, left, right)]
    if any(pads):
        x = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[1]), (pads[2], pads[3])))
    return x


def pad2d_backward(grad_out: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    _, _, h, w = grad_out.shape
    g = grad_out[:, :, max(top, 0) : h - max(bottom, 0), max(left, 0) : w - max(right, 0)]
    crops = [max(-v, 0) for v in (top, bottom, left, right)]
    if any(crops):
        g = np.pad(g, ((0, 0), (0, 0), (crops[0], crops[1]), (crops[2], crops[3])))
    return np.ascontiguousarray(g)
