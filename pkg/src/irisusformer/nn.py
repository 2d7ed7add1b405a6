"""Network building blocks: dense resampling convolutions, convolutional
projections, (shifted) window attention with relative position bias, and the
encoder/decoder transformer block pairs."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .tensor import ShapeError, Tensor

MASK_VALUE = -1e9
INIT_STD = 0.02


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Buffer(Tensor):
    """Non-trainable state saved with the model (e.g. BN running stats)."""

    __slots__ = ()


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        for name, value in self._children():
            if isinstance(value, Buffer):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


# -- primitive layers ---------------------------------------------------------

class Linear(Module):
    """Per-token affine map on the last axis; weight stored as [in, out]."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (c_in, c_out)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (c_out, c_in // groups, kernel, kernel)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = Buffer(np.zeros(channels))
        self.running_var = Buffer(np.ones(channels))
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.weight, self.bias, self.running_mean.data, self.running_var.data,
                            self.training, self.momentum, self.eps)


# -- dense resampling ---------------------------------------------------------

class DDC(Module):
    """Dense down-sampling convolution: unshuffle, 1x1 conv, BN, GELU."""

    def __init__(self, c_in: int, c_out: int, r: int, rng: np.random.Generator):
        self.r = r
        self.conv = Conv2d(c_in * r * r, c_out, 1, rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.gelu(self.bn(self.conv(T.pixel_unshuffle(x, self.r))))


class DUC(Module):
    """Dense up-sampling convolution: 1x1 conv, BN, GELU, pixel shuffle."""

    def __init__(self, c_in: int, c_out: int, r: int, rng: np.random.Generator):
        self.r = r
        self.conv = Conv2d(c_in, c_out * r * r, 1, rng)
        self.bn = BatchNorm2d(c_out * r * r)

    def forward(self, x: Tensor) -> Tensor:
        return T.pixel_shuffle(T.gelu(self.bn(self.conv(x))), self.r)


def ddc(x: Tensor, r: int, c_out: int, rng: np.random.Generator) -> Tensor:
    return DDC(x.shape[1], c_out, r, rng)(x)


def duc(x: Tensor, r: int, c_out: int, rng: np.random.Generator) -> Tensor:
    return DUC(x.shape[1], c_out, r, rng)(x)


# -- windows ------------------------------------------------------------------

@dataclass(frozen=True)
class WindowSpec:
    window_size: int
    shift: int
    height: int
    width: int

    def __post_init__(self):
        m = self.window_size
        if m < 1:
            raise ValueError("window size must be positive")
        if self.height % m or self.width % m:
            raise ShapeError(f"feature map {self.height}x{self.width} not divisible by window {m}")
        if self.shift not in (0, m // 2):
            raise ValueError(f"shift must be 0 or {m // 2}, got {self.shift}")

    @property
    def num_windows(self) -> int:
        return (self.height // self.window_size) * (self.width // self.window_size)


def window_partition(x: Tensor, spec: WindowSpec) -> Tensor:
    """[B, C, H, W] -> [B*N, M*M, C], rolling by -shift first."""
    nb, c, h, w = x.shape
    if (h, w) != (spec.height, spec.width):
        raise ShapeError(f"input {h}x{w} does not match window spec {spec.height}x{spec.width}")
    m = spec.window_size
    y = T.transpose(x, (0, 2, 3, 1))
    if spec.shift:
        y = T.roll(y, (-spec.shift, -spec.shift), (1, 2))
    y = T.reshape(y, (nb, h // m, m, w // m, m, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (nb * spec.num_windows, m * m, c))


def window_reverse(tokens: Tensor, spec: WindowSpec) -> Tensor:
    """Exact inverse of :func:`window_partition`, including the un-roll."""
    m, h, w = spec.window_size, spec.height, spec.width
    total, mm, c = tokens.shape
    if mm != m * m or total % spec.num_windows:
        raise ShapeError(f"token tensor {tokens.shape} does not match window spec {spec}")
    nb = total // spec.num_windows
    y = T.reshape(tokens, (nb, h // m, w // m, m, m, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    y = T.reshape(y, (nb, h, w, c))
    if spec.shift:
        y = T.roll(y, (spec.shift, spec.shift), (1, 2))
    return T.transpose(y, (0, 3, 1, 2))


@lru_cache(maxsize=64)
def _shift_mask(window_size: int, shift: int, height: int, width: int) -> np.ndarray:
    m = window_size
    labels = np.zeros((height, width), dtype=np.int64)
    bands = (slice(0, -m), slice(-m, -shift), slice(-shift, None))
    region = 0
    for hs in bands:
        for ws in bands:
            labels[hs, ws] = region
            region += 1
    lab = labels.reshape(height // m, m, width // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    mask = np.where(lab[:, :, None] != lab[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def build_shift_mask(spec: WindowSpec) -> np.ndarray:
    """Additive [N, M*M, M*M] mask blocking pairs from different pre-roll regions."""
    if spec.shift != spec.window_size // 2 or spec.shift == 0:
        raise ValueError("shift mask is only defined for shift == window_size // 2 > 0")
    return _shift_mask(spec.window_size, spec.shift, spec.height, spec.width)


@lru_cache(maxsize=16)
def relative_position_index(window_size: int) -> np.ndarray:
    """[M*M, M*M] map from token pair to its row in the bias table."""
    m = window_size
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    index = rel[0] * (2 * m - 1) + rel[1]
    index.setflags(write=False)
    return index


class RelativePositionBias(Module):
    def __init__(self, window_size: int, heads: int, rng: np.random.Generator):
        self.window_size, self.heads = window_size, heads
        self.table = Parameter(rng.normal(0.0, INIT_STD, ((2 * window_size - 1) ** 2, heads)))

    @property
    def index(self) -> np.ndarray:
        return relative_position_index(self.window_size)

    def forward(self) -> Tensor:
        mm = self.window_size ** 2
        b = T.take(self.table, self.index.reshape(-1))
        return T.transpose(T.reshape(b, (mm, mm, self.heads)), (2, 0, 1))


# -- attention ----------------------------------------------------------------

class ConvProjection(Module):
    """Depthwise 3x3 followed by pointwise 1x1; a per-token linear map when
    ``use_conv`` is off."""

    def __init__(self, channels: int, rng: np.random.Generator, use_conv: bool = True):
        self.use_conv = use_conv
        if use_conv:
            self.depthwise = Conv2d(channels, channels, 3, rng, padding=1, groups=channels, bias=False)
            self.pointwise = Conv2d(channels, channels, 1, rng)
        else:
            self.linear = Linear(channels, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        if self.use_conv:
            return self.pointwise(self.depthwise(x))
        y = self.linear(T.transpose(x, (0, 2, 3, 1)))
        return T.transpose(y, (0, 3, 1, 2))


def conv_projection(x: Tensor, which: str, params: "WindowAttention") -> Tensor:
    proj = {"Q": params.proj_q, "K": params.proj_k, "V": params.proj_v}[which]
    return proj(x)


class WindowAttention(Module):
    def __init__(self, channels: int, heads: int, window_size: int, rng: np.random.Generator,
                 use_conv: bool = True):
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.channels, self.heads, self.window_size = channels, heads, window_size
        self.head_dim = channels // heads
        self.proj_q = ConvProjection(channels, rng, use_conv)
        self.proj_k = ConvProjection(channels, rng, use_conv)
        self.proj_v = ConvProjection(channels, rng, use_conv)
        self.out = Linear(channels, channels, rng)
        self.rel_bias = RelativePositionBias(window_size, heads, rng)
        self.last_weights: np.ndarray | None = None

    def _heads(self, t: Tensor) -> Tensor:
        n, mm, _ = t.shape
        return T.transpose(T.reshape(t, (n, mm, self.heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, x: Tensor, q_src: Tensor, spec: WindowSpec, mask: np.ndarray | None = None) -> Tensor:
        if q_src.shape != x.shape:
            raise ShapeError(f"query source {q_src.shape} does not match key/value source {x.shape}")
        if (mask is not None) != (spec.shift > 0):
            raise ValueError("a shift mask is required exactly when the window spec is shifted")
        q = self._heads(window_partition(self.proj_q(q_src), spec))
        k = self._heads(window_partition(self.proj_k(x), spec))
        v = self._heads(window_partition(self.proj_v(x), spec))
        nw, mm = spec.num_windows, spec.window_size ** 2
        logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        logits = logits + self.rel_bias()
        if mask is not None:
            logits = T.reshape(logits, (-1, nw, self.heads, mm, mm)) + mask[None, :, None]
            logits = T.reshape(logits, (-1, self.heads, mm, mm))
        attn = T.softmax(logits, axis=-1)
        self.last_weights = attn.data
        y = T.matmul(attn, v)
        y = T.reshape(T.transpose(y, (0, 2, 1, 3)), (-1, mm, self.channels))
        return window_reverse(self.out(y), spec)


def window_attention(x: Tensor, q_src: Tensor, spec: WindowSpec, params: WindowAttention,
                     mask: np.ndarray | None = None) -> Tensor:
    return params(x, q_src, spec, mask)


# -- transformer blocks -------------------------------------------------------

class MLP(Module):
    def __init__(self, channels: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(channels, channels * ratio, rng)
        self.fc2 = Linear(channels * ratio, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def _to_tokens(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 2, 3, 1))


def _to_map(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 3, 1, 2))


class TransformerBlock(Module):
    """One pre-norm block; self-attention by default, cross-attention when a
    query source is passed."""

    def __init__(self, channels: int, heads: int, window_size: int, shifted: bool,
                 rng: np.random.Generator, use_conv: bool = True, mlp_ratio: int = 4):
        self.window_size, self.shifted = window_size, shifted
        self.norm1 = LayerNorm(channels)
        self.attn = WindowAttention(channels, heads, window_size, rng, use_conv)
        self.norm2 = LayerNorm(channels)
        self.mlp = MLP(channels, mlp_ratio, rng)

    def window_spec(self, h: int, w: int) -> WindowSpec:
        m = self.window_size
        # a map that is a single window gains nothing from shifting
        shift = m // 2 if self.shifted and (h > m or w > m) else 0
        return WindowSpec(m, shift, h, w)

    def forward(self, x: Tensor, q_src: Tensor | None = None) -> Tensor:
        spec = self.window_spec(x.shape[2], x.shape[3])
        mask = build_shift_mask(spec) if spec.shift else None
        kv = _to_map(self.norm1(_to_tokens(x)))
        q = kv if q_src is None else _to_map(self.norm1(_to_tokens(q_src)))
        x = x + self.attn(kv, q, spec, mask)
        t = _to_tokens(x)
        t = t + self.mlp(self.norm2(t))
        return _to_map(t)


class EncoderBlockPair(Module):
    """Regular-window block followed by a shifted-window block."""

    def __init__(self, channels: int, heads: int, window_size: int, rng: np.random.Generator,
                 use_conv: bool = True, mlp_ratio: int = 4):
        self.blocks = [TransformerBlock(channels, heads, window_size, s, rng, use_conv, mlp_ratio)
                       for s in (False, True)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class DecoderBlockPair(Module):
    """Cross-attention pair whose queries come from the skip features.

    With ``use_cross`` off the skip and decoder streams are concatenated,
    fused by a 1x1 conv and passed through a self-attention pair instead.
    """

    def __init__(self, channels: int, heads: int, window_size: int, rng: np.random.Generator,
                 use_conv: bool = True, use_cross: bool = True, mlp_ratio: int = 4):
        self.use_cross = use_cross
        if use_cross:
            self.blocks = [TransformerBlock(channels, heads, window_size, s, rng, use_conv, mlp_ratio)
                           for s in (False, True)]
        else:
            self.fuse = Conv2d(2 * channels, channels, 1, rng)
            self.pair = EncoderBlockPair(channels, heads, window_size, rng, use_conv, mlp_ratio)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        if x.shape != skip.shape:
            raise ShapeError(f"decoder stream {x.shape} and skip {skip.shape} differ")
        if not self.use_cross:
            return self.pair(self.fuse(T.concat([skip, x], axis=1)))
        for block in self.blocks:
            x = block(x, skip)
        return x
