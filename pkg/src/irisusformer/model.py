"""U-shaped IrisUsformer assembly with segmentation and auxiliary heads."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import DDC, DUC, Conv2d, DecoderBlockPair, EncoderBlockPair, Module
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    in_channels: int = 1
    base_channels: int = 32
    stage_downsamples: list[int] = field(default_factory=lambda: [4, 2, 2])
    stage_channels: list[int] | None = None
    heads: list[int] = field(default_factory=lambda: [2, 4, 8])
    window_size: int = 4
    num_classes: int = 2
    head_channels: int = 8
    mlp_ratio: int = 4
    use_conv_projection: bool = True
    use_cross_attention: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def channels(self) -> list[int]:
        if self.stage_channels is not None:
            return list(self.stage_channels)
        return [self.base_channels * 2 ** i for i in range(len(self.stage_downsamples))]

    def validate(self):
        n = len(self.stage_downsamples)
        if n < 2:
            raise ValueError("at least two stages are needed (the auxiliary head taps stage 2)")
        if len(self.channels) != n or len(self.heads) != n:
            raise ValueError("stage_downsamples, stage_channels and heads must have equal length")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ValueError(f"stage channels {c} not divisible by heads {h}")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 (grayscale) or 3 (RGB)")
        if self.window_size < 1 or self.num_classes < 2 or self.head_channels < 1:
            raise ValueError("window_size, num_classes and head_channels out of range")

    @property
    def input_multiple(self) -> int:
        """H and W must be multiples of this so every stage tiles into windows."""
        return int(np.prod(self.stage_downsamples)) * self.window_size

    def stage_resolutions(self, size: int) -> list[int]:
        out, s = [], size
        for r in self.stage_downsamples:
            s //= r
            out.append(s)
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PredictionPair:
    seg: Tensor
    aux: Tensor | None


class IrisUsformer(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        ch, ds, hd = config.channels, config.stage_downsamples, config.heads
        m, conv, ratio = config.window_size, config.use_conv_projection, config.mlp_ratio
        n = len(ds)

        self.downs = [DDC(config.in_channels if i == 0 else ch[i - 1], ch[i], ds[i], rng) for i in range(n)]
        self.encoders = [EncoderBlockPair(ch[i], hd[i], m, rng, conv, ratio) for i in range(n)]
        self.bottleneck = EncoderBlockPair(ch[-1], hd[-1], m, rng, conv, ratio)
        # decoders[i] works at stage i's resolution; ups[i] lifts stage i+1 to stage i
        self.decoders = [DecoderBlockPair(ch[i], hd[i], m, rng, conv, config.use_cross_attention, ratio)
                         for i in range(n)]
        self.ups = [DUC(ch[i + 1], ch[i], ds[i + 1], rng) for i in range(n - 1)]
        self.seg_up = DUC(ch[0], config.head_channels, ds[0], rng)
        self.seg_cls = Conv2d(config.head_channels, config.num_classes, 1, rng)
        self.aux_up = DUC(ch[1], config.head_channels, ds[0] * ds[1], rng)
        self.aux_cls = Conv2d(config.head_channels, config.num_classes, 1, rng)

    def check_input(self, x: Tensor):
        k = self.config.input_multiple
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected [B, {self.config.in_channels}, H, W], got {x.shape}")
        if x.shape[2] % k or x.shape[3] % k:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} must be divisible by {k}")

    def forward(self, x: Tensor, with_aux: bool = True) -> PredictionPair:
        self.check_input(x)
        skips = []
        h = x
        for down, enc in zip(self.downs, self.encoders):
            h = enc(down(h))
            skips.append(h)
        h = self.bottleneck(h)
        decoded: list[Tensor | None] = [None] * len(skips)
        for i in reversed(range(len(skips))):
            if i < len(skips) - 1:
                h = self.ups[i](h)
            if h.shape != skips[i].shape:
                raise ShapeError(f"decoder stage {i}: {h.shape} vs skip {skips[i].shape}")
            h = self.decoders[i](h, skips[i])
            decoded[i] = h
        seg = T.softmax(self.seg_cls(self.seg_up(decoded[0])), axis=1)
        aux = T.softmax(self.aux_cls(self.aux_up(decoded[1])), axis=1) if with_aux else None
        return PredictionPair(seg, aux)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({f"buffer/{name}": b.data for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        own.update({f"buffer/{n}": b for n, b in self.named_buffers()})
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, t in own.items():
            if state[name].shape != t.shape:
                raise ShapeError(f"{name}: stored shape {state[name].shape} != model shape {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.state_dict().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build(config: ModelConfig) -> IrisUsformer:
    return IrisUsformer(config)


def forward(model: IrisUsformer, x: Tensor, train_mode: bool = False, with_aux: bool = True) -> PredictionPair:
    model.train(train_mode)
    return model(x, with_aux=with_aux)


def predict_mask(probs) -> np.ndarray:
    """Argmax over the class axis of [B, C, H, W] (or [C, H, W]) probabilities.

    Ties go to the lowest class index, i.e. background.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return np.argmax(p, axis=-3).astype(np.uint8)
