"""Finite-difference verification of every differentiable op, block and loss.

Each registered check builds a tiny random problem and returns a closure that
recomputes a scalar from scratch plus the tensors to differentiate.  The
scalar is a fixed random projection of the op output so every output entry
contributes to the gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import nn
from . import tensor as T
from .model import ModelConfig, PredictionPair, build
from .tensor import Tensor

Problem = tuple[Callable[[], Tensor], list[Tensor], dict[int, np.ndarray] | None]

OP_TOL = 1e-5
BLOCK_TOL = 1e-4


@dataclass
class Check:
    name: str
    build: Callable[[np.random.Generator], Problem]
    tol: float = OP_TOL


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol)


REGISTRY: dict[str, Check] = {}


def register(name: str, tol: float = OP_TOL):
    def deco(fn):
        REGISTRY[name] = Check(name, fn, tol)
        return fn
    return deco


def _leaf(rng, *shape, low=None):
    x = rng.normal(size=shape)
    if low is not None:
        # keep away from kinks/clamps so central differences stay valid
        x = np.sign(x) * (np.abs(x) + low)
    return Tensor(x, requires_grad=True)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    weights = rng.normal(size=out.shape)
    return lambda t: T.tsum(t * weights)


def _scalar(op: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    proj = _project(op(), rng)
    return lambda: proj(op())


def _unary(fn, low=None, positive=False):
    def build_(rng):
        x = _leaf(rng, 3, 4, low=low)
        if positive:
            x.data = np.abs(x.data) + 0.1
        return _scalar(lambda: fn(x), rng), [x], None
    return build_


def _binary(fn, positive_b=False):
    def build_(rng):
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 3, 4)
        if positive_b:
            b.data = np.abs(b.data) + 0.5
        return _scalar(lambda: fn(a, b), rng), [a, b], None
    return build_


for _name, _fn in [("add", lambda a, b: T.add(a, b)), ("sub", lambda a, b: T.sub(a, b)),
                   ("mul", lambda a, b: T.mul(a, b))]:
    register(_name)(_binary(_fn))
register("div")(_binary(lambda a, b: T.div(a, b), positive_b=True))
register("neg")(_unary(lambda x: T.neg(x)))
register("exp")(_unary(lambda x: T.exp(x)))
register("log")(_unary(lambda x: T.log(x), positive=True))
register("relu")(_unary(lambda x: T.relu(x), low=0.1))
register("gelu")(_unary(lambda x: T.gelu(x)))
register("sqrt")(_unary(lambda x: T.sqrt(x), positive=True))
register("sum")(_unary(lambda x: T.tsum(x, axis=1, keepdims=True)))
register("mean")(_unary(lambda x: T.mean(x, axis=0)))
register("reshape")(_unary(lambda x: T.reshape(x, (4, 3))))
register("transpose")(_unary(lambda x: T.transpose(x, (1, 0))))
register("roll")(_unary(lambda x: T.roll(x, (1, -2), (0, 1))))
register("take")(_unary(lambda x: T.take(x, np.array([[0, 2], [2, 1]]))))
register("softmax")(_unary(lambda x: T.softmax(x, axis=-1)))


@register("concat")
def _concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 5)
    return _scalar(lambda: T.concat([a, b], axis=1), rng), [a, b], None


@register("matmul")
def _matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 2)
    return _scalar(lambda: T.matmul(a, b), rng), [a, b], None


@register("layer_norm")
def _layer_norm(rng):
    x, g, b = _leaf(rng, 2, 4, 8), _leaf(rng, 8), _leaf(rng, 8)
    return _scalar(lambda: T.layer_norm(x, g, b), rng), [x, g, b], None


def _bn(training):
    def build_(rng):
        x, g, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 3), _leaf(rng, 3)
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
        return _scalar(lambda: T.batch_norm(x, g, b, rm.copy(), rv.copy(), training), rng), [x, g, b], None
    return build_


register("batch_norm_train")(_bn(True))
register("batch_norm_eval")(_bn(False))


def _conv(c_in, c_out, k, stride, padding, groups, bias=True):
    def build_(rng):
        x = _leaf(rng, 1, c_in, 5, 5)
        w = _leaf(rng, c_out, c_in // groups, k, k)
        b = _leaf(rng, c_out) if bias else None
        params = [x, w] + ([b] if bias else [])
        return _scalar(lambda: T.conv2d(x, w, b, stride, padding, groups), rng), params, None
    return build_


register("conv2d_3x3")(_conv(2, 3, 3, 1, 1, 1))
register("conv2d_strided")(_conv(2, 4, 3, 2, 1, 2))
register("conv2d_depthwise")(_conv(2, 2, 3, 1, 1, 2, bias=False))
register("conv2d_1x1")(_conv(4, 3, 1, 1, 0, 1))
register("pixel_shuffle")(lambda rng: (lambda x: (_scalar(lambda: T.pixel_shuffle(x, 2), rng), [x], None))(
    _leaf(rng, 1, 8, 2, 2)))
register("pixel_unshuffle")(lambda rng: (lambda x: (_scalar(lambda: T.pixel_unshuffle(x, 2), rng), [x], None))(
    _leaf(rng, 1, 2, 4, 4)))


def _randomize(module: nn.Module, rng, scale=0.3):
    # default init is tiny; larger weights exercise every path
    for p in module.parameters():
        p.data = p.data + rng.normal(scale=scale, size=p.shape)


@register("window_attention_shifted")
def _window_attention(rng):
    spec = nn.WindowSpec(4, 2, 8, 8)
    attn = nn.WindowAttention(4, 2, 4, rng)
    _randomize(attn, rng)
    x, q = _leaf(rng, 1, 4, 8, 8), _leaf(rng, 1, 4, 8, 8)
    mask = nn.build_shift_mask(spec)
    return _scalar(lambda: attn(x, q, spec, mask), rng), [x, q] + attn.parameters(), None


@register("encoder_block_pair", BLOCK_TOL)
def _encoder_pair(rng):
    block = nn.EncoderBlockPair(4, 2, 4, rng)
    _randomize(block, rng)
    x = _leaf(rng, 1, 4, 8, 8)
    return _scalar(lambda: block(x), rng), [x] + block.parameters(), None


@register("decoder_block_pair", BLOCK_TOL)
def _decoder_pair(rng):
    block = nn.DecoderBlockPair(4, 2, 4, rng)
    _randomize(block, rng)
    x, s = _leaf(rng, 1, 4, 8, 8), _leaf(rng, 1, 4, 8, 8)
    return _scalar(lambda: block(x, s), rng), [x, s] + block.parameters(), None


@register("decoder_block_pair_concat", BLOCK_TOL)
def _decoder_concat(rng):
    block = nn.DecoderBlockPair(4, 2, 4, rng, use_cross=False)
    _randomize(block, rng)
    x, s = _leaf(rng, 1, 4, 8, 8), _leaf(rng, 1, 4, 8, 8)
    return _scalar(lambda: block(x, s), rng), [x, s] + block.parameters(), None


@register("ddc")
def _ddc(rng):
    block = nn.DDC(2, 3, 2, rng)
    _randomize(block, rng)
    x = _leaf(rng, 2, 2, 4, 4)
    return _scalar(lambda: block(x), rng), [x] + block.parameters(), None


@register("duc")
def _duc(rng):
    block = nn.DUC(3, 2, 2, rng)
    _randomize(block, rng)
    x = _leaf(rng, 2, 3, 2, 2)
    return _scalar(lambda: block(x), rng), [x] + block.parameters(), None


def _heads(rng, shape=(2, 2, 3, 3)):
    ls, la = _leaf(rng, *shape), _leaf(rng, *shape)
    y = L.one_hot(rng.integers(0, shape[1], size=(shape[0],) + shape[2:]), shape[1])
    return ls, la, y


def _fixed_map(rng, shape=(2, 3, 3)):
    return L.UncertaintyMap(Tensor(rng.uniform(0.2, 2.0, size=shape)), detached=True)


@register("weighted_ce")
def _weighted_ce(rng):
    ls, _, y = _heads(rng)
    m = _fixed_map(rng)
    return lambda: L.weighted_ce(T.softmax(ls, 1), y, m), [ls], None


@register("weighted_dice")
def _weighted_dice(rng):
    ls, _, y = _heads(rng)
    m = _fixed_map(rng)
    return lambda: L.weighted_dice(T.softmax(ls, 1), y, m), [ls], None


@register("regularizer_kl")
def _regularizer(rng):
    ls, la, _ = _heads(rng)
    return lambda: L.regularizer_kl(T.softmax(ls, 1), T.softmax(la, 1)), [ls, la], None


@register("total_objective")
def _total(rng):
    ls, la, y = _heads(rng)
    held = rng.uniform(0.2, 2.0, size=(2, 3, 3))

    def fn():
        pair = PredictionPair(T.softmax(ls, 1), T.softmax(la, 1))
        return L.total_objective(pair, y, alpha=0.5, fixed_weights=held)[0]

    return fn, [ls, la], None


def two_stage_config(**overrides) -> ModelConfig:
    kw = dict(base_channels=8, stage_downsamples=[4, 2], heads=[2, 2], window_size=4, head_channels=4)
    kw.update(overrides)
    return ModelConfig(**kw)


def model_problem(rng, config: ModelConfig | None = None, size: int = 32, fraction: float = 0.01,
                  alpha: float = 0.5) -> Problem:
    """End-to-end two-head objective w.r.t. a sampled subset of parameters.

    The uncertainty weights are frozen at the starting point, matching the
    gradient stop in the weighted terms.
    """
    config = config or two_stage_config()
    model = build(config)
    model.train()
    _randomize(model, rng, scale=0.1)
    x = Tensor(rng.uniform(size=(2, config.in_channels, size, size)))
    y = L.one_hot(rng.integers(0, 2, size=(2, size, size)))
    with T.no_grad():
        pair = model(x)
        held = L.uncertainty_map(pair.seg, pair.aux).values.data.copy()

    def fn():
        return L.total_objective(model(x), y, alpha=alpha, fixed_weights=held)[0]

    params = model.parameters()
    sample = {}
    for p in params:
        k = max(1, int(round(fraction * p.size)))
        sample[id(p)] = rng.choice(p.size, size=min(k, p.size), replace=False)
    return fn, params, sample


@register("model_end_to_end", BLOCK_TOL)
def _model(rng):
    return model_problem(rng)


def run_check(check: Check, seed: int = 0, h: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    fn, params, sample = check.build(rng)
    err = T.parameters_grad_check(fn, params, h=h, sample=sample)
    return CheckResult(check.name, err, check.tol, time.perf_counter() - start)


def run_suite(names=None, seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    names = list(REGISTRY) if names is None else names
    return [run_check(REGISTRY[n], seed, h) for n in names]


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'op':<28} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<28} {r.max_rel_err:12.3e} {r.tol:8.0e}  {'PASS' if r.passed else 'FAIL'}")
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} passed")
    return "\n".join(lines)
