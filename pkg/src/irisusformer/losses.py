"""Uncertainty map, uncertainty-weighted CE/Dice losses, the uncertainty
regularizer and the combined two-head objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

VARIANTS = ("normalized", "literal")


@dataclass
class UncertaintyMap:
    values: Tensor  # [B, H, W]
    detached: bool


@dataclass
class LossReport:
    ce_s: float
    dice_s: float
    ce_a: float
    dice_a: float
    r_kl: float
    total: float
    alpha: float
    mean_uncertainty: float

    def as_dict(self) -> dict:
        return asdict(self)


def _check_distribution(p: Tensor, name: str, tol: float = 1e-6):
    if p.ndim != 4:
        raise ShapeError(f"{name} must be [B, C, H, W], got {p.shape}")
    err = np.abs(p.data.sum(axis=1) - 1.0).max()
    if err > tol or p.data.min() < -tol:
        raise ValueError(f"{name} is not a per-pixel distribution (class-sum error {err:.3g})")


def _mixture(p_s: Tensor, p_a: Tensor, variant: str) -> Tensor:
    if variant == "normalized":
        return (p_s + p_a) * 0.5
    if variant == "literal":
        return p_s + p_a * 0.5
    raise ValueError(f"unknown uncertainty variant {variant!r}; expected one of {VARIANTS}")


def uncertainty_map(p_s: Tensor, p_a: Tensor, variant: str = "normalized",
                    detached: bool = False) -> UncertaintyMap:
    """Per-pixel disagreement entropy of the two heads, summed over classes."""
    _check_distribution(p_s, "P_s")
    _check_distribution(p_a, "P_a")
    if p_s.shape != p_a.shape:
        raise ShapeError(f"head shapes differ: {p_s.shape} vs {p_a.shape}")
    mix = _mixture(p_s, p_a, variant)
    m = -T.tsum((p_s + p_a) * T.log(mix), axis=1)
    return UncertaintyMap(T.detach(m) if detached else m, detached)


def _weights(m: UncertaintyMap | None, p: Tensor) -> np.ndarray:
    if m is None:
        return np.ones((p.shape[0], p.shape[2], p.shape[3]))
    if not m.detached:
        raise ValueError("loss weighting needs a detached uncertainty map")
    if m.values.shape != (p.shape[0], p.shape[2], p.shape[3]):
        raise ShapeError(f"uncertainty map {m.values.shape} does not match prediction {p.shape}")
    return m.values.data


def weighted_ce(p: Tensor, y: Tensor, m: UncertaintyMap | None = None) -> Tensor:
    """Uncertainty-weighted cross-entropy, averaged over B*H*W pixels."""
    y = T.as_tensor(y)
    if p.shape != y.shape:
        raise ShapeError(f"prediction {p.shape} and target {y.shape} differ")
    w = _weights(m, p)[:, None]
    nb, _, h, wd = p.shape
    return -T.tsum(T.log(p) * (y.data * w)) * (1.0 / (nb * h * wd))


def weighted_dice(p: Tensor, y: Tensor, m: UncertaintyMap | None = None, eps: float = 1.0) -> Tensor:
    """1 - mean over classes of (2*sum(M*P*Y) + eps) / (sum(M*(P+Y)) + eps).

    Computed per image and averaged over the batch.
    """
    y = T.as_tensor(y)
    if p.shape != y.shape:
        raise ShapeError(f"prediction {p.shape} and target {y.shape} differ")
    w = _weights(m, p)[:, None]
    inter = T.tsum(p * (y.data * w), axis=(2, 3))
    union = T.tsum(p * w, axis=(2, 3)) + (y.data * w).sum(axis=(2, 3))
    ratio = (inter * 2.0 + eps) / (union + eps)  # [B, C]
    return 1.0 - T.mean(ratio)


def regularizer_kl(p_s: Tensor, p_a: Tensor, variant: str = "normalized",
                   m: UncertaintyMap | None = None) -> Tensor:
    """sum(M) / (H*W*C), averaged over the batch; gradients reach both heads."""
    if m is None:
        m = uncertainty_map(p_s, p_a, variant)
    if m.detached:
        raise ValueError("the regularizer needs the live (non-detached) uncertainty map")
    return T.mean(m.values) * (1.0 / p_s.shape[1])


def one_hot(mask: np.ndarray, num_classes: int = 2) -> np.ndarray:
    """[B, H, W] integer labels -> [B, C, H, W] float one-hot."""
    mask = np.asarray(mask, dtype=np.int64)
    return np.moveaxis(np.eye(num_classes)[mask], -1, 1)


@dataclass
class LossFlags:
    without_u: bool = False
    variant: str = "normalized"


def total_objective(pair, y, alpha: float = 1e-3, eps: float = 1.0, flags: LossFlags | None = None,
                    fixed_weights: np.ndarray | None = None) -> tuple[Tensor, LossReport, UncertaintyMap]:
    """Two-head CE + Dice with uncertainty weighting plus ``alpha`` times the regularizer.

    Returns the scalar loss tensor, its component report and the live map.
    The map is computed once; the four weighted terms see a detached copy,
    or ``fixed_weights`` when given (finite-difference checks hold it fixed).
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    flags = flags or LossFlags()
    y = T.as_tensor(y)
    live = uncertainty_map(pair.seg, pair.aux, flags.variant)
    if flags.without_u:
        weights, alpha = None, 0.0
    else:
        held = live.values if fixed_weights is None else fixed_weights
        weights = UncertaintyMap(T.detach(held), detached=True)
    ce_s = weighted_ce(pair.seg, y, weights)
    dice_s = weighted_dice(pair.seg, y, weights, eps)
    ce_a = weighted_ce(pair.aux, y, weights)
    dice_a = weighted_dice(pair.aux, y, weights, eps)
    total = ce_s + dice_s + ce_a + dice_a
    if alpha:
        r_kl = regularizer_kl(pair.seg, pair.aux, m=live)
        total = total + r_kl * alpha
        r_val = r_kl.item()
    else:
        r_val = 0.0
    report = LossReport(ce_s.item(), dice_s.item(), ce_a.item(), dice_a.item(), r_val, total.item(),
                        alpha, float(live.values.data.mean() / pair.seg.shape[1]))
    return total, report, live
