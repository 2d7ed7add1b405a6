"""NICE-style iris segmentation metrics (E1, F1/Dice, mIoU, Acc), in percent."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

METRIC_NAMES = ("e1", "f1", "miou", "acc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class MetricsReport:
    per_image: list[dict[str, float]]
    aggregate: dict[str, float]
    names: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _as_binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    """Pixel counts with iris (1) as the positive class."""
    p, g = _as_binary(pred, "pred"), _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"pred shape {p.shape} != gt shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    # an empty class (0/0) counts as perfectly segmented
    return 1.0 if den == 0 else num / den


def compute_metrics(c: ConfusionCounts) -> dict[str, float]:
    n = c.total
    if n <= 0:
        raise ValueError("confusion counts describe an empty image")
    return {
        "e1": 100.0 * (c.fp + c.fn) / n,
        "f1": 100.0 * _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "miou": 100.0 * 0.5 * (_ratio(c.tp, c.tp + c.fp + c.fn) + _ratio(c.tn, c.tn + c.fp + c.fn)),
        "acc": 100.0 * (c.tp + c.tn) / n,
    }


def aggregate(per_image: list[dict[str, float]], names: list[str] | None = None,
              counts: list[ConfusionCounts] | None = None, pooled: bool = False) -> MetricsReport:
    """Unweighted mean over images; ``pooled`` instead sums counts first."""
    if not per_image:
        raise ValueError("cannot aggregate an empty set of images")
    if pooled:
        if counts is None:
            raise ValueError("pooled aggregation needs the per-image confusion counts")
        total = counts[0]
        for c in counts[1:]:
            total = total + c
        agg = compute_metrics(total)
    else:
        agg = {k: float(np.mean([r[k] for r in per_image])) for k in METRIC_NAMES}
    return MetricsReport(list(per_image), agg, list(names or []))


def evaluate_masks(preds, gts, names: list[str] | None = None, pooled: bool = False) -> MetricsReport:
    counts = [confusion(p, g) for p, g in zip(preds, gts, strict=True)]
    return aggregate([compute_metrics(c) for c in counts], names, counts, pooled)


def format_table(report: MetricsReport) -> str:
    """Plain-text summary with the usual column order and arrows."""
    head = f"{'E1↓':>8} {'F1↑':>8} {'mIoU↑':>8} {'Acc↑':>8}"
    a = report.aggregate
    row = f"{a['e1']:8.2f} {a['f1']:8.2f} {a['miou']:8.2f} {a['acc']:8.2f}"
    return f"{head}\n{row}\n"


def per_image_records(report: MetricsReport) -> str:
    """Tab-separated ``name e1 f1 miou acc`` lines with a header."""
    names = report.names or [str(i) for i in range(len(report.per_image))]
    lines = ["name\te1\tf1\tmiou\tacc"]
    for name, r in zip(names, report.per_image):
        lines.append("\t".join([name] + [repr(float(r[k])) for k in METRIC_NAMES]))
    return "\n".join(lines) + "\n"
