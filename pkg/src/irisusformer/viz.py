"""Comparison maps, uncertainty heatmaps and the summary figures.

The rasters (comparison map, heatmap) are built directly as uint8 arrays so
their pixel values are exact; matplotlib is only used for the report figures.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .metrics import METRIC_NAMES, ConfusionCounts, _as_binary  # noqa: E402

# tp / fp / fn / tn.  Green marks the missed iris pixels (false negatives).
BLUE = (0, 0, 255)
RED = (255, 0, 0)
GREEN = (0, 255, 0)
WHITE = (255, 255, 255)
COLORS = {"tp": BLUE, "fp": RED, "fn": GREEN, "tn": WHITE}

RAMP_LOW = np.array([0.0, 0.0, 255.0])
RAMP_HIGH = np.array([255.0, 0.0, 0.0])


def comparison_map(pred, gt) -> np.ndarray:
    """uint8 [H, W, 3]: blue=tp, red=fp, green=fn, white=tn."""
    p, g = _as_binary(pred, "pred"), _as_binary(gt, "gt")
    if p.shape != g.shape or p.ndim != 2:
        raise ValueError(f"pred {p.shape} and gt {g.shape} must be equal 2-d shapes")
    out = np.empty(p.shape + (3,), dtype=np.uint8)
    out[p & g] = BLUE
    out[p & ~g] = RED
    out[~p & g] = GREEN
    out[~p & ~g] = WHITE
    return out


def color_counts(rgb: np.ndarray) -> ConfusionCounts:
    """Invert a comparison map back to confusion counts."""
    rgb = np.asarray(rgb)
    count = {k: int(np.all(rgb == np.array(c, dtype=rgb.dtype), axis=-1).sum()) for k, c in COLORS.items()}
    if sum(count.values()) != rgb.shape[0] * rgb.shape[1]:
        raise ValueError("raster contains colors outside the comparison palette")
    return ConfusionCounts(count["tp"], count["fp"], count["fn"], count["tn"])


def heatmap(m: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Linear blue->red ramp over [0, vmax]; ``vmax`` defaults to the image max.

    A map that is identically zero renders entirely at the ramp minimum.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"uncertainty map must be 2-d, got {m.shape}")
    top = float(m.max()) if vmax is None else float(vmax)
    t = np.clip(m / top, 0.0, 1.0) if top > 0 else np.zeros_like(m)
    rgb = RAMP_LOW + t[..., None] * (RAMP_HIGH - RAMP_LOW)
    return np.rint(rgb).astype(np.uint8)


def parse_crop(text: str) -> tuple[int, int, int, int]:
    try:
        x, y, w, h = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise ValueError(f"crop must be 'x,y,w,h' integers, got {text!r}") from exc
    if w <= 0 or h <= 0 or x < 0 or y < 0:
        raise ValueError(f"crop {text!r} needs x,y >= 0 and w,h > 0")
    return x, y, w, h


def crop(raster: np.ndarray, box: tuple[int, int, int, int], zoom: int = 4) -> np.ndarray:
    """Cut ``box`` = (x, y, w, h) and enlarge it by nearest-neighbour ``zoom``."""
    x, y, w, h = box
    if y + h > raster.shape[0] or x + w > raster.shape[1]:
        raise ValueError(f"crop {box} exceeds the {raster.shape[1]}x{raster.shape[0]} raster")
    part = raster[y:y + h, x:x + w]
    return np.repeat(np.repeat(part, zoom, axis=0), zoom, axis=1)


def save_rgb(path, rgb: np.ndarray):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


# -- report figures ---------------------------------------------------------------

def plot_loss_curve(records, path, smooth: int = 20):
    """Total loss (raw and window-smoothed) and the mean uncertainty per iteration."""
    it = np.array([r.iter for r in records])
    total = np.array([r.total for r in records])
    unc = np.array([r.mean_uncertainty for r in records])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(it, total, color="0.7", lw=0.8, label="total")
    if len(total) >= smooth:
        ker = np.ones(smooth) / smooth
        ax.plot(it[smooth - 1:], np.convolve(total, ker, mode="valid"), color="k", lw=1.5,
                label=f"total ({smooth}-iter mean)")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(it, unc, color="tab:red", lw=1.0, label="mean uncertainty")
    ax2.set_ylabel("mean uncertainty", color="tab:red")
    h1, l1 = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(h1 + h2, l1 + l2, loc="upper right", fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics(report, path):
    """Bar chart of the aggregate metrics, E1 on its own axis."""
    agg = report.aggregate
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(6, 3), gridspec_kw={"width_ratios": [1, 3]})
    a1.bar(["E1"], [agg["e1"]], color="tab:red")
    a1.set_ylabel("E1 (%)")
    names = [n for n in METRIC_NAMES if n != "e1"]
    vals = [agg[n] for n in names]
    a2.bar(["F1", "mIoU", "Acc"], vals, color="tab:blue")
    a2.set_ylim(min(0.0, min(vals)), 100)
    for i, v in enumerate(vals):
        a2.text(i, v, f"{v:.2f}", ha="center", va="bottom", fontsize=8)
    a2.set_ylabel("%")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_panel(image, comparison, heat, path, title: str = ""):
    """Input | comparison map | uncertainty heatmap, side by side."""
    panels = [("input", image), ("comparison", comparison), ("uncertainty", heat)]
    panels = [(n, p) for n, p in panels if p is not None]
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3.2))
    axes = np.atleast_1d(axes)
    for ax, (name, arr) in zip(axes, panels):
        ax.imshow(arr, cmap="gray" if np.ndim(arr) == 2 else None, vmin=0, vmax=255, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.set_axis_off()
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_visuals(out_dir, stem: str, image, pred=None, gt=None, uncertainty=None, vmax=None,
                  box=None, zoom: int = 4) -> dict[str, Path]:
    """Write the comparison map / heatmap (plus crops and a panel) for one image."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    comp = heat = None
    if pred is not None and gt is not None:
        comp = comparison_map(pred, gt)
        written["comparison"] = out_dir / f"{stem}_comparison.png"
        save_rgb(written["comparison"], comp)
    if uncertainty is not None:
        heat = heatmap(uncertainty, vmax)
        written["heatmap"] = out_dir / f"{stem}_uncertainty.png"
        save_rgb(written["heatmap"], heat)
    if box is not None:
        for key, raster in (("comparison", comp), ("heatmap", heat)):
            if raster is not None:
                written[f"{key}_crop"] = out_dir / f"{stem}_{'uncertainty' if key == 'heatmap' else key}_crop.png"
                save_rgb(written[f"{key}_crop"], crop(raster, box, zoom))
    written["panel"] = out_dir / f"{stem}_panel.png"
    plot_panel(image, comp, heat, written["panel"], stem)
    return written
