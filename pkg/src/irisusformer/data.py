"""Synthetic iris-like images, PNG image/mask I/O, manifests and augmentation."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class DataError(ValueError):
    """Raised for unreadable or invalid image/mask files and manifests."""


@dataclass
class SynthParams:
    seed: int = 0
    size: int = 64
    pupil_radius: tuple[float, float] = (0.08, 0.14)
    iris_radius: tuple[float, float] = (0.26, 0.36)
    center_jitter: float = 0.08
    eyelid_prob: float = 0.5
    eyelid_height: tuple[float, float] = (0.05, 0.2)
    specular_spots: tuple[int, int] = (0, 2)
    noise: float = 6.0
    background: tuple[float, float] = (150.0, 210.0)

    def __post_init__(self):
        self.pupil_radius = tuple(self.pupil_radius)
        self.iris_radius = tuple(self.iris_radius)
        self.eyelid_height = tuple(self.eyelid_height)
        self.specular_spots = tuple(int(v) for v in self.specular_spots)
        self.background = tuple(self.background)
        if self.pupil_radius[1] >= self.iris_radius[0]:
            raise ValueError("pupil radius range must lie strictly below the iris radius range")
        if not 0 <= self.eyelid_prob <= 1:
            raise ValueError("eyelid_prob must be a probability")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleInfo:
    """Geometry used to draw one sample, in pixels."""

    cy: float
    cx: float
    r_pupil: float
    r_iris: float
    top_cut: float | None = None
    bottom_cut: float | None = None
    spots: list[tuple[float, float, float]] = field(default_factory=list)


def _sample_rng(seed: int, index: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, *stream])


def generate_sample(params: SynthParams, index: int, return_info: bool = False):
    """Deterministic (image uint8 [H, W], mask uint8 {0,1} [H, W]) for ``index``."""
    rng = _sample_rng(params.seed, index)
    n = params.size
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    cy = n / 2 + rng.uniform(-1, 1) * params.center_jitter * n
    cx = n / 2 + rng.uniform(-1, 1) * params.center_jitter * n
    r_p = rng.uniform(*params.pupil_radius) * n
    r_i = rng.uniform(*params.iris_radius) * n
    info = SampleInfo(cy, cx, r_p, r_i)

    dist = np.hypot(yy - cy, xx - cx)
    iris = (dist < r_i) & (dist >= r_p)
    occluded = np.zeros_like(iris)

    if rng.uniform() < params.eyelid_prob:
        info.top_cut = cy - r_i + rng.uniform(*params.eyelid_height) * n
        occluded |= yy < info.top_cut
    if rng.uniform() < params.eyelid_prob:
        info.bottom_cut = cy + r_i - rng.uniform(*params.eyelid_height) * n
        occluded |= yy > info.bottom_cut

    lo, hi = params.specular_spots
    for _ in range(rng.integers(lo, hi + 1) if hi > 0 else 0):
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(r_p, r_i)
        rs = rng.uniform(0.015, 0.035) * n
        sy, sx = cy + rad * np.sin(ang), cx + rad * np.cos(ang)
        info.spots.append((sy, sx, rs))
        occluded |= np.hypot(yy - sy, xx - sx) < rs

    # photometry
    b0, b1 = sorted(rng.uniform(*params.background, size=2))
    tilt = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(tilt) * (xx / n) + np.sin(tilt) * (yy / n) + 1) / 2
    img = b0 + (b1 - b0) * ramp
    theta = np.arctan2(yy - cy, xx - cx)
    freq = rng.integers(8, 20)
    texture = 10 * np.sin(freq * theta + rng.uniform(0, 2 * np.pi)) * np.cos(dist / max(r_i, 1) * 9)
    iris_level = rng.uniform(70, 110)
    img = np.where(dist < r_i, iris_level + texture, img)
    img = np.where(dist < r_p, rng.uniform(10, 35), img)
    skin = rng.uniform(120, 170)
    if info.top_cut is not None:
        img = np.where(yy < info.top_cut, skin, img)
    if info.bottom_cut is not None:
        img = np.where(yy > info.bottom_cut, skin, img)
    for sy, sx, rs in info.spots:
        img = np.where(np.hypot(yy - sy, xx - sx) < rs, 250.0, img)
    if params.noise > 0:
        img = img + rng.normal(0, params.noise, img.shape)

    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    mask = (iris & ~occluded).astype(np.uint8)
    if return_info:
        return image, mask, info
    return image, mask


# -- PNG I/O ------------------------------------------------------------------

def save_image(path, image: np.ndarray):
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim not in (2, 3):
        raise DataError(f"{path}: images must be uint8 [H, W] or [H, W, 3]")
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path, channels: int = 1) -> np.ndarray:
    """8-bit PNG as uint8 [H, W] (``channels=1``) or [H, W, 3]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: expected 8-bit pixels, got mode {mode}")
    if channels == 1 and mode != "L":
        raise DataError(f"{path}: expected a single-channel grayscale image, got mode {mode}")
    if channels == 3 and mode != "RGB":
        raise DataError(f"{path}: expected an RGB image, got mode {mode}")
    return arr


def save_mask(path, mask: np.ndarray):
    m = np.asarray(mask)
    if m.ndim != 2 or not np.isin(m, (0, 1)).all():
        raise DataError(f"{path}: masks must be 2-d with values in {{0, 1}}")
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Binary PNG mask: 255 -> 1 (iris), 0 -> 0; anything else is rejected."""
    arr = load_image(path, channels=1)
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise DataError(f"{path}: non-binary mask value {int(arr[bad][0])} (only 0 and 255 allowed)")
    return (arr == 255).astype(np.uint8)


# -- manifests ----------------------------------------------------------------

@dataclass
class DatasetManifest:
    records: list[tuple[Path, Path]]
    split: str = "train"

    def __len__(self):
        return len(self.records)


def write_manifest(path, records, split: str = "train"):
    path = Path(path)
    base = path.parent
    lines = []
    for img, msk in records:
        lines.append(f"{os.path.relpath(img, base)}\t{os.path.relpath(msk, base)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return DatasetManifest([(Path(i), Path(m)) for i, m in records], split)


def read_manifest(path, split: str = "train", check: bool = True) -> DatasetManifest:
    """Parse ``image<TAB>mask`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc})") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'image<TAB>mask'")
        img, msk = (p if os.path.isabs(p) else path.parent / p for p in parts)
        img, msk = Path(img), Path(msk)
        if check:
            for f in (img, msk):
                if not f.is_file():
                    raise DataError(f"{path}:{lineno}: missing file {f}")
        records.append((img, msk))
    return DatasetManifest(records, split)


def load_dataset(manifest: DatasetManifest, channels: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Stack all images ([N, H, W] or [N, H, W, 3]) and masks ([N, H, W])."""
    images, masks = [], []
    for img_path, mask_path in manifest.records:
        img, msk = load_image(img_path, channels), load_mask(mask_path)
        if img.shape[:2] != msk.shape:
            raise DataError(f"{img_path}: image {img.shape[:2]} and mask {msk.shape} sizes differ")
        images.append(img)
        masks.append(msk)
    if not images:
        raise DataError("manifest is empty")
    return np.stack(images), np.stack(masks)


# -- augmentation -------------------------------------------------------------

@dataclass
class AugmentDraw:
    flip: bool = False
    dy: int = 0
    dx: int = 0
    brightness: float = 0.0
    contrast: float = 1.0


def draw_augmentation(rng: np.random.Generator, shape, max_shift: float = 0.1,
                      jitter: float = 0.2) -> AugmentDraw:
    h, w = shape[:2]
    sy, sx = int(max_shift * h), int(max_shift * w)
    return AugmentDraw(
        flip=bool(rng.uniform() < 0.5),
        dy=int(rng.integers(-sy, sy + 1)),
        dx=int(rng.integers(-sx, sx + 1)),
        brightness=float(rng.uniform(-jitter, jitter)),
        contrast=float(rng.uniform(1 - jitter, 1 + jitter)),
    )


def apply_geometric(arr: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Horizontal flip then integer translation with zero fill."""
    out = arr[:, ::-1] if draw.flip else arr
    res = np.zeros_like(out)
    h, w = out.shape[:2]
    dy, dx = draw.dy, draw.dx
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    res[dst_y, dst_x] = out[src_y, src_x]
    return res


def apply_photometric(image: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    if draw.brightness == 0.0 and draw.contrast == 1.0:
        return image
    img = image.astype(np.float64)
    img = (img - 127.5) * draw.contrast + 127.5 + draw.brightness * 255.0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator | AugmentDraw,
            return_draw: bool = False):
    """Flip, translate (same transform for both) and jitter brightness/contrast (image only).

    ``rng`` may be a pre-recorded :class:`AugmentDraw` to replay a transform.
    """
    draw = rng if isinstance(rng, AugmentDraw) else draw_augmentation(rng, image.shape)
    geo_img = apply_geometric(image, draw)
    out = apply_photometric(geo_img, draw), apply_geometric(mask, draw)
    return (*out, draw) if return_draw else out
