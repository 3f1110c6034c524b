"""Large image <-> patch conversion, preprocessing, augmentation and PNG I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image

from .tensor import ShapeError

DEFAULT_PATCH = 1024
TRAIN_STRIDE = 800
TEST_STRIDE = 1000


class DataError(ValueError):
    """Malformed or inconsistent image data."""


def axis_origins(extent: int, patch: int, stride: int) -> list[int]:
    """Sliding-window origins along one axis; the last window is clamped to the border."""
    if patch > extent:
        raise ShapeError(f"patch size {patch} exceeds image extent {extent}")
    if not 1 <= stride <= patch:
        raise ValueError(f"stride must lie in [1, patch]; {stride} with patch {patch} would leave gaps")
    return list(range(0, extent - patch, stride)) + [extent - patch]


@dataclass(frozen=True)
class PatchGrid:
    width: int
    height: int
    patch: int
    stride: int
    origins: tuple[tuple[int, int], ...]  # (x, y), row-major

    def __len__(self) -> int:
        return len(self.origins)

    def windows(self) -> Iterable[tuple[slice, slice]]:
        for x, y in self.origins:
            yield slice(y, y + self.patch), slice(x, x + self.patch)


def make_grid(extent: tuple[int, int], patch: int = DEFAULT_PATCH, stride: int = TEST_STRIDE) -> PatchGrid:
    """Window grid for an image of ``extent = (width, height)``."""
    width, height = extent
    xs = axis_origins(width, patch, stride)
    ys = axis_origins(height, patch, stride)
    return PatchGrid(width, height, patch, stride, tuple((x, y) for y in ys for x in xs))


def _spatial(image: np.ndarray) -> tuple[int, int]:
    """(height, width) of a ``C x H x W`` or ``H x W`` array."""
    return image.shape[-2], image.shape[-1]


def extract(image: np.ndarray, grid: PatchGrid) -> list[np.ndarray]:
    if _spatial(image) != (grid.height, grid.width):
        raise ShapeError(f"image extent {_spatial(image)[::-1]} does not match grid extent {(grid.width, grid.height)}")
    return [image[..., rows, cols] for rows, cols in grid.windows()]


def stitch_logits(logit_patches: Sequence[np.ndarray], grid: PatchGrid) -> np.ndarray:
    """Average per-pixel logits over every window covering the pixel."""
    if len(logit_patches) != len(grid):
        raise ShapeError(f"got {len(logit_patches)} patches for a grid of {len(grid)} windows")
    c = logit_patches[0].shape[0]
    acc = np.zeros((c, grid.height, grid.width), dtype=np.float64)
    hits = np.zeros((grid.height, grid.width), dtype=np.float64)
    for patch, (rows, cols) in zip(logit_patches, grid.windows()):
        if patch.shape[-2:] != (grid.patch, grid.patch):
            raise ShapeError(f"logit patch {patch.shape} does not match patch size {grid.patch}")
        acc[:, rows, cols] += patch
        hits[rows, cols] += 1.0
    return acc / hits


def stitch(logit_patches: Sequence[np.ndarray], grid: PatchGrid) -> tuple[np.ndarray, np.ndarray]:
    """Returns (full-image logits, binary mask); ties resolve to background."""
    logits = stitch_logits(logit_patches, grid)
    return logits, (logits[1] > logits[0]).astype(np.uint8)


def one_hot(mask: np.ndarray, n_classes: int = 2) -> np.ndarray:
    mask = np.asarray(mask)
    return (np.arange(n_classes)[:, None, None] == mask[None]).astype(np.float64)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class DatasetStats:
    mean: tuple[float, float, float]
    class_counts: tuple[int, int]  # (background, lane)

    @property
    def class_ratio(self) -> float:
        bg, lane = self.class_counts
        if lane == 0:
            raise DataError("training split has no lane pixels; class ratio undefined")
        return bg / lane


def to_unit(image: np.ndarray) -> np.ndarray:
    """8-bit ``C x H x W`` image to float32 in [0, 1]."""
    return np.asarray(image, dtype=np.float32) / np.float32(255.0)


def compute_stats(images: Iterable[np.ndarray], masks: Iterable[np.ndarray]) -> DatasetStats:
    """Per-channel mean (on the [0, 1] scale) and class pixel counts of a training split."""
    total = np.zeros(3)
    n_pix = 0
    counts = np.zeros(2, dtype=np.int64)
    for img, mask in zip(images, masks):
        unit = to_unit(img).astype(np.float64)
        total += unit.reshape(3, -1).sum(axis=1)
        n_pix += unit.shape[1] * unit.shape[2]
        counts += np.bincount(np.asarray(mask).ravel().astype(np.int64), minlength=2)[:2]
    if n_pix == 0:
        raise DataError("cannot compute statistics of an empty split")
    mean = total / n_pix
    return DatasetStats(tuple(float(m) for m in mean), (int(counts[0]), int(counts[1])))


def subtract_mean(patch: np.ndarray, stats: DatasetStats) -> np.ndarray:
    return patch - np.asarray(stats.mean, dtype=patch.dtype)[:, None, None]


def augment_flip(patch: np.ndarray, mask: np.ndarray, seed) -> tuple[np.ndarray, np.ndarray]:
    """Random horizontal and/or vertical flip (each with probability 1/2), same for both arrays."""
    rng = np.random.default_rng(seed)
    flip_h, flip_v = rng.random(2) < 0.5
    if flip_h:
        patch, mask = patch[..., ::-1], mask[..., ::-1]
    if flip_v:
        patch, mask = patch[..., ::-1, :], mask[..., ::-1, :]
    return np.ascontiguousarray(patch), np.ascontiguousarray(mask)


def pad_to(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Mirror-pad the trailing edges of a ``... x H x W`` array up to at least ``height x width``."""
    h, w = _spatial(image)
    ph, pw = max(0, height - h), max(0, width - w)
    if ph == 0 and pw == 0:
        return image
    pad = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, pad, mode="symmetric")


def predict_image(
    image: np.ndarray,
    predict_patch: Callable[[np.ndarray], np.ndarray],
    patch: int,
    stride: int,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Tile ``image``, run ``predict_patch`` on each window, stitch.

    Images smaller than ``patch`` are mirror-padded up to it and cropped back.
    Results do not depend on ``workers``: stitching happens in window order.
    """
    h, w = _spatial(image)
    padded = pad_to(image, patch, patch)
    ph, pw = _spatial(padded)
    grid = make_grid((pw, ph), patch, stride)
    tiles = extract(padded, grid)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(predict_patch, tiles))
    else:
        outs = [predict_patch(t) for t in tiles]
    logits, _ = stitch(outs, grid)
    logits = logits[:, :h, :w]
    return logits, (logits[1] > logits[0]).astype(np.uint8)


# ---------------------------------------------------------------------------
# PNG I/O


def read_rgb(path) -> np.ndarray:
    """8-bit RGB PNG as a ``3 x H x W`` uint8 array."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_mask(path) -> np.ndarray:
    """8-bit mask PNG (0 background, 255 lane) as an ``H x W`` array of 0/1."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise DataError(f"mask {path} contains values other than 0 and 255")
    return (arr == 255).astype(np.uint8)


def write_rgb(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8).transpose(1, 2, 0), mode="RGB").save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def write_gray(path, values: np.ndarray) -> None:
    """Min-max normalise a 2D array into an 8-bit PNG."""
    v = np.asarray(values, dtype=np.float64).squeeze()
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)


def overlay(image: np.ndarray, prediction: np.ndarray, truth: np.ndarray | None = None) -> np.ndarray:
    """Predicted lanes in red; missed truth lanes (if given) in blue."""
    out = np.array(image, dtype=np.uint8, copy=True)
    pred = np.asarray(prediction) > 0
    if truth is not None:
        missed = (np.asarray(truth) > 0) & ~pred
        out[:, missed] = np.array([0, 0, 255], dtype=np.uint8)[:, None]
    out[:, pred] = np.array([255, 0, 0], dtype=np.uint8)[:, None]
    return out


def write_overlay(path, image: np.ndarray, prediction: np.ndarray, truth: np.ndarray | None = None) -> None:
    write_rgb(path, overlay(image, prediction, truth))


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
