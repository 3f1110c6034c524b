"""Orthonormal 2D discrete wavelet transform (db1 / db2) and sub-band pyramids.

Analysis convention: ``low[n] = sum_i g[i] * x[2n + i]`` along one axis, with
periodic wrap-around on even-length signals. Odd lengths are first mirror
padded by one sample. The 2D transform filters along x (columns index) first
and then along y, giving the pairing A = gg, H = gh, V = hg, D = hh where the
first letter is the x filter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import ShapeError

COMPONENTS = ("A", "H", "V", "D")
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class FilterPair:
    lowpass: tuple[float, ...]
    highpass: tuple[float, ...]
    order: int

    def __post_init__(self):
        if len(self.lowpass) != 2 * self.order or len(self.highpass) != 2 * self.order:
            raise ValueError(f"db{self.order} filters need {2 * self.order} taps")

    @property
    def length(self) -> int:
        return len(self.lowpass)


def haar_filters() -> FilterPair:
    r = 1.0 / math.sqrt(2.0)
    return FilterPair((r, r), (r, -r), 1)


def daubechies_filters(order: int) -> FilterPair:
    if order == 1:
        return haar_filters()
    if order == 2:
        s3 = math.sqrt(3.0)
        norm = 4.0 * math.sqrt(2.0)
        g = ((1 + s3) / norm, (3 + s3) / norm, (3 - s3) / norm, (1 - s3) / norm)
        # quadrature mirror: h[i] = (-1)^i g[L-1-i]
        h = tuple((-1) ** i * g[len(g) - 1 - i] for i in range(len(g)))
        return FilterPair(g, h, 2)
    raise ValueError(f"unsupported Daubechies order {order}; only db1 and db2 are available")


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """BT.601 luma of a ``3 x H x W`` image, returned as ``1 x H x W``."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"to_grayscale: expected 3 x H x W, got {image.shape}")
    r, g, b = image.astype(np.float64)
    return (LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b)[None]


# ---------------------------------------------------------------------------
# 1D filter bank along an axis


def _mirror_to_even(x: np.ndarray, axis: int) -> np.ndarray:
    if x.shape[axis] % 2 == 0:
        return x
    last = np.take(x, [-1], axis=axis)
    return np.concatenate([x, last], axis=axis)


def analyze_axis(x: np.ndarray, filters: FilterPair, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """One analysis step along ``axis``; returns (lowpass, highpass) halves."""
    x = np.moveaxis(_mirror_to_even(np.asarray(x, dtype=np.float64), axis), axis, -1)
    n = x.shape[-1]
    if n < filters.length:
        raise ShapeError(f"signal length {n} shorter than filter support {filters.length}")
    ext = np.concatenate([x, x[..., : filters.length - 2]], axis=-1) if filters.length > 2 else x
    half = n // 2
    low = np.zeros(x.shape[:-1] + (half,))
    high = np.zeros_like(low)
    for i, (gi, hi) in enumerate(zip(filters.lowpass, filters.highpass)):
        seg = ext[..., i : i + 2 * half : 2]
        low += gi * seg
        high += hi * seg
    return np.moveaxis(low, -1, axis), np.moveaxis(high, -1, axis)


def synthesize_axis(low: np.ndarray, high: np.ndarray, filters: FilterPair, axis: int) -> np.ndarray:
    """Adjoint of :func:`analyze_axis` (its inverse, since the filters are orthonormal)."""
    low = np.moveaxis(np.asarray(low, dtype=np.float64), axis, -1)
    high = np.moveaxis(np.asarray(high, dtype=np.float64), axis, -1)
    half = low.shape[-1]
    n = 2 * half
    out = np.zeros(low.shape[:-1] + (n,))
    idx = 2 * np.arange(half)
    for i, (gi, hi) in enumerate(zip(filters.lowpass, filters.highpass)):
        # indices are distinct for a fixed tap, so fancy-index += is safe
        out[..., (idx + i) % n] += gi * low + hi * high
    return np.moveaxis(out, -1, axis)


# ---------------------------------------------------------------------------
# 2D levels and pyramids


@dataclass
class SubBandSet:
    A: np.ndarray
    H: np.ndarray
    V: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        shapes = {b.shape for b in (self.A, self.H, self.V, self.D)}
        if len(shapes) != 1:
            raise ShapeError(f"sub-bands disagree in shape: {sorted(shapes)}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.A.shape

    def band(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def stack(self, components: Iterable[str]) -> np.ndarray:
        """Stack the chosen components as channels, ``len(components) x h x w``."""
        return np.concatenate([self.band(c).reshape((1,) + self.A.shape[-2:]) for c in components], axis=0)


def dwt2d_level(image: np.ndarray, filters: FilterPair) -> SubBandSet:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] != 1:
        raise ShapeError(f"dwt2d_level: expected 1 x H x W, got {image.shape}")
    h, w = image.shape[1:]
    if h < filters.length or w < filters.length:
        raise ShapeError(f"dwt2d_level: image {h}x{w} smaller than filter support {filters.length}")
    lo_x, hi_x = analyze_axis(image, filters, axis=2)
    a, h_band = analyze_axis(lo_x, filters, axis=1)
    v, d = analyze_axis(hi_x, filters, axis=1)
    return SubBandSet(A=a, H=h_band, V=v, D=d)


def idwt2d_level(bands: SubBandSet, filters: FilterPair, target_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Inverse of :func:`dwt2d_level`, cropped to ``target_shape`` (H, W)."""
    lo_x = synthesize_axis(bands.A, bands.H, filters, axis=1)
    hi_x = synthesize_axis(bands.V, bands.D, filters, axis=1)
    out = synthesize_axis(lo_x, hi_x, filters, axis=2)
    if target_shape is not None:
        th, tw = target_shape
        if th > out.shape[-2] or tw > out.shape[-1] or th < out.shape[-2] - 1 or tw < out.shape[-1] - 1:
            raise ShapeError(f"idwt2d_level: target {target_shape} inconsistent with bands {bands.shape}")
        out = out[..., :th, :tw]
    return out


@dataclass
class WaveletPyramid:
    levels: list[SubBandSet]
    source_shape: tuple[int, int]
    order: int = 1

    def __len__(self) -> int:
        return len(self.levels)

    def level(self, j: int) -> SubBandSet:
        """Sub-bands of level ``j`` (1-based)."""
        return self.levels[j - 1]

    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(s.A.shape[-2:]) for s in self.levels]


def pyramid_shape(source: tuple[int, int], level: int) -> tuple[int, int]:
    h, w = source
    for _ in range(level):
        h, w = -(-h // 2), -(-w // 2)
    return h, w


def dwt_pyramid(image: np.ndarray, levels: int, filters: FilterPair | None = None) -> WaveletPyramid:
    """Grayscale the RGB ``image`` and decompose its approximation recursively."""
    filters = filters or haar_filters()
    if not 1 <= levels <= 5:
        raise ValueError(f"levels must be within 1..5, got {levels}")
    image = np.asarray(image)
    gray = to_grayscale(image) if image.shape[0] == 3 else np.asarray(image, dtype=np.float64)
    source = tuple(gray.shape[-2:])
    for j in range(levels):
        hj, wj = pyramid_shape(source, j)
        if min(hj, wj) < max(filters.length, 2):
            raise ShapeError(f"image {source} too small for {levels} db{filters.order} levels (level {j + 1} input {hj}x{wj})")
    out = []
    current = gray
    for _ in range(levels):
        bands = dwt2d_level(current, filters)
        out.append(bands)
        current = bands.A
    return WaveletPyramid(out, source, filters.order)


# ---------------------------------------------------------------------------
# explicit 4-sample Haar basis


def haar_basis_4() -> dict[str, np.ndarray]:
    """Half-scaled Haar basis for length-4 signals.

    Keys are (kind, level, shift): ``c20`` scaling vector, ``d20``, ``d10``, ``d11``
    wavelet vectors. Coefficients against these vectors relate to the
    orthonormal filter bank by :func:`basis_scale`.
    """
    return {
        "c20": 0.5 * np.array([1.0, 1.0, 1.0, 1.0]),
        "d20": 0.5 * np.array([1.0, 1.0, -1.0, -1.0]),
        "d10": 0.5 * np.array([1.0, -1.0, 0.0, 0.0]),
        "d11": 0.5 * np.array([0.0, 0.0, 1.0, -1.0]),
    }


def basis_scale(level: int) -> float:
    """Orthonormal coefficient = ``basis_scale(level)`` x half-scaled basis coefficient."""
    return 2.0 ** (1.0 - level / 2.0)
