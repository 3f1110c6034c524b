"""Procedural aerial-style road scenes with pixel-exact lane-marking masks.

Scenes contain straight roads (mostly axis aligned), lane markings in several
styles, buildings with bright roof ridges (lane look-alikes), vehicles, cast
shadows and washed-out markings that are painted but not labelled. The total
number of labelled marking pixels is steered to a target background:lane
ratio.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .pipeline import DataError, ensure_dir, read_mask, read_rgb, write_mask, write_rgb

STYLES = ("solid", "dashed", "dots", "zebra")
DEFAULT_RATIO = 389.0
RATIO_TOLERANCE = 0.2


@dataclass(frozen=True)
class SceneSpec:
    width: int = 1024
    height: int = 1024
    seed: int = 0
    road_count: int = 3
    road_width: tuple[int, int] = (48, 112)
    styles: tuple[str, ...] = STYLES
    stroke_width: tuple[int, int] = (2, 8)
    clutter: float = 0.5
    shadows: int = 2
    washed_out_fraction: float = 0.15
    target_ratio: float = DEFAULT_RATIO
    oblique_fraction: float = 0.25
    noise_sigma: float = 3.0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("scene extent must be at least 16x16")
        if self.road_count < 1:
            raise ValueError("need at least one road")
        if set(self.styles) - set(STYLES) or not self.styles:
            raise ValueError(f"styles must be a non-empty subset of {STYLES}")
        lo, hi = self.stroke_width
        if not 1 <= lo <= hi:
            raise ValueError("stroke width range must satisfy 1 <= lo <= hi")
        if self.target_ratio <= 0:
            raise ValueError("target ratio must be positive")
        if not 0 <= self.washed_out_fraction < 1 or not 0 <= self.oblique_fraction <= 1:
            raise ValueError("fractions must lie in [0, 1)")

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def lane_budget(self) -> int:
        return int(round(self.n_pixels / (self.target_ratio + 1.0)))

    def ratio_bounds(self) -> tuple[float, float]:
        return self.target_ratio * (1 - RATIO_TOLERANCE), self.target_ratio * (1 + RATIO_TOLERANCE)


@dataclass(frozen=True)
class Road:
    cx: float
    cy: float
    angle: float  # radians; direction of travel
    width: float

    @property
    def direction(self) -> tuple[float, float]:
        return math.cos(self.angle), math.sin(self.angle)

    @property
    def normal(self) -> tuple[float, float]:
        return -math.sin(self.angle), math.cos(self.angle)


@dataclass(frozen=True)
class Rect:
    """Rectangle in a road frame: ``along`` and ``across`` half-open intervals."""

    along: tuple[float, float]
    across: tuple[float, float]


@dataclass
class Marking:
    road: Road
    style: str
    stroke: int
    rects: list[Rect]
    gray: float
    washed_out: bool = False


@dataclass
class Scene:
    image: np.ndarray  # 3 x H x W uint8
    mask: np.ndarray  # H x W uint8 (0/1)
    clean: np.ndarray  # 3 x H x W float, before shadows and noise
    roads: list[Road]
    markings: list[Marking]

    @property
    def ratio(self) -> float:
        lane = int(self.mask.sum())
        return (self.mask.size - lane) / lane if lane else math.inf


# ---------------------------------------------------------------------------
# rasterisation


def _road_coords(road: Road, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    dx, dy = xs - road.cx, ys - road.cy
    ux, uy = road.direction
    nx, ny = road.normal
    return dx * ux + dy * uy, dx * nx + dy * ny


def _rect_bbox(road: Road, r: Rect, shape: tuple[int, int]) -> tuple[int, int, int, int]:
    ux, uy = road.direction
    nx, ny = road.normal
    xs, ys = [], []
    for a in r.along:
        for c in r.across:
            xs.append(road.cx + a * ux + c * nx)
            ys.append(road.cy + a * uy + c * ny)
    h, w = shape
    x0, x1 = max(0, math.floor(min(xs)) - 1), min(w, math.ceil(max(xs)) + 2)
    y0, y1 = max(0, math.floor(min(ys)) - 1), min(h, math.ceil(max(ys)) + 2)
    return y0, y1, x0, x1


def rasterize(road: Road, rects: list[Rect], shape: tuple[int, int], coords=None) -> np.ndarray:
    """Boolean mask of pixel centres inside any of ``rects`` (road frame)."""
    along, across = coords if coords is not None else _road_coords(road, shape)
    out = np.zeros(shape, dtype=bool)
    for r in rects:
        y0, y1, x0, x1 = _rect_bbox(road, r, shape)
        if y0 >= y1 or x0 >= x1:
            continue
        a = along[y0:y1, x0:x1]
        c = across[y0:y1, x0:x1]
        out[y0:y1, x0:x1] |= (a >= r.along[0]) & (a < r.along[1]) & (c >= r.across[0]) & (c < r.across[1])
    return out


def _road_extent(road: Road, shape: tuple[int, int]) -> tuple[float, float]:
    """Along-road interval covering the image."""
    h, w = shape
    ux, uy = road.direction
    corners = [(0, 0), (w, 0), (0, h), (w, h)]
    vals = [(x - road.cx) * ux + (y - road.cy) * uy for x, y in corners]
    return math.floor(min(vals)), math.ceil(max(vals))


# ---------------------------------------------------------------------------
# scene construction


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int], cell: int) -> np.ndarray:
    h, w = shape
    coarse = rng.random((h // cell + 2, w // cell + 2))
    img = Image.fromarray((coarse * 255).astype(np.uint8), mode="L").resize(
        ((w // cell + 2) * cell, (h // cell + 2) * cell), Image.BILINEAR
    )
    return np.asarray(img, dtype=np.float64)[:h, :w] / 255.0


def _make_roads(spec: SceneSpec, rng: np.random.Generator) -> list[Road]:
    roads = []
    for i in range(spec.road_count):
        if rng.random() < spec.oblique_fraction:
            angle = rng.uniform(0, math.pi)
        else:
            angle = 0.0 if i % 2 == 0 else math.pi / 2
            angle += rng.uniform(-0.02, 0.02)
        width = rng.uniform(*spec.road_width)
        cx = rng.uniform(0.2, 0.8) * spec.width
        cy = rng.uniform(0.2, 0.8) * spec.height
        roads.append(Road(cx, cy, angle, width))
    return roads


def _candidate(style: str, road: Road, stroke: int, span: tuple[float, float], rng: np.random.Generator) -> list[Rect]:
    half = road.width / 2
    lo, hi = span
    if style == "solid":
        off = rng.choice([-1, 1]) * (half - stroke - rng.uniform(2, 6))
        off = math.floor(off)
        a0 = math.floor(rng.uniform(lo, (lo + hi) / 2))
        length = math.floor(rng.uniform(0.3, 1.0) * (hi - a0))
        return [Rect((a0, a0 + length), (off, off + stroke))]
    if style == "dashed":
        off = math.floor(rng.uniform(-0.25, 0.25) * road.width)
        dash = int(rng.integers(6, 12)) * stroke
        period = dash + int(rng.integers(6, 12)) * stroke
        a = math.floor(rng.uniform(lo, lo + period))
        rects = []
        while a + dash <= hi:
            rects.append(Rect((a, a + dash), (off, off + stroke)))
            a += period
        return rects
    if style == "dots":
        size = max(3, min(stroke + 2, 6))
        off = math.floor(rng.uniform(-0.35, 0.35) * road.width)
        period = size * int(rng.integers(2, 4))
        a = math.floor(rng.uniform(lo, (lo + hi) / 2))
        n = int(rng.integers(8, 40))
        return [Rect((a + k * period, a + k * period + size), (off, off + size)) for k in range(n)]
    if style == "zebra":
        stripe = max(stroke, 4)
        gap = stripe + int(rng.integers(2, 6))
        length = int(rng.integers(16, 28))
        a = math.floor(rng.uniform(lo + 10, hi - length - 10)) if hi - lo > length + 20 else math.floor(lo)
        c = -half + 3
        rects = []
        while c + stripe <= half - 3:
            rects.append(Rect((a, a + length), (math.floor(c), math.floor(c) + stripe)))
            c += gap
        return rects
    raise ValueError(f"unknown marking style {style!r}")


def _fit_to_budget(rects: list[Rect], stroke_area, remaining: int) -> list[Rect]:
    """Drop trailing rectangles (or shorten a single line) until at most ``remaining`` pixels."""
    kept = list(rects)
    while kept and stroke_area(kept) > remaining:
        if len(kept) == 1:
            r = kept[0]
            width = r.across[1] - r.across[0]
            length = min(r.along[1] - r.along[0], remaining // max(width, 1))
            if length < 3:
                return []
            kept = [Rect((r.along[0], r.along[0] + length), r.across)]
            if stroke_area(kept) > remaining:
                kept = [Rect((r.along[0], r.along[0] + length - 1), r.across)]
                if stroke_area(kept) > remaining:
                    return []
        else:
            kept.pop()
    return kept


def render(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width)
    h, w = shape

    # terrain
    veg = _smooth_field(rng, shape, 64)
    grain = _smooth_field(rng, shape, 8)
    base = np.array([95.0, 115.0, 80.0]) + rng.uniform(-15, 15, 3)
    img = base[:, None, None] * (0.75 + 0.35 * veg + 0.1 * grain)[None]

    roads = _make_roads(spec, rng)
    coords = [_road_coords(r, shape) for r in roads]
    on_road = np.zeros(shape, dtype=bool)
    for road, (along, across) in zip(roads, coords):
        on_road |= np.abs(across) < road.width / 2

    # buildings with bright roof ridges, kept off the roads
    n_buildings = int(round(spec.clutter * spec.n_pixels / 150.0**2))
    canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    ridge_img = Image.new("L", (w, h), 0)
    rdraw = ImageDraw.Draw(ridge_img)
    roof_colors = []
    for k in range(n_buildings):
        bw, bh = rng.integers(30, 90, 2)
        x0, y0 = rng.integers(0, max(1, w - bw)), rng.integers(0, max(1, h - bh))
        if on_road[y0 : y0 + bh, x0 : x0 + bw].any():
            continue
        roof_colors.append(rng.uniform(110, 170))
        draw.rectangle([int(x0), int(y0), int(x0 + bw - 1), int(y0 + bh - 1)], fill=len(roof_colors))
        t = int(rng.integers(2, 4))
        if bw >= bh:
            yc = int(y0 + bh // 2)
            rdraw.rectangle([int(x0 + 3), yc, int(x0 + bw - 4), yc + t - 1], fill=1)
        else:
            xc = int(x0 + bw // 2)
            rdraw.rectangle([xc, int(y0 + 3), xc + t - 1, int(y0 + bh - 4)], fill=1)
    labels = np.asarray(canvas)
    for k, col in enumerate(roof_colors, start=1):
        sel = labels == k
        img[:, sel] = np.array([col * 1.05, col * 0.8, col * 0.7])[:, None]
    ridges = np.asarray(ridge_img).astype(bool) & (labels > 0)
    img[:, ridges] = rng.uniform(190, 235)

    # asphalt
    asphalt = rng.uniform(65, 95)
    tex = asphalt * (0.92 + 0.16 * grain)
    for c in range(3):
        img[c, on_road] = tex[on_road]

    # markings under a pixel budget
    mask = np.zeros(shape, dtype=bool)
    markings: list[Marking] = []
    budget = spec.lane_budget()
    remaining = budget
    min_block = 9
    # each enabled style stays pending until one visible instance is painted
    pending = [str(s) for s in rng.permutation(spec.styles)]
    attempts = 0
    while remaining >= min_block and attempts < 400:
        attempts += 1
        style = pending[0] if pending else str(rng.choice(spec.styles))
        ri = int(rng.integers(len(roads)))
        road = roads[ri]
        stroke = int(rng.integers(spec.stroke_width[0], spec.stroke_width[1] + 1))
        span = _road_extent(road, shape)
        rects = _candidate(style, road, stroke, span, rng)
        washed = rng.random() < spec.washed_out_fraction
        gray = rng.uniform(180, 255)
        road_area = np.abs(coords[ri][1]) < road.width / 2

        def area(rs, _road=road, _ri=ri, _ra=road_area):
            return int((rasterize(_road, rs, shape, coords[_ri]) & _ra & ~mask).sum())

        if not washed:
            # pending styles split what is left so none is starved
            rects = _fit_to_budget(rects, area, remaining // len(pending) if pending else remaining)
        if not rects:
            continue
        pix = rasterize(road, rects, shape, coords[ri]) & road_area
        if washed:
            pix &= ~mask
            faint = asphalt + rng.uniform(10, 25)
            img[:, pix] = faint
            markings.append(Marking(road, style, stroke, rects, faint, washed_out=True))
            continue
        new = pix & ~mask
        if not new.any():
            continue
        jitter = rng.normal(0, 4, size=int(pix.sum()))
        img[:, pix] = np.clip(gray + jitter, 180, 255)[None]
        mask |= pix
        remaining = budget - int(mask.sum())
        markings.append(Marking(road, style, stroke, rects, gray))
        if pending and pending[0] == style:
            pending.pop(0)

    lane = int(mask.sum())
    lo, hi = spec.ratio_bounds()
    ratio = (mask.size - lane) / lane if lane else math.inf
    if not lo <= ratio <= hi:
        raise ValueError(
            f"infeasible ratio: scene {spec.width}x{spec.height} reached background:lane {ratio:.1f}, target {spec.target_ratio}"
        )

    # vehicles on roads, never covering labelled marking pixels
    n_vehicles = int(round(spec.clutter * 12 * spec.road_count * max(spec.width, spec.height) / 1024))
    for _ in range(n_vehicles):
        ri = int(rng.integers(len(roads)))
        road = roads[ri]
        lo_a, hi_a = _road_extent(road, shape)
        a = rng.uniform(lo_a, hi_a)
        c = rng.uniform(-road.width / 2 + 6, road.width / 2 - 14)
        rect = Rect((a, a + rng.uniform(18, 32)), (c, c + rng.uniform(8, 12)))
        pix = rasterize(road, [rect], shape, coords[ri])
        if not pix.any() or (pix & mask).any():
            continue
        color = rng.uniform(20, 230, 3)
        img[:, pix] = color[:, None]

    clean = img.copy()

    # cast shadows: darken image only
    shade = Image.new("L", (w, h), 0)
    sdraw = ImageDraw.Draw(shade)
    for _ in range(spec.shadows):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(0.05, 0.15) * max(w, h)
        angles = np.sort(rng.uniform(0, 2 * math.pi, 5))
        pts = [(float(cx + r * math.cos(t) * rng.uniform(0.6, 1.4)), float(cy + r * math.sin(t))) for t in angles]
        sdraw.polygon(pts, fill=int(round(rng.uniform(0.4, 0.7) * 100)))
    factor = np.asarray(shade, dtype=np.float64) / 100.0
    factor[factor == 0] = 1.0
    img = img * factor[None]

    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    image = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return Scene(image, mask.astype(np.uint8), clean, roads, markings)


def generate(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """RGB image (``3 x H x W`` uint8) and binary mask for ``spec``."""
    scene = render(spec)
    return scene.image, scene.mask


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    name: str
    seed: int
    image: str
    mask: str
    background: int
    lane: int


@dataclass
class Manifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def load(self, entry: ManifestEntry) -> tuple[np.ndarray, np.ndarray]:
        return read_rgb(self.root / entry.image), read_mask(self.root / entry.mask)

    def write(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.tsv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(["split", "name", "seed", "image", "mask", "background", "lane"])
            for e in self.entries:
                writer.writerow([e.split, e.name, e.seed, e.image, e.mask, e.background, e.lane])
        return path

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh, delimiter="\t"))
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        try:
            entries = [
                ManifestEntry(r["split"], r["name"], int(r["seed"]), r["image"], r["mask"], int(r["background"]), int(r["lane"]))
                for r in rows
            ]
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed manifest {path}: {exc}") from exc
        return cls(path.parent, entries)


def split_counts(count: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    if count < 3:
        raise ValueError("dataset needs at least 3 scenes")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_val = int(round(count * fractions[1]))
    n_test = int(round(count * fractions[2]))
    if fractions[1] > 0:
        n_val = max(1, n_val)
    if fractions[2] > 0:
        n_test = max(1, n_test)
    n_train = count - n_val - n_test
    if n_train < 1:
        raise ValueError("split leaves no training scenes")
    return n_train, n_val, n_test


def scene_seed(root_seed: int, index: int) -> int:
    return int(np.random.SeedSequence(root_seed, spawn_key=(index,)).generate_state(1)[0])


def make_dataset(count: int, template: SceneSpec, fractions=(0.6, 0.2, 0.2), out_dir=None) -> Manifest:
    """Generate ``count`` scenes and write PNGs plus ``manifest.tsv`` under ``out_dir``."""
    n_train, n_val, _ = split_counts(count, tuple(fractions))
    root = ensure_dir(out_dir)
    ensure_dir(root / "images")
    ensure_dir(root / "masks")
    entries = []
    for i in range(count):
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        seed = scene_seed(template.seed, i)
        image, mask = generate(replace(template, seed=seed))
        name = f"scene_{i:04d}"
        write_rgb(root / "images" / f"{name}.png", image)
        write_mask(root / "masks" / f"{name}.png", mask)
        lane = int(mask.sum())
        entries.append(ManifestEntry(split, name, seed, f"images/{name}.png", f"masks/{name}.png", int(mask.size - lane), lane))
    manifest = Manifest(root, entries)
    manifest.write()
    return manifest
