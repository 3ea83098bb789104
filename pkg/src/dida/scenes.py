"""Synthetic scenes with exact saliency masks, plus mask resampling.

A scene is one to three non-overlapping shapes (disk, square, triangle) on a
noisy or gently graded background. Every object color differs from the
background base color by at least ``CONTRAST + NOISE_AMPLITUDE`` per channel,
so each object pixel differs from each background pixel by at least
``CONTRAST`` per channel.

Rasterization samples pixel centres: pixel (i, j) belongs to a shape when the
point (i + 0.5, j + 0.5) in (row, col) coordinates is inside it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pnm
from .rng import XorShift64Star

SHAPES = ("disk", "square", "triangle")
CONTRAST = 0.3
NOISE_AMPLITUDE = 0.08
BACKGROUND_MODES = ("noise", "gradient")
_LAYOUT, _NOISE, _AUGMENT = 0, 1, 2


@dataclass(frozen=True)
class DataConfig:
    size: int = 32
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 8
    max_size: int = 14
    background: str = "noise"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects <= 3:
            raise ValueError("object count range must satisfy 1 <= min <= max <= 3")
        if not 2 <= self.min_size <= self.max_size <= self.size:
            raise ValueError("size range must satisfy 2 <= min <= max <= image size")
        if self.background not in BACKGROUND_MODES:
            raise ValueError(f"background must be one of {BACKGROUND_MODES}")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: tuple
    center: tuple   # (row, col), continuous pixel coordinates
    size: float     # diameter, side length, or triangle base (= height)

    def footprint(self, height: int, width: int) -> np.ndarray:
        ys = np.arange(height)[:, None] + 0.5
        xs = np.arange(width)[None, :] + 0.5
        cy, cx = self.center
        half = self.size / 2.0
        if self.shape == "disk":
            return (ys - cy) ** 2 + (xs - cx) ** 2 <= half * half
        if self.shape == "square":
            return (np.abs(ys - cy) <= half) & (np.abs(xs - cx) <= half)
        if self.shape == "triangle":
            depth = ys - (cy - half)   # distance below the apex
            return (depth >= 0) & (depth <= self.size) & (np.abs(xs - cx) <= depth / 2.0)
        raise ValueError(f"unknown shape {self.shape!r}")

    def area(self) -> float:
        if self.shape == "disk":
            return math.pi * (self.size / 2.0) ** 2
        if self.shape == "square":
            return self.size ** 2
        return self.size ** 2 / 2.0

    def bbox(self) -> tuple:
        half = self.size / 2.0
        cy, cx = self.center
        return cy - half, cx - half, cy + half, cx + half


@dataclass
class Scene:
    image: np.ndarray      # 3 x H x W in [0, 1]
    saliency: np.ndarray   # H x W in {0, 1}
    objects: list = field(default_factory=list)
    index: int = 0


def _object_color(rng: XorShift64Star, base: tuple) -> tuple:
    gap = CONTRAST + NOISE_AMPLITUDE
    color = []
    for b in base:
        below = max(0.0, b - gap)
        above = max(0.0, 1.0 - (b + gap))
        u = rng.uniform(0.0, below + above)
        color.append(u if u < below else b + gap + (u - below))
    return tuple(color)


def _place_objects(rng: XorShift64Star, config: DataConfig, count: int, base: tuple) -> list:
    objects, boxes = [], []
    attempts = restarts = 0
    while len(objects) < count:
        attempts += 1
        if attempts > 200:
            # early objects can block the rest; start the layout over
            restarts += 1
            if restarts > 100:
                raise RuntimeError("could not place non-overlapping objects; shrink the size range")
            objects, boxes, attempts = [], [], 0
        size = float(rng.randint(config.min_size, config.max_size))
        half = size / 2.0
        cy = rng.uniform(half, config.size - half)
        cx = rng.uniform(half, config.size - half)
        box = (cy - half, cx - half, cy + half, cx + half)
        # one-pixel gap keeps footprints disjoint and masks in separate components
        if any(box[0] < b[2] + 1 and b[0] < box[2] + 1 and box[1] < b[3] + 1 and b[1] < box[3] + 1
               for b in boxes):
            continue
        shape = SHAPES[rng.randint(0, len(SHAPES) - 1)]
        objects.append(SceneObject(shape, _object_color(rng, base), (cy, cx), size))
        boxes.append(box)
    return objects


def generate_scene(config: DataConfig, index: int, noise_variant: int = 0) -> Scene:
    """Deterministic in ``(config.seed, index)``.

    ``noise_variant`` redraws only the per-pixel background noise; object
    layout, colors and background base stay fixed.
    """
    n = config.size
    rng = XorShift64Star(config.seed, index, _LAYOUT)
    base = tuple(rng.uniform(0.15, 0.85) for _ in range(3))
    count = rng.randint(config.min_objects, config.max_objects)
    objects = _place_objects(rng, config, count, base)
    angle = rng.uniform(0.0, 2.0 * math.pi)

    if config.background == "noise":
        noise_rng = XorShift64Star(config.seed, index, _NOISE, noise_variant)
        offsets = np.array(noise_rng.uniforms(3 * n * n, -NOISE_AMPLITUDE, NOISE_AMPLITUDE))
        offsets = offsets.reshape(3, n, n)
    else:
        ys, xs = np.mgrid[0:n, 0:n] + 0.5
        ramp = (math.sin(angle) * (ys - n / 2) + math.cos(angle) * (xs - n / 2)) / (n / math.sqrt(2))
        offsets = np.broadcast_to(NOISE_AMPLITUDE * np.clip(ramp, -1.0, 1.0), (3, n, n))
    image = np.array(base)[:, None, None] + offsets
    saliency = np.zeros((n, n))
    for obj in objects:
        fp = obj.footprint(n, n)
        image[:, fp] = np.array(obj.color)[:, None]
        saliency[fp] = 1.0
    return Scene(np.clip(image, 0.0, 1.0), saliency, objects, index)


def generate_dataset(config: DataConfig, count: int, start: int = 0) -> list:
    return [generate_scene(config, i) for i in range(start, start + count)]


def split_holdout(scenes: list, fraction: float = 0.2) -> tuple:
    """Train / held-out split; the held-out part is the last ``fraction`` of indices."""
    n_hold = int(round(len(scenes) * fraction))
    return scenes[:len(scenes) - n_hold], scenes[len(scenes) - n_hold:]


def augment(scene: Scene, seed: int, flip: bool | None = None, jitter: float | None = None) -> Scene:
    """Horizontal flip and/or brightness jitter in [-0.1, 0.1], applied to image and mask.

    ``flip`` and ``jitter`` override the values drawn from ``seed``.
    """
    rng = XorShift64Star(seed, scene.index, _AUGMENT)
    drawn_flip = rng.next_u64() & 1 == 1
    drawn_jitter = rng.uniform(-0.1, 0.1)
    flip = drawn_flip if flip is None else flip
    jitter = drawn_jitter if jitter is None else jitter
    if not -0.1 <= jitter <= 0.1:
        raise ValueError("jitter must lie in [-0.1, 0.1]")
    image, mask = scene.image, scene.saliency
    if flip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if jitter:
        image = np.clip(image + jitter, 0.0, 1.0)
    objects = scene.objects
    if flip:
        width = scene.saliency.shape[1]
        objects = [replace(o, center=(o.center[0], width - o.center[1])) for o in objects]
    return Scene(np.ascontiguousarray(image), np.ascontiguousarray(mask), list(objects), scene.index)


# -- resampling ------------------------------------------------------------------

def _area_weights(n_out: int, n_in: int) -> np.ndarray:
    """Row ``a`` holds each input pixel's overlap with output cell ``a``, normalized to sum 1."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(n_in)[None, :] + 1)
    w = np.clip(hi - lo, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def downsample_mask(mask, p: int, q: int) -> np.ndarray:
    """Area-average pooling of an H x W map onto a p x q grid of cells."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    if not (1 <= p <= h and 1 <= q <= w):
        raise ValueError(f"cannot downsample {h}x{w} to {p}x{q}")
    return _area_weights(p, h) @ mask @ _area_weights(q, w).T


def _bilinear_weights(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel centres: output pixel centre maps to input coordinate, clamped to the edges
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    w = np.zeros((n_out, n_in))
    np.add.at(w, (np.arange(n_out), i0), 1.0 - t)
    np.add.at(w, (np.arange(n_out), i1), t)
    return w


def upsample_bilinear(m, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a p x q map to height x width (not differentiable)."""
    m = np.asarray(m, dtype=np.float64)
    return _bilinear_weights(height, m.shape[0]) @ m @ _bilinear_weights(width, m.shape[1]).T


# -- dataset on disk ---------------------------------------------------------------

MANIFEST = "manifest.tsv"


def write_dataset(directory, scenes: list) -> Path:
    """Write ``image_<i>.ppm`` / ``mask_<i>.pgm`` pairs and a tab-separated manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for scene in scenes:
        img, msk = f"image_{scene.index}.ppm", f"mask_{scene.index}.pgm"
        pnm.write_image(directory / img, scene.image)
        pnm.write_image(directory / msk, scene.saliency)
        lines.append(f"{scene.index}\t{img}\t{msk}")
    manifest = directory / MANIFEST
    manifest.write_text("".join(line + "\n" for line in lines), encoding="ascii")
    return manifest


def read_dataset(directory) -> list:
    """Scenes from a manifest; object metadata is not stored on disk."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    scenes = []
    for lineno, line in enumerate(manifest.read_text(encoding="ascii").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{manifest}:{lineno}: expected index<TAB>image<TAB>mask")
        image = pnm.read_image(directory / parts[1])
        mask = pnm.read_image(directory / parts[2])
        if image.ndim != 3 or mask.shape != image.shape[1:]:
            raise ValueError(f"{manifest}:{lineno}: image/mask size mismatch")
        scenes.append(Scene(image, (mask > 0.5).astype(np.float64), [], int(parts[0])))
    return scenes
