"""Synthetic benchmark: coloured shapes on textured backgrounds.

A class is a (shape, colour) pair, so an image's label set names the shapes
it shows. Every image comes with an exact foreground mask used only for
evaluation.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from weaksal.errors import ConfigError
from weaksal.imagecore import BinaryMask, Image, SaliencyMap, write_image, write_mask
from weaksal.pipeline.manifest import DatasetManifest, ManifestEntry

SHAPES = ("disk", "square", "triangle")
PALETTE = ((220, 40, 40), (40, 190, 60), (50, 80, 230), (235, 205, 30))
MAX_CLASSES = len(SHAPES) * len(PALETTE)
MIN_VISIBLE = 12  # pixels an object must show to count as labelled


def class_of(shape: int, colour: int) -> int:
    return shape * len(PALETTE) + colour


def shape_mask(kind: str, cy: float, cx: float, r: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    # upward triangle inscribed in the circle of radius r
    top, base = cy - r, cy + 0.5 * r
    half = (yy - top) / (base - top) * r * 0.87
    return (yy >= top) & (yy <= base) & (np.abs(xx - cx) <= half)


def textured_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(70, 170, 3)
    # desaturate towards grey so objects stand out by colour, not always by brightness
    base = 0.6 * base + 0.4 * base.mean()
    blotches = ndimage.gaussian_filter(rng.normal(0, 1, (h, w, 3)), sigma=(4, 4, 0))
    blotches *= 25.0 / max(blotches.std(), 1e-9)
    yy, xx = np.mgrid[0:h, 0:w]
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(5, 12)
    stripes = 12.0 * np.sin(2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / period)
    grain = rng.normal(0, 6, (h, w, 3))
    return base + blotches + stripes[..., None] + grain


def render_scene(rng: np.random.Generator, n_classes: int, h: int, w: int):
    """One image, its label set and its foreground mask."""
    while True:
        px = textured_background(rng, h, w)
        owner = np.full((h, w), -1)
        classes = []
        for k in range(int(rng.integers(1, 4))):
            c = int(rng.integers(n_classes))
            shape, colour = divmod(c, len(PALETTE))
            r = rng.uniform(min(h, w) / 8, min(h, w) / 4.5)
            cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
            m = shape_mask(SHAPES[shape], cy, cx, r, h, w)
            tint = np.asarray(PALETTE[colour], float) + rng.normal(0, 10, 3)
            px[m] = tint + rng.normal(0, 5, (int(m.sum()), 3))
            owner[m] = k
            classes.append(c)
        fg = owner >= 0
        visible = {classes[k] for k in range(len(classes)) if (owner == k).sum() >= MIN_VISIBLE}
        if visible and 0 < fg.sum() < fg.size:
            labels = tuple(sorted(visible))
            return Image(np.clip(np.rint(px), 0, 255).astype(np.uint8)), labels, BinaryMask(fg)


def generate_synth_dataset(n_images: int, n_classes: int, seed: int, out_dir, size: int = 48) -> DatasetManifest:
    """Write images/, gt/ and manifest.txt under ``out_dir``.

    Annotation paths point at annotations/<name>.png; the files themselves
    are produced later by the seed step.
    """
    if n_images < 1:
        raise ConfigError("n_images must be >= 1")
    if not 2 <= n_classes <= MAX_CLASSES:
        raise ConfigError(f"n_classes must be in 2..{MAX_CLASSES}")
    if size < 16:
        raise ConfigError("size must be >= 16")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_images):
        image, labels, gt = render_scene(rng, n_classes, size, size)
        name = f"img{i:04d}"
        write_image(out / "images" / f"{name}.png", image)
        write_mask(out / "gt" / f"{name}.png", gt)
        entries.append(ManifestEntry(out / "images" / f"{name}.png", labels,
                                     out / "annotations" / f"{name}.png", out / "gt" / f"{name}.png"))
    manifest = DatasetManifest(entries, out)
    manifest.save(out / "manifest.txt")
    return manifest


def corrupt_annotation(smap: SaliencyMap, rng: np.random.Generator, erosion: int = 3,
                       noise: float = 0.15) -> SaliencyMap:
    """Degrade a seed map: grey-level erosion shrinks salient regions, then additive Gaussian noise."""
    v = smap.values
    if erosion > 1:
        v = ndimage.grey_erosion(v, size=(erosion, erosion), mode="nearest")
    if noise > 0:
        v = v + rng.normal(0.0, noise, v.shape)
    return SaliencyMap(np.clip(v, 0.0, 1.0))
