"""Seed saliency: raster-scan minimum barrier distance and external maps.

The barrier of a path is max(I) - min(I) along it. Each pixel keeps the
best path found so far together with that path's running max and min, and
sweeps alternate between raster order (neighbours above and to the left)
and inverse raster order (below and to the right). Only paths that the
sweeps can assemble are explored, so the result is an upper bound on the
exact minimum barrier distance.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from weaksal.errors import ConfigError, DimensionMismatch, MissingMap
from weaksal.imagecore import Image, SaliencyMap, image_size, minmax_normalize, read_map


@dataclass(frozen=True)
class SeedConfig:
    passes: int = 3
    use_boundary_seeds: bool = True
    post_blur_radius: int = 2

    def validate(self) -> None:
        if self.passes < 1:
            raise ConfigError("seed passes must be >= 1")
        if self.post_blur_radius < 0:
            raise ConfigError("post_blur_radius must be >= 0")


def seed_mask(h: int, w: int, use_boundary_seeds: bool = True) -> np.ndarray:
    """Background seeds: the image border, or only its four corners."""
    seeds = np.zeros((h, w), dtype=bool)
    if use_boundary_seeds:
        seeds[0, :] = seeds[-1, :] = True
        seeds[:, 0] = seeds[:, -1] = True
    else:
        seeds[[0, 0, -1, -1], [0, -1, 0, -1]] = True
    return seeds


def _diagonals(h: int, w: int):
    """Pixel index arrays for each anti-diagonal i + j = k, in order."""
    for k in range(h + w - 1):
        i = np.arange(max(0, k - w + 1), min(h, k + 1))
        yield i, k - i


def _sweep(chan, dist, hi, lo, reverse: bool) -> None:
    h, w = chan.shape
    step = 1 if reverse else -1
    diags = list(_diagonals(h, w))
    if reverse:
        diags.reverse()
    for i, j in diags:
        val = chan[i, j]
        best, best_hi, best_lo = dist[i, j], hi[i, j], lo[i, j]
        # vertical neighbour first, then horizontal; ties keep the earlier
        for ni, nj in ((i + step, j), (i, j + step)):
            ok = (ni >= 0) & (ni < h) & (nj >= 0) & (nj < w)
            ni_c, nj_c = np.clip(ni, 0, h - 1), np.clip(nj, 0, w - 1)
            cand_hi = np.maximum(hi[ni_c, nj_c], val)
            cand_lo = np.minimum(lo[ni_c, nj_c], val)
            cand = np.where(ok, cand_hi - cand_lo, np.inf)
            better = cand < best
            best = np.where(better, cand, best)
            best_hi = np.where(better, cand_hi, best_hi)
            best_lo = np.where(better, cand_lo, best_lo)
        dist[i, j], hi[i, j], lo[i, j] = best, best_hi, best_lo


def mbd_channel(chan: np.ndarray, seeds: np.ndarray, passes: int) -> np.ndarray:
    """Approximate barrier distance of one channel to the seed pixels."""
    chan = np.asarray(chan, dtype=np.float64)
    dist = np.where(seeds, 0.0, np.inf)
    hi = chan.copy()
    lo = chan.copy()
    for p in range(passes):
        _sweep(chan, dist, hi, lo, reverse=bool(p % 2))
    return dist


def mbd_distance(image: Image, cfg: SeedConfig | None = None) -> np.ndarray:
    """Channel-summed barrier distance map, before blurring and normalising."""
    cfg = cfg or SeedConfig()
    cfg.validate()
    seeds = seed_mask(image.height, image.width, cfg.use_boundary_seeds)
    px = image.pixels.astype(np.float64)
    total = np.zeros(image.shape)
    for c in range(3):
        total += mbd_channel(px[:, :, c], seeds, cfg.passes)
    return total


def mbd_seed_saliency(image: Image, cfg: SeedConfig | None = None) -> SaliencyMap:
    cfg = cfg or SeedConfig()
    dist = mbd_distance(image, cfg)
    if cfg.post_blur_radius > 0:
        dist = ndimage.uniform_filter(dist, size=2 * cfg.post_blur_radius + 1, mode="nearest")
    return SaliencyMap(minmax_normalize(dist))


def external_map_path(map_dir, image_path) -> Path:
    """External seed maps are named after the image: <stem>.png."""
    return Path(map_dir) / (Path(image_path).stem + ".png")


def load_external_saliency(map_dir, manifest) -> list[SaliencyMap]:
    """Read one grayscale map per manifest entry, in manifest order."""
    maps = []
    for entry in manifest.entries:
        path = external_map_path(map_dir, entry.image)
        if not path.is_file():
            raise MissingMap(f"no saliency map for {entry.image} (expected {path})")
        smap = read_map(path)
        w, h = image_size(entry.image)
        if smap.shape != (h, w):
            raise DimensionMismatch(
                f"map {path.name} is {smap.width}x{smap.height} but image {entry.image} is {w}x{h}")
        maps.append(smap)
    return maps
