"""Image and saliency-map value types, PNG I/O, bilinear resizing, thresholding.

Saliency values live on [0, 1] internally. On disk a map is an 8-bit
grayscale PNG with q = round(v * 255); reading maps q back to q / 255.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from weaksal.errors import DimensionMismatch, MalformedFile, UnsupportedFormat


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    """8-bit RGB image, ``pixels`` has shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image pixels must be (h, w, 3) with h, w >= 1, got {px.shape}")
        object.__setattr__(self, "pixels", _frozen(px.astype(np.uint8, copy=False)))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    """Per-pixel saliency in [0, 1], ``values`` has shape (height, width)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"saliency map must be 2-D and non-empty, got {v.shape}")
        if not np.all((v >= 0.0) & (v <= 1.0)):
            raise ValueError("saliency values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def full(cls, height: int, width: int, value: float) -> SaliencyMap:
        return cls(np.full((height, width), float(value)))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"mask must be 2-D and non-empty, got {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "values", _frozen(v.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def check_same_shape(*items, what: str = "inputs") -> None:
    shapes = {tuple(x.shape) for x in items}
    if len(shapes) > 1:
        raise DimensionMismatch(f"{what} have different dimensions: {sorted(shapes)}")


# --- PNG I/O -----------------------------------------------------------------

def _open(data: bytes) -> PILImage.Image:
    try:
        im = PILImage.open(io.BytesIO(data))
        im.load()
    except UnidentifiedImageError as exc:
        raise MalformedFile(f"not a decodable image: {exc}") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise MalformedFile(f"corrupt image stream: {exc}") from exc
    return im


def decode_image(data: bytes) -> Image:
    """Decode an 8-bit RGB or grayscale image; gray is replicated to RGB.

    Alpha channels are dropped and palette images expanded. Other modes
    (1-bit, 16-bit, float) raise UnsupportedFormat.
    """
    im = _open(data)
    if im.mode == "L":
        g = np.asarray(im, dtype=np.uint8)
        return Image(np.repeat(g[:, :, None], 3, axis=2))
    if im.mode in ("RGB", "RGBA", "P", "LA"):
        return Image(np.asarray(im.convert("RGB"), dtype=np.uint8))
    raise UnsupportedFormat(f"unsupported image mode {im.mode!r} (need 8-bit gray or RGB)")


def encode_image(image: Image) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(np.asarray(image.pixels), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def quantize(values: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(values, dtype=np.float64) * 255.0).astype(np.uint8)


def encode_map(smap: SaliencyMap) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(quantize(smap.values), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _decode_gray(data: bytes) -> np.ndarray:
    im = _open(data)
    if im.format != "PNG":
        raise UnsupportedFormat(f"maps must be PNG, got {im.format}")
    if im.mode == "L":
        return np.asarray(im, dtype=np.uint8)
    if im.mode in ("RGB", "RGBA"):
        rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 0], rgb[..., 2]):
            return rgb[..., 0].copy()
    raise UnsupportedFormat(f"maps must be 8-bit grayscale, got mode {im.mode!r}")


def decode_map(data: bytes) -> SaliencyMap:
    return SaliencyMap(_decode_gray(data).astype(np.float64) / 255.0)


def encode_mask(mask: BinaryMask) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(mask.values * np.uint8(255), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_mask(data: bytes) -> BinaryMask:
    return BinaryMask((_decode_gray(data) > 127).astype(np.uint8))


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def read_image(path) -> Image:
    return decode_image(_read(path))


def image_size(path) -> tuple[int, int]:
    """(width, height) from the file header, without decoding pixels."""
    try:
        with PILImage.open(path) as im:
            return im.size
    except UnidentifiedImageError as exc:
        raise MalformedFile(f"{path}: not a decodable image") from exc


def write_image(path, image: Image) -> None:
    _write(path, encode_image(image))


def read_map(path) -> SaliencyMap:
    return decode_map(_read(path))


def write_map(path, smap: SaliencyMap) -> None:
    _write(path, encode_map(smap))


def read_mask(path) -> BinaryMask:
    return decode_mask(_read(path))


def write_mask(path, mask: BinaryMask) -> None:
    _write(path, encode_mask(mask))


# --- resampling ----------------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int, extent: float | None = None) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix for 1-D bilinear resampling.

    Align-corners-false convention: output sample i sits at source
    coordinate (i + 0.5) * extent / n_out - 0.5, clamped to [0, n_in - 1].
    ``extent`` is the number of source cells the output spans (defaults to
    n_in); a smaller extent maps the output onto a leading sub-window, which
    is how padded feature grids are aligned with the unpadded image.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be >= 1")
    extent = float(n_in if extent is None else extent)
    src = (np.arange(n_out) + 0.5) * (extent / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (h, w) or (h, w, c) float array."""
    arr = np.asarray(arr, dtype=np.float64)
    ry = bilinear_matrix(arr.shape[0], out_h)
    rx = bilinear_matrix(arr.shape[1], out_w)
    if arr.ndim == 2:
        return ry @ arr @ rx.T
    return np.einsum("ij,jkc,lk->ilc", ry, arr, rx)


def resize_bilinear(smap: SaliencyMap, out_w: int, out_h: int) -> SaliencyMap:
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be >= 1")
    if (out_h, out_w) == smap.shape:
        return smap
    out = resize_array(smap.values, out_h, out_w)
    # convex combinations can overshoot [0, 1] by an ulp
    return SaliencyMap(np.clip(out, smap.values.min(), smap.values.max()))


def binarize(smap: SaliencyMap, t: float) -> BinaryMask:
    return BinaryMask((smap.values > t).astype(np.uint8))


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant field maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo <= 0.0:
        return np.zeros_like(values)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)
