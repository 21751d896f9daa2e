"""Image decode/encode, grayscale conversion, Gaussian blur and octave resampling."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from siftsup.errors import InvalidSigma, MalformedImage, TooSmall

# ITU-R 601 luma weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_SUPPORTED_FORMATS = {"PNG", "PPM"}


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Luminance image, values in [0, 1], shape (height, width)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"GrayImage data must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])


@dataclass(frozen=True, eq=False)
class RgbImage:
    """8-bit RGB image, shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.uint8)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"RgbImage data must have shape (h, w, 3), got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def decode_image(raw: bytes) -> RgbImage:
    """Decode a PNG or binary PPM (P6) stream. Alpha is dropped."""
    try:
        with Image.open(io.BytesIO(raw)) as img:
            fmt = img.format
            img.load()
            rgb = img.convert("RGB")
    except Exception as e:
        raise MalformedImage(f"cannot decode image: {e}") from e
    if fmt not in _SUPPORTED_FORMATS:
        raise MalformedImage(f"unsupported image format: {fmt}")
    if rgb.width == 0 or rgb.height == 0:
        raise MalformedImage("image has zero size")
    return RgbImage(np.asarray(rgb, dtype=np.uint8))


def _to_pil(img: RgbImage | GrayImage) -> Image.Image:
    if isinstance(img, GrayImage):
        return Image.fromarray(gray_to_rgb(img).data)
    return Image.fromarray(img.data)


def encode_png(img: RgbImage | GrayImage) -> bytes:
    buf = io.BytesIO()
    _to_pil(img).save(buf, format="PNG")
    return buf.getvalue()


def encode_ppm(img: RgbImage | GrayImage) -> bytes:
    buf = io.BytesIO()
    _to_pil(img).save(buf, format="PPM")
    return buf.getvalue()


def read_image(path: str | Path) -> RgbImage:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise MalformedImage(f"cannot read {path}: {e}") from e
    return decode_image(raw)


def write_image(img: RgbImage | GrayImage, path: str | Path) -> None:
    """Write PNG, or PPM when the suffix is .ppm."""
    path = Path(path)
    data = encode_ppm(img) if path.suffix.lower() == ".ppm" else encode_png(img)
    path.write_bytes(data)


# ---------------------------------------------------------------------------
# Pixel operations
# ---------------------------------------------------------------------------


def to_gray(img: RgbImage) -> GrayImage:
    rgb = img.data.astype(np.float64)
    r, g, b = LUMA_WEIGHTS
    lum = (r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]) / 255.0
    return GrayImage(np.clip(lum, 0.0, 1.0))


def gray_to_rgb(img: GrayImage) -> RgbImage:
    levels = np.round(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    return RgbImage(np.repeat(levels[..., None], 3, axis=2))


def resize(img: RgbImage, width: int, height: int) -> RgbImage:
    """Bilinear resize, used to bring dataset images to a common input size."""
    if width <= 0 or height <= 0:
        raise ValueError(f"invalid target size {width}x{height}")
    if (img.width, img.height) == (width, height):
        return img
    pil = Image.fromarray(img.data).resize((width, height), Image.Resampling.BILINEAR)
    return RgbImage(np.asarray(pil, dtype=np.uint8))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled 1-D Gaussian, radius ceil(4 sigma), normalized to sum 1."""
    if not sigma > 0:
        raise InvalidSigma(f"sigma must be > 0, got {sigma}")
    radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def blur_array(data: np.ndarray, sigma: float) -> np.ndarray:
    kernel = gaussian_kernel(sigma)
    out = ndimage.correlate1d(data, kernel, axis=0, mode="nearest")
    return ndimage.correlate1d(out, kernel, axis=1, mode="nearest")


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Separable Gaussian blur with clamp-to-border edges."""
    return GrayImage(blur_array(img.data, sigma))


def half_array(data: np.ndarray) -> np.ndarray:
    h, w = data.shape
    if h < 2 or w < 2:
        raise TooSmall(f"cannot halve a {w}x{h} image")
    return data[0 : 2 * (h // 2) : 2, 0 : 2 * (w // 2) : 2].copy()


def resample_half(img: GrayImage) -> GrayImage:
    """Nearest downsampling: output pixel (r, c) is source pixel (2r, 2c)."""
    return GrayImage(half_array(img.data))
