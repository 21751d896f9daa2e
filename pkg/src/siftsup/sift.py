"""SIFT keypoint detection and descriptor extraction.

Difference-of-Gaussians pyramid, 3x3x3 extremum scan, quadratic subpixel refinement,
36-bin orientation histograms and 4x4x8 gradient descriptors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from siftsup.config import SiftParams
from siftsup.errors import ImageTooSmall, ParseError
from siftsup.imgproc import GrayImage, blur_array, half_array

logger = logging.getLogger("siftsup.sift")

DESCRIPTOR_SIZE = 128
_ORI_BINS = 36
_DESC_WIDTH = 4
_DESC_BINS = 8
_DESC_CLAMP = 0.2
_MAX_REFINE_STEPS = 5


@dataclass(frozen=True, eq=False)
class Keypoint:
    x: float
    y: float
    size: float
    orientation: float
    response: float
    octave: int
    descriptor: np.ndarray


@dataclass
class _Octave:
    index: int
    gaussians: np.ndarray  # (s + 3, h, w)
    dogs: np.ndarray  # (s + 2, h, w)
    factor: float  # octave pixel -> input pixel
    _grads: dict | None = None

    def gradients(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Gradient magnitude and orientation (degrees, y down) of a Gaussian layer."""
        if self._grads is None:
            self._grads = {}
        if layer not in self._grads:
            img = self.gaussians[layer]
            dx = np.zeros_like(img)
            dy = np.zeros_like(img)
            dx[:, 1:-1] = img[:, 2:] - img[:, :-2]
            dy[1:-1, :] = img[2:, :] - img[:-2, :]
            mag = np.hypot(dx, dy)
            ori = np.rad2deg(np.arctan2(dy, dx)) % 360.0
            self._grads[layer] = (mag, ori)
        return self._grads[layer]


def _octave_sigmas(params: SiftParams) -> tuple[np.ndarray, np.ndarray]:
    """Absolute per-layer sigma and the incremental blur between consecutive layers."""
    s = params.scales_per_octave
    k = 2.0 ** (1.0 / s)
    absolute = params.sigma * k ** np.arange(s + 3)
    increments = np.zeros(s + 3)
    increments[1:] = np.sqrt(absolute[1:] ** 2 - absolute[:-1] ** 2)
    return absolute, increments


def _build_pyramid(base: np.ndarray, params: SiftParams, factor: float) -> list[_Octave]:
    s = params.scales_per_octave
    _, increments = _octave_sigmas(params)
    octaves: list[_Octave] = []
    image = base
    index = 0
    while min(image.shape) >= params.min_octave_size:
        layers = [image]
        for inc in increments[1:]:
            layers.append(blur_array(layers[-1], float(inc)))
        gaussians = np.stack(layers)
        octaves.append(_Octave(index, gaussians, gaussians[1:] - gaussians[:-1], factor * 2.0**index))
        # layer s carries twice the base blur
        image = half_array(layers[s])
        index += 1
    logger.debug("built %d octaves from %dx%d base", len(octaves), base.shape[1], base.shape[0])
    return octaves


def _candidates(octave: _Octave, params: SiftParams) -> np.ndarray:
    """(layer, row, col) of DoG samples that are >= or <= all 26 neighbours."""
    dogs = octave.dogs
    s = params.scales_per_octave
    threshold = 0.5 * params.contrast_threshold / s
    footprint = np.ones((3, 3, 3), dtype=bool)
    is_max = dogs >= ndimage.maximum_filter(dogs, footprint=footprint, mode="nearest")
    is_min = dogs <= ndimage.minimum_filter(dogs, footprint=footprint, mode="nearest")
    mask = (is_max | is_min) & (np.abs(dogs) > threshold)
    b = params.border
    valid = np.zeros_like(mask)
    valid[1 : s + 1, b:-b, b:-b] = True
    return np.argwhere(mask & valid)


def _derivatives(cube: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and Hessian at the centre of a (scale, row, col) 3x3x3 cube, ordered (x, y, s)."""
    c = cube[1, 1, 1]
    dx = 0.5 * (cube[1, 1, 2] - cube[1, 1, 0])
    dy = 0.5 * (cube[1, 2, 1] - cube[1, 0, 1])
    ds = 0.5 * (cube[2, 1, 1] - cube[0, 1, 1])
    dxx = cube[1, 1, 2] - 2 * c + cube[1, 1, 0]
    dyy = cube[1, 2, 1] - 2 * c + cube[1, 0, 1]
    dss = cube[2, 1, 1] - 2 * c + cube[0, 1, 1]
    dxy = 0.25 * (cube[1, 2, 2] - cube[1, 2, 0] - cube[1, 0, 2] + cube[1, 0, 0])
    dxs = 0.25 * (cube[2, 1, 2] - cube[2, 1, 0] - cube[0, 1, 2] + cube[0, 1, 0])
    dys = 0.25 * (cube[2, 2, 1] - cube[2, 0, 1] - cube[0, 2, 1] + cube[0, 0, 1])
    grad = np.array([dx, dy, ds])
    hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    return grad, hess


def _refine(octave: _Octave, layer: int, row: int, col: int, params: SiftParams):
    """Quadratic fit around a candidate; returns (layer, row, col, offset, value) or None."""
    dogs = octave.dogs
    s = params.scales_per_octave
    _, h, w = dogs.shape
    b = params.border
    for _ in range(_MAX_REFINE_STEPS):
        cube = dogs[layer - 1 : layer + 2, row - 1 : row + 2, col - 1 : col + 2]
        grad, hess = _derivatives(cube)
        offset = -np.linalg.lstsq(hess, grad, rcond=None)[0]
        if np.all(np.abs(offset) < 0.5):
            break
        col += int(round(offset[0]))
        row += int(round(offset[1]))
        layer += int(round(offset[2]))
        if not (b <= row < h - b and b <= col < w - b and 1 <= layer <= s):
            return None
    else:
        return None

    value = cube[1, 1, 1] + 0.5 * float(grad @ offset)
    if abs(value) < params.contrast_threshold:
        return None
    trace = hess[0, 0] + hess[1, 1]
    det = hess[0, 0] * hess[1, 1] - hess[0, 1] ** 2
    r = params.edge_threshold
    if det <= 0 or r * trace * trace >= (r + 1) ** 2 * det:
        return None
    return layer, row, col, offset, value


def _orientations(octave: _Octave, layer: int, x: float, y: float, scale: float, params: SiftParams) -> list[float]:
    """Dominant gradient orientations (degrees) around an octave-space position."""
    mag, ori = octave.gradients(layer)
    h, w = mag.shape
    sigma = 1.5 * scale
    radius = int(round(3.0 * sigma))
    cx, cy = int(round(x)), int(round(y))
    r0, r1 = max(cy - radius, 1), min(cy + radius, h - 2)
    c0, c1 = max(cx - radius, 1), min(cx + radius, w - 2)
    if r0 > r1 or c0 > c1:
        return []
    rows, cols = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    weights = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * sigma * sigma))
    bins = np.round(ori[r0 : r1 + 1, c0 : c1 + 1] * _ORI_BINS / 360.0).astype(int) % _ORI_BINS
    hist = np.bincount(bins.ravel(), weights=(weights * mag[r0 : r1 + 1, c0 : c1 + 1]).ravel(), minlength=_ORI_BINS)

    smooth = (
        6 * hist + 4 * (np.roll(hist, 1) + np.roll(hist, -1)) + np.roll(hist, 2) + np.roll(hist, -2)
    ) / 16.0
    top = smooth.max()
    if top <= 0:
        return []
    left, right = np.roll(smooth, 1), np.roll(smooth, -1)
    # ">=" on the right keeps the left bin of a two-bin plateau
    peaks = np.flatnonzero((smooth > left) & (smooth >= right) & (smooth >= params.peak_ratio * top))
    if peaks.size == 0:
        peaks = np.array([int(np.argmax(smooth))])
    peaks = sorted(peaks, key=lambda i: (-smooth[i], i))[: params.max_orientations]

    angles = []
    for p in peaks:
        lv, cv, rv = left[p], smooth[p], right[p]
        denom = lv - 2 * cv + rv
        interp = p + 0.5 * (lv - rv) / denom if denom != 0 else float(p)
        angle = (interp * 360.0 / _ORI_BINS) % 360.0
        angles.append(0.0 if angle >= 360.0 else float(angle))
    return angles


def _descriptor(
    octave: _Octave,
    layer: int,
    x: float,
    y: float,
    scale: float,
    angle: float,
    clamp_hook: Callable[[np.ndarray], None] | None,
) -> np.ndarray | None:
    mag, ori = octave.gradients(layer)
    h, w = mag.shape
    hist_width = 3.0 * scale
    half = int(round(hist_width * math.sqrt(2) * (_DESC_WIDTH + 1) * 0.5))
    half = int(min(half, math.hypot(h, w)))
    theta = math.radians(angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    cx, cy = int(round(x)), int(round(y))
    dr, dc = np.mgrid[-half : half + 1, -half : half + 1]
    # rotate offsets into the keypoint frame
    col_rot = dc * cos_t + dr * sin_t
    row_rot = -dc * sin_t + dr * cos_t
    row_bin = row_rot / hist_width + 0.5 * _DESC_WIDTH - 0.5
    col_bin = col_rot / hist_width + 0.5 * _DESC_WIDTH - 0.5
    rr, cc = cy + dr, cx + dc
    keep = (
        (row_bin > -1)
        & (row_bin < _DESC_WIDTH)
        & (col_bin > -1)
        & (col_bin < _DESC_WIDTH)
        & (rr > 0)
        & (rr < h - 1)
        & (cc > 0)
        & (cc < w - 1)
    )
    if not keep.any():
        return None
    rb, cb = row_bin[keep], col_bin[keep]
    weight = np.exp(-(row_rot[keep] ** 2 + col_rot[keep] ** 2) / (2.0 * (0.5 * _DESC_WIDTH * hist_width) ** 2))
    m = weight * mag[rr[keep], cc[keep]]
    ob = ((ori[rr[keep], cc[keep]] - angle) % 360.0) * _DESC_BINS / 360.0

    r0, c0, o0 = np.floor(rb).astype(int), np.floor(cb).astype(int), np.floor(ob).astype(int)
    fr, fc, fo = rb - r0, cb - c0, ob - o0
    hist = np.zeros((_DESC_WIDTH + 2, _DESC_WIDTH + 2, _DESC_BINS))
    # trilinear distribution into the 8 neighbouring bins; rows/cols padded by one
    for dr_, wr in ((0, 1 - fr), (1, fr)):
        for dc_, wc in ((0, 1 - fc), (1, fc)):
            for do_, wo in ((0, 1 - fo), (1, fo)):
                np.add.at(hist, (r0 + 1 + dr_, c0 + 1 + dc_, (o0 + do_) % _DESC_BINS), m * wr * wc * wo)

    vec = hist[1:-1, 1:-1, :].ravel()
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return None
    vec = np.minimum(vec / norm, _DESC_CLAMP)
    if clamp_hook is not None:
        clamp_hook(vec.copy())
    return vec / np.linalg.norm(vec)


def detect_and_describe(
    img: GrayImage,
    params: SiftParams | None = None,
    clamp_hook: Callable[[np.ndarray], None] | None = None,
) -> list[Keypoint]:
    """Detect SIFT keypoints on a [0, 1] grayscale image.

    Keypoints come back sorted by descending response, each with a unit-norm
    128-element descriptor. *clamp_hook* receives every descriptor after clamping
    and before the final renormalization.
    """
    params = params or SiftParams()
    params.validate()
    if img.width < 16 or img.height < 16:
        raise ImageTooSmall(f"SIFT needs at least 16x16 pixels, got {img.width}x{img.height}")

    base = img.data
    factor = 1.0
    assumed = params.assumed_blur
    if params.upsample:
        # output pixel u samples input position u / 2
        shape = (2 * base.shape[0], 2 * base.shape[1])
        base = ndimage.affine_transform(base, [0.5, 0.5], output_shape=shape, order=1, mode="nearest")
        factor = 0.5
        assumed *= 2.0
    sigma_diff = math.sqrt(max(params.sigma**2 - assumed**2, 0.01))
    base = blur_array(base, sigma_diff)

    s = params.scales_per_octave
    keypoints: list[Keypoint] = []
    seen: set[tuple[float, float, float, float]] = set()
    for octave in _build_pyramid(base, params, factor):
        for layer, row, col in _candidates(octave, params):
            refined = _refine(octave, int(layer), int(row), int(col), params)
            if refined is None:
                continue
            layer_r, row_r, col_r, offset, value = refined
            ox, oy = col_r + offset[0], row_r + offset[1]
            x, y = ox * octave.factor, oy * octave.factor
            if not (0 <= x < img.width and 0 <= y < img.height):
                continue
            scale = params.sigma * 2.0 ** ((layer_r + offset[2]) / s)
            size = 2.0 * scale * octave.factor
            for angle in _orientations(octave, layer_r, ox, oy, scale, params):
                key = (float(x), float(y), float(size), angle)
                if key in seen:
                    continue
                desc = _descriptor(octave, layer_r, ox, oy, scale, angle, clamp_hook)
                if desc is None:
                    continue
                seen.add(key)
                response = abs(float(value))
                keypoints.append(Keypoint(float(x), float(y), float(size), angle, response, octave.index, desc))

    keypoints.sort(key=lambda k: (-k.response, k.y, k.x, k.size, k.orientation))
    logger.debug("detected %d keypoints on %dx%d image", len(keypoints), img.width, img.height)
    return keypoints


def restrict_to_mask(keypoints: list[Keypoint], mask: np.ndarray | None) -> list[Keypoint]:
    """Keep keypoints whose pixel lies inside a boolean mask (None keeps everything)."""
    if mask is None:
        return list(keypoints)
    h, w = mask.shape
    out = []
    for kp in keypoints:
        r = min(int(kp.y), h - 1)
        c = min(int(kp.x), w - 1)
        if mask[r, c]:
            out.append(kp)
    return out


# ---------------------------------------------------------------------------
# Keypoint files
# ---------------------------------------------------------------------------


def format_keypoint(kp: Keypoint) -> str:
    head = [kp.x, kp.y, kp.size, kp.orientation, kp.response]
    fields = [f"{v:.9g}" for v in head] + [str(kp.octave)] + [f"{v:.9g}" for v in kp.descriptor]
    return " ".join(fields)


def write_keypoints(keypoints: list[Keypoint], path: str | Path) -> None:
    lines = [format_keypoint(kp) for kp in keypoints]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def parse_keypoints(text: str) -> list[Keypoint]:
    keypoints = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6 + DESCRIPTOR_SIZE:
            raise ParseError(f"keypoint line {lineno}: expected {6 + DESCRIPTOR_SIZE} fields, got {len(parts)}")
        try:
            x, y, size, ori, resp = (float(v) for v in parts[:5])
            octave = int(parts[5])
            desc = np.array([float(v) for v in parts[6:]])
        except ValueError as e:
            raise ParseError(f"keypoint line {lineno}: {e}") from e
        if not size > 0:
            raise ParseError(f"keypoint line {lineno}: size must be positive, got {size}")
        keypoints.append(Keypoint(x, y, size, ori, resp, octave, desc))
    return keypoints


def read_keypoints(path: str | Path) -> list[Keypoint]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    return parse_keypoints(text)
