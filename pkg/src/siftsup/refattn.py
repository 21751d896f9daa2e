"""Reference attention distributions built from filtered correspondences.

Each filtered match bins its person keypoint into a query cell i and its garment keypoint
into a key cell j. Per-query histograms h_i[j] normalized to sum one give p_{i,j}; queries
without matches are not supervised.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from siftsup.errors import OutOfBounds, ParseError
from siftsup.matching import MatchPair
from siftsup.sift import Keypoint

logger = logging.getLogger("siftsup.refattn")


@dataclass(frozen=True)
class GridSpec:
    """Feature-grid resolution over an image of the given pixel size."""

    image_h: int
    image_w: int
    grid_h: int
    grid_w: int

    def __post_init__(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError(f"grid dims must be >= 1, got {self.grid_h}x{self.grid_w}")
        if self.grid_h > self.image_h or self.grid_w > self.image_w:
            raise ValueError(
                f"grid {self.grid_h}x{self.grid_w} is finer than image {self.image_h}x{self.image_w}"
            )

    @property
    def size(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def resolution(self) -> tuple[int, int]:
        return self.grid_h, self.grid_w


def image_to_grid(x: float, y: float, grid: GridSpec) -> int:
    """Row-major cell index of an image-space point. Points on the right/bottom edge clamp into the last cell."""
    if not (math.isfinite(x) and math.isfinite(y)) or not (0 <= x <= grid.image_w and 0 <= y <= grid.image_h):
        raise OutOfBounds(f"point ({x}, {y}) is outside the {grid.image_w}x{grid.image_h} image")
    col = min(math.floor(x * grid.grid_w / grid.image_w), grid.grid_w - 1)
    row = min(math.floor(y * grid.grid_h / grid.image_h), grid.grid_h - 1)
    return row * grid.grid_w + col


@dataclass
class ReferenceAttention:
    """Sparse per-query histograms over key cells for one resolution."""

    query_grid: GridSpec
    key_grid: GridSpec
    histograms: dict[int, dict[int, int]] = field(default_factory=dict)

    @property
    def supervised_indices(self) -> list[int]:
        """Sorted query indices with at least one match."""
        return sorted(self.histograms)

    def __len__(self) -> int:
        return len(self.histograms)

    def count(self, i: int) -> int:
        return sum(self.histograms[i].values())

    def distribution(self, i: int) -> list[tuple[int, float]]:
        hist = self.histograms[i]
        n = sum(hist.values())
        return [(j, c / n) for j, c in sorted(hist.items())]

    @property
    def entries(self) -> dict[int, list[tuple[int, float]]]:
        return {i: self.distribution(i) for i in self.supervised_indices}

    def dense_row(self, i: int) -> np.ndarray:
        row = np.zeros(self.key_grid.size)
        for j, p in self.distribution(i):
            row[j] = p
        return row

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """(supervised query indices, |M| x Nk probability matrix)."""
        idx = np.array(self.supervised_indices, dtype=np.int64)
        probs = np.zeros((len(idx), self.key_grid.size))
        for r, i in enumerate(idx):
            probs[r] = self.dense_row(int(i))
        return idx, probs

    def to_text(self) -> str:
        q, k = self.query_grid, self.key_grid
        lines = [
            f"query_grid {q.image_h} {q.image_w} {q.grid_h} {q.grid_w} "
            f"key_grid {k.image_h} {k.image_w} {k.grid_h} {k.grid_w}"
        ]
        for i in self.supervised_indices:
            pairs = " ".join(f"{j} {p:.9g}" for j, p in self.distribution(i))
            lines.append(f"{i} {self.count(i)} {pairs}")
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_text(cls, text: str) -> ReferenceAttention:
        lines = [line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")]
        if not lines:
            raise ParseError("reference attention file is empty")
        head = lines[0].split()
        if len(head) != 10 or head[0] != "query_grid" or head[5] != "key_grid":
            raise ParseError(f"bad reference attention header: {lines[0]!r}")
        try:
            qg = GridSpec(*(int(v) for v in head[1:5]))
            kg = GridSpec(*(int(v) for v in head[6:10]))
        except ValueError as e:
            raise ParseError(f"bad reference attention header: {e}") from e

        ref = cls(qg, kg)
        for lineno, line in enumerate(lines[1:], 2):
            parts = line.split()
            if len(parts) < 4 or len(parts) % 2:
                raise ParseError(f"reference line {lineno}: expected 'i n_i j p ...'")
            try:
                i, n = int(parts[0]), int(parts[1])
                pairs = [(int(parts[a]), float(parts[a + 1])) for a in range(2, len(parts), 2)]
            except ValueError as e:
                raise ParseError(f"reference line {lineno}: {e}") from e
            if not 0 <= i < qg.size or n < 1:
                raise ParseError(f"reference line {lineno}: query index {i} or count {n} out of range")
            hist = {}
            for j, p in pairs:
                if not 0 <= j < kg.size:
                    raise ParseError(f"reference line {lineno}: key index {j} out of range")
                hist[j] = int(round(p * n))
            if sum(hist.values()) != n or min(hist.values()) < 1:
                raise ParseError(f"reference line {lineno}: probabilities do not match count {n}")
            ref.histograms[i] = hist
        return ref

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> ReferenceAttention:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ParseError(f"cannot read {path}: {e}") from e
        return cls.from_text(text)


def _inside(mask: np.ndarray | None, kp: Keypoint) -> bool:
    if mask is None:
        return True
    h, w = mask.shape
    return bool(mask[min(int(kp.y), h - 1), min(int(kp.x), w - 1)])


def build_reference(
    matches: list[MatchPair],
    kps_g: list[Keypoint],
    kps_p: list[Keypoint],
    query_grid: GridSpec,
    key_grid: GridSpec,
    mask: np.ndarray | None = None,
) -> ReferenceAttention:
    """Histogram filtered matches into per-query key distributions.

    *mask* is an optional boolean upper-body mask over the person image; matches whose
    person keypoint falls outside it are dropped before binning.
    """
    ref = ReferenceAttention(query_grid, key_grid)
    for m in matches:
        kp_p, kp_g = kps_p[m.person_idx], kps_g[m.garment_idx]
        if not _inside(mask, kp_p):
            continue
        i = image_to_grid(kp_p.x, kp_p.y, query_grid)
        j = image_to_grid(kp_g.x, kp_g.y, key_grid)
        hist = ref.histograms.setdefault(i, {})
        hist[j] = hist.get(j, 0) + 1
    ref.histograms = {i: dict(sorted(h.items())) for i, h in sorted(ref.histograms.items())}
    return ref


def build_multiscale(
    matches: list[MatchPair],
    kps_g: list[Keypoint],
    kps_p: list[Keypoint],
    image_dims: tuple[int, int],
    resolutions: list[tuple[int, int]] | tuple[tuple[int, int], ...],
    garment_dims: tuple[int, int] | None = None,
    mask: np.ndarray | None = None,
) -> list[ReferenceAttention]:
    """One reference per (grid_h, grid_w) resolution, rebuilt from the raw keypoints each time.

    *image_dims* is the person image (height, width); *garment_dims* defaults to it.
    An empty resolution list yields an empty list.
    """
    ph, pw = image_dims
    gh_img, gw_img = garment_dims or image_dims
    refs = []
    for grid_h, grid_w in resolutions:
        refs.append(
            build_reference(
                matches,
                kps_g,
                kps_p,
                GridSpec(ph, pw, grid_h, grid_w),
                GridSpec(gh_img, gw_img, grid_h, grid_w),
                mask=mask,
            )
        )
    logger.debug("built %d references: |M| = %s", len(refs), [len(r) for r in refs])
    return refs
