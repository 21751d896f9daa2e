"""Geometric filtering of ratio-test matches: angle/scale gate, duplicate removal, RANSAC homography."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from siftsup.config import FilterConfig
from siftsup.errors import DegenerateConfiguration, ParseError
from siftsup.matching import MatchPair
from siftsup.sift import Keypoint

logger = logging.getLogger("siftsup.filtering")

_COLLINEAR_EPS = 1e-6
_DET_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective transform (garment -> person), normalized so that H[2, 2] == 1."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) < _DET_EPS:
            raise ValueError("homography has H[2, 2] == 0 and cannot be normalized")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= _DET_EPS:
            raise ValueError("homography is singular")
        object.__setattr__(self, "matrix", m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return _project(self.matrix, points)


@dataclass
class FilterReport:
    input: int = 0
    after_angle_scale: int = 0
    after_dedup: int = 0
    after_ransac: int = 0
    homography: Homography | None = None
    stage_names: ClassVar[tuple[str, ...]] = ("input", "after_angle_scale", "after_dedup", "after_ransac")

    def counts(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in self.stage_names}

    def to_text(self) -> str:
        lines = [f"{name}={value}" for name, value in self.counts().items()]
        if self.homography is None:
            lines.append("homography=none")
        else:
            lines.append("homography=" + " ".join(f"{v:.9g}" for v in self.homography.matrix.ravel()))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_text(cls, text: str) -> FilterReport:
        report = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ParseError(f"report line {lineno}: expected key=value")
            key = key.strip()
            value = value.strip()
            try:
                if key == "homography":
                    if value != "none":
                        report.homography = Homography(np.array([float(v) for v in value.split()]).reshape(3, 3))
                elif key in report.stage_names:
                    setattr(report, key, int(value))
                else:
                    raise ParseError(f"report line {lineno}: unknown key {key!r}")
            except ValueError as e:
                raise ParseError(f"report line {lineno}: {e}") from e
        return report


# ---------------------------------------------------------------------------
# Stage 1: angle / scale gate
# ---------------------------------------------------------------------------


def circular_diff(a: float, b: float) -> float:
    """Absolute angular difference in degrees, wrapped to [0, 180]."""
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def filter_angle_scale(
    matches: list[MatchPair], kps_g: list[Keypoint], kps_p: list[Keypoint], cfg: FilterConfig
) -> list[MatchPair]:
    """Keep matches whose orientation change and person/garment size ratio are within bounds (inclusive)."""
    kept = []
    for m in matches:
        g, p = kps_g[m.garment_idx], kps_p[m.person_idx]
        if circular_diff(g.orientation, p.orientation) > cfg.angle_max_deg:
            continue
        ratio = p.size / g.size
        if cfg.scale_ratio_min <= ratio <= cfg.scale_ratio_max:
            kept.append(m)
    return kept


# ---------------------------------------------------------------------------
# Stage 2: duplicate locations
# ---------------------------------------------------------------------------


def _pixel(kp: Keypoint) -> tuple[int, int]:
    return math.floor(kp.x + 0.5), math.floor(kp.y + 0.5)


def dedup_matches(matches: list[MatchPair], kps_g: list[Keypoint], kps_p: list[Keypoint]) -> list[MatchPair]:
    """Keep one match per rounded garment pixel and per rounded person pixel.

    Matches are claimed in order of (distance, input index); a match survives when neither of its
    pixels was claimed by a better one. Output preserves input order.
    """
    order = sorted(range(len(matches)), key=lambda i: (matches[i].distance, i))
    taken_g: set[tuple[int, int]] = set()
    taken_p: set[tuple[int, int]] = set()
    survivors = set()
    for i in order:
        m = matches[i]
        pg, pp = _pixel(kps_g[m.garment_idx]), _pixel(kps_p[m.person_idx])
        if pg in taken_g or pp in taken_p:
            continue
        taken_g.add(pg)
        taken_p.add(pp)
        survivors.add(i)
    return [m for i, m in enumerate(matches) if i in survivors]


# ---------------------------------------------------------------------------
# Stage 3: RANSAC homography
# ---------------------------------------------------------------------------


def _project(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.column_stack([points, np.ones(len(points))]) @ h.T
    with np.errstate(divide="ignore", invalid="ignore"):
        out = pts[:, :2] / pts[:, 2:3]
    out[~np.isfinite(out)] = np.inf
    return out


def _normalizer(points: np.ndarray) -> np.ndarray:
    centre = points.mean(axis=0)
    spread = np.linalg.norm(points - centre, axis=1).mean()
    s = math.sqrt(2) / spread if spread > 0 else 1.0
    return np.array([[s, 0, -s * centre[0]], [0, s, -s * centre[1]], [0, 0, 1.0]])


def solve_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalized direct linear transform; least squares when more than four points are given."""
    t1, t2 = _normalizer(src), _normalizer(dst)
    a = _project(t1, src)
    b = _project(t2, dst)
    rows = []
    for (x, y), (u, v) in zip(a, b):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y, -v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    h = np.linalg.inv(t2) @ vt[-1].reshape(3, 3) @ t1
    if abs(h[2, 2]) < _DET_EPS:
        return None
    h = h / h[2, 2]
    if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) <= _DET_EPS:
        return None
    return h


def _collinear(points: np.ndarray) -> bool:
    for i, j, k in itertools.combinations(range(len(points)), 3):
        d1 = points[j] - points[i]
        d2 = points[k] - points[i]
        if abs(d1[0] * d2[1] - d1[1] * d2[0]) <= _COLLINEAR_EPS:
            return True
    return False


def transfer_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Symmetric transfer error: the larger of the forward and backward reprojection distances."""
    forward = np.linalg.norm(_project(h, src) - dst, axis=1)
    backward = np.linalg.norm(_project(np.linalg.inv(h), dst) - src, axis=1)
    return np.maximum(forward, backward)


def ransac_homography(
    matches: list[MatchPair], kps_g: list[Keypoint], kps_p: list[Keypoint], cfg: FilterConfig
) -> tuple[list[MatchPair], Homography | None]:
    """Seeded RANSAC over 4-point samples; returns the best consensus set and the homography refit on it."""
    n = len(matches)
    if n < cfg.min_matches_for_ransac:
        return list(matches), None

    src = np.array([[kps_g[m.garment_idx].x, kps_g[m.garment_idx].y] for m in matches])
    dst = np.array([[kps_p[m.person_idx].x, kps_p[m.person_idx].y] for m in matches])
    rng = np.random.default_rng(cfg.ransac_seed)

    best_mask: np.ndarray | None = None
    best_h: np.ndarray | None = None
    best_count = 0
    degenerate = 0
    for _ in range(cfg.ransac_iters):
        sample = rng.choice(n, 4, replace=False)
        if _collinear(src[sample]) or _collinear(dst[sample]):
            degenerate += 1
            continue
        h = solve_homography(src[sample], dst[sample])
        if h is None:
            degenerate += 1
            continue
        mask = transfer_error(h, src, dst) <= cfg.ransac_reproj_px
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_h, best_count = mask, h, count
            if count == n:
                break

    if best_mask is None:
        raise DegenerateConfiguration(f"all {degenerate} RANSAC samples were degenerate")

    refit = solve_homography(src[best_mask], dst[best_mask]) if best_count >= 4 else None
    h_final = Homography(refit if refit is not None else best_h)
    inliers = [m for m, ok in zip(matches, best_mask) if ok]
    logger.debug("RANSAC kept %d of %d matches (%d degenerate samples)", len(inliers), n, degenerate)
    return inliers, h_final


# ---------------------------------------------------------------------------
# Cascade
# ---------------------------------------------------------------------------


def run_filter_cascade(
    matches: list[MatchPair], kps_g: list[Keypoint], kps_p: list[Keypoint], cfg: FilterConfig | None = None
) -> tuple[list[MatchPair], FilterReport]:
    """Angle/scale gate, then duplicate removal, then RANSAC."""
    cfg = cfg or FilterConfig()
    cfg.validate()
    report = FilterReport(input=len(matches))
    stage1 = filter_angle_scale(matches, kps_g, kps_p, cfg)
    report.after_angle_scale = len(stage1)
    stage2 = dedup_matches(stage1, kps_g, kps_p)
    report.after_dedup = len(stage2)
    stage3, homography = ransac_homography(stage2, kps_g, kps_p, cfg)
    report.after_ransac = len(stage3)
    report.homography = homography
    logger.debug(
        "filter cascade: %d -> %d -> %d -> %d", report.input, report.after_angle_scale, report.after_dedup,
        report.after_ransac,
    )
    return stage3, report
