"""Brute-force descriptor matching with Lowe's ratio test."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from siftsup.errors import EmptyKeypoints, ParseError
from siftsup.sift import Keypoint

logger = logging.getLogger("siftsup.matching")


@dataclass(frozen=True)
class MatchPair:
    """Garment keypoint index, person keypoint index and their descriptor distance."""

    garment_idx: int
    person_idx: int
    distance: float


def descriptor_matrix(keypoints: list[Keypoint]) -> np.ndarray:
    return np.stack([kp.descriptor for kp in keypoints]).astype(np.float64)


def match_ratio_test(desc_a: list[Keypoint], desc_b: list[Keypoint], ratio: float = 0.75) -> list[MatchPair]:
    """Match every keypoint of *desc_a* (garment) to its nearest neighbour in *desc_b* (person).

    A match is kept iff d1 < ratio * d2. With a single candidate in *desc_b* the match is kept
    unconditionally. Distance ties resolve to the lower index in *desc_b*.
    """
    if not desc_a or not desc_b:
        raise EmptyKeypoints(f"cannot match {len(desc_a)} against {len(desc_b)} keypoints")
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")

    dist = cdist(descriptor_matrix(desc_a), descriptor_matrix(desc_b))
    if dist.shape[1] == 1:
        return [MatchPair(i, 0, float(dist[i, 0])) for i in range(dist.shape[0])]

    order = np.argsort(dist, axis=1, kind="stable")[:, :2]
    rows = np.arange(dist.shape[0])
    d1 = dist[rows, order[:, 0]]
    d2 = dist[rows, order[:, 1]]
    keep = d1 < ratio * d2
    matches = [MatchPair(int(i), int(order[i, 0]), float(d1[i])) for i in np.flatnonzero(keep)]
    logger.debug("ratio test %.2f kept %d of %d", ratio, len(matches), len(desc_a))
    return matches


# ---------------------------------------------------------------------------
# Match files
# ---------------------------------------------------------------------------


def format_matches(matches: list[MatchPair]) -> str:
    return "".join(f"{m.garment_idx} {m.person_idx} {m.distance:.9g}\n" for m in matches)


def write_matches(matches: list[MatchPair], path: str | Path) -> None:
    Path(path).write_text(format_matches(matches), encoding="utf-8")


def parse_matches(text: str) -> list[MatchPair]:
    matches = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"match line {lineno}: expected 3 fields, got {len(parts)}")
        try:
            m = MatchPair(int(parts[0]), int(parts[1]), float(parts[2]))
        except ValueError as e:
            raise ParseError(f"match line {lineno}: {e}") from e
        if m.garment_idx < 0 or m.person_idx < 0 or m.distance < 0:
            raise ParseError(f"match line {lineno}: negative field")
        matches.append(m)
    return matches


def read_matches(path: str | Path) -> list[MatchPair]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    return parse_matches(text)


def check_match_indices(matches: list[MatchPair], n_garment: int, n_person: int) -> list[MatchPair]:
    """Raise ParseError when a match refers to a keypoint that does not exist."""
    for k, m in enumerate(matches):
        if m.garment_idx >= n_garment or m.person_idx >= n_person:
            raise ParseError(
                f"match {k} refers to keypoints ({m.garment_idx}, {m.person_idx}) "
                f"but only {n_garment} garment / {n_person} person keypoints exist"
            )
    return matches
