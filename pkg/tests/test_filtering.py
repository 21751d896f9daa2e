"""Tests for the angle/scale gate, duplicate removal, RANSAC and the full cascade."""

from __future__ import annotations

import numpy as np
import pytest

from siftsup.config import FilterConfig
from siftsup.errors import DegenerateConfiguration, ParseError
from siftsup.filtering import (
    FilterReport,
    Homography,
    circular_diff,
    dedup_matches,
    filter_angle_scale,
    ransac_homography,
    run_filter_cascade,
    solve_homography,
    transfer_error,
)
from siftsup.imgproc import GrayImage
from siftsup.matching import MatchPair, match_ratio_test
from siftsup.sift import detect_and_describe
from tests.conftest import keypoint, textured_array


def _pairs(garment, person):
    matches = [MatchPair(i, i, 0.1 * i) for i in range(len(garment))]
    return matches, garment, person


class TestAngleScale:
    @pytest.mark.parametrize(
        ("angle", "kept"), [(44.0, True), (45.0, True), (46.0, False), (315.0, True), (314.0, False)]
    )
    def test_angle_bound_inclusive(self, angle, kept):
        matches, g, p = _pairs([keypoint(5, 5, 4.0, 0.0)], [keypoint(5, 5, 4.0, angle)])
        assert (filter_angle_scale(matches, g, p, FilterConfig()) == matches) is kept

    @pytest.mark.parametrize(("ratio", "kept"), [(0.43, False), (0.44, True), (1.0, True), (2.25, True), (2.26, False)])
    def test_scale_bounds_inclusive(self, ratio, kept):
        matches, g, p = _pairs([keypoint(5, 5, 1.0)], [keypoint(5, 5, ratio)])
        assert (filter_angle_scale(matches, g, p, FilterConfig()) == matches) is kept

    def test_circular_diff_wraps(self):
        assert circular_diff(350.0, 10.0) == pytest.approx(20.0)
        assert circular_diff(0.0, 180.0) == 180.0
        assert circular_diff(90.0, 90.0) == 0.0

    def test_custom_bounds(self):
        matches, g, p = _pairs([keypoint(5, 5, 1.0)], [keypoint(5, 5, 3.0, 60.0)])
        cfg = FilterConfig(angle_max_deg=90.0, scale_ratio_max=4.0)
        assert filter_angle_scale(matches, g, p, cfg) == matches


class TestDedup:
    def test_best_distance_claims_pixel(self):
        g = [keypoint(10.2, 10.0), keypoint(9.8, 10.1), keypoint(30.0, 30.0)]
        p = [keypoint(1.0, 1.0), keypoint(5.0, 5.0), keypoint(7.0, 7.0)]
        matches = [MatchPair(0, 0, 0.5), MatchPair(1, 1, 0.2), MatchPair(2, 2, 0.9)]
        assert dedup_matches(matches, g, p) == [matches[1], matches[2]]

    def test_person_side_duplicates(self):
        g = [keypoint(1.0, 1.0), keypoint(20.0, 20.0)]
        p = [keypoint(4.4, 4.4), keypoint(3.6, 3.6)]
        matches = [MatchPair(0, 0, 0.3), MatchPair(1, 1, 0.3)]
        # equal distance: lower input index wins
        assert dedup_matches(matches, g, p) == [matches[0]]

    def test_output_keeps_input_order(self):
        g = [keypoint(float(i * 10), 0.0) for i in range(4)]
        p = [keypoint(float(i * 10), 50.0) for i in range(4)]
        matches = [MatchPair(i, i, d) for i, d in enumerate([0.4, 0.1, 0.3, 0.2])]
        assert dedup_matches(matches, g, p) == matches

    def test_empty(self):
        assert dedup_matches([], [], []) == []


def _homography_scene(n_inliers=30, n_outliers=10, seed=0):
    rng = np.random.default_rng(seed)
    h_true = np.array([[1.05, 0.02, 4.0], [-0.03, 0.97, -2.0], [1e-4, -5e-5, 1.0]])
    src = rng.uniform(10, 200, (n_inliers + n_outliers, 2))
    dst = Homography(h_true).apply(src)
    # outliers sit 20-60 px away from where the model sends them
    dst[n_inliers:] += rng.uniform(20, 60, (n_outliers, 2)) * rng.choice([-1.0, 1.0], (n_outliers, 2))
    g = [keypoint(float(x), float(y)) for x, y in src]
    p = [keypoint(float(x), float(y)) for x, y in dst]
    matches = [MatchPair(i, i, 0.0) for i in range(len(g))]
    return h_true, matches, g, p


class TestRansac:
    def test_recovers_inliers_and_model(self):
        h_true, matches, g, p = _homography_scene()
        inliers, h = ransac_homography(matches, g, p, FilterConfig())
        assert [m.garment_idx for m in inliers] == list(range(30))
        assert np.allclose(h.matrix, h_true, atol=1e-6)

    def test_seeded(self):
        _, matches, g, p = _homography_scene(seed=4)
        a = ransac_homography(matches, g, p, FilterConfig(ransac_seed=7))
        b = ransac_homography(matches, g, p, FilterConfig(ransac_seed=7))
        assert a[0] == b[0]
        assert np.array_equal(a[1].matrix, b[1].matrix)

    def test_fewer_than_four_passes_through(self):
        _, matches, g, p = _homography_scene(n_inliers=3, n_outliers=0)
        inliers, h = ransac_homography(matches, g, p, FilterConfig())
        assert inliers == matches
        assert h is None

    def test_collinear_points_are_degenerate(self):
        g = [keypoint(float(i), 2.0 * i) for i in range(6)]
        matches = [MatchPair(i, i, 0.0) for i in range(6)]
        with pytest.raises(DegenerateConfiguration):
            ransac_homography(matches, g, g, FilterConfig(ransac_iters=50))

    def test_symmetric_transfer_error(self):
        h = np.array([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
        src = np.array([[1.0, 1.0]])
        dst = np.array([[2.0, 3.0]])
        # forward miss is 1 px, backward miss is 0.5 px
        assert transfer_error(h, src, dst)[0] == pytest.approx(1.0)

    def test_translation_with_gross_outliers(self):
        rng = np.random.default_rng(1)
        src = rng.uniform(0, 100, (12, 2))
        dst = src + [12.0, -7.0]
        dst[10:] += [100.0, 0.0]
        g = [keypoint(float(x), float(y)) for x, y in src]
        p = [keypoint(float(x), float(y)) for x, y in dst]
        matches = [MatchPair(i, i, 0.0) for i in range(12)]
        inliers, h = ransac_homography(matches, g, p, FilterConfig())
        assert [m.garment_idx for m in inliers] == list(range(10))
        assert np.allclose(h.matrix, [[1.0, 0.0, 12.0], [0.0, 1.0, -7.0], [0.0, 0.0, 1.0]], atol=1e-3)

    def test_dlt_exact_on_four_points(self):
        src = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        dst = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 3.0], [0.0, 3.0]])
        h = solve_homography(src, dst)
        assert np.allclose(Homography(h).apply(src), dst)


class TestCascade:
    def test_identity_pair(self):
        img = GrayImage(textured_array(512, 384, seed=21, margin=16))
        kps = detect_and_describe(img)
        matches = match_ratio_test(kps, kps)
        kept, report = run_filter_cascade(matches, kps, kps)

        distinct = {(np.floor(kps[m.garment_idx].x + 0.5), np.floor(kps[m.garment_idx].y + 0.5)) for m in matches}
        assert report.input == len(matches)
        assert report.after_angle_scale == len(matches)
        assert report.after_dedup == len(distinct)
        assert report.after_ransac >= 0.95 * report.after_dedup
        # keypoints with several orientations share one pixel, so dedup alone drops about a fifth
        # of the self-matches; nothing else in the cascade loses any
        assert report.after_ransac >= 0.75 * report.input
        assert len(kept) == report.after_ransac
        assert np.allclose(report.homography.matrix, np.eye(3), atol=1e-2)

    def test_empty_matches(self):
        kept, report = run_filter_cascade([], [], [])
        assert kept == []
        assert report.counts() == {"input": 0, "after_angle_scale": 0, "after_dedup": 0, "after_ransac": 0}
        assert report.homography is None

    def test_only_angle_gate_drops(self):
        src = [(20.0 + 20 * c, 20.0 + 20 * r) for r in range(3) for c in range(4)]
        rotated = {2, 5, 11}
        g = [keypoint(x, y) for x, y in src]
        p = [keypoint(x + 7.0, y - 4.0, orientation=90.0 if i in rotated else 0.0) for i, (x, y) in enumerate(src)]
        matches = [MatchPair(i, i, 0.1 * i) for i in range(len(src))]
        kept, report = run_filter_cascade(matches, g, p)
        assert list(report.counts().values()) == [12, 9, 9, 9]
        assert [m.garment_idx for m in kept] == [i for i in range(12) if i not in rotated]
        assert np.allclose(report.homography.matrix, [[1.0, 0.0, 7.0], [0.0, 1.0, -4.0], [0.0, 0.0, 1.0]], atol=1e-6)

    def test_gate_and_dedup_are_idempotent(self):
        rng = np.random.default_rng(8)
        g, p = [], []
        # 20 matches pass the gate but share 9 person pixels; one more fails on angle
        for i in range(20):
            g.append(keypoint(float(i * 5), 0.0, 2.0, 30.0))
            p.append(keypoint(float(i % 3), float(i // 3 % 3), 2.0, 40.0))
        g.append(keypoint(200.0, 0.0, 2.0, 0.0))
        p.append(keypoint(50.0, 50.0, 2.0, 90.0))
        for _ in range(30):
            size = rng.uniform(1.0, 4.0)
            angle = rng.uniform(0.0, 360.0)
            g.append(keypoint(*rng.uniform(0, 60, 2), size, angle))
            p.append(keypoint(*rng.uniform(0, 60, 2), size * rng.uniform(0.3, 3.0), angle + rng.uniform(-90, 90)))
        matches = [MatchPair(i, i, float(d)) for i, d in enumerate(rng.random(len(g)))]

        cfg = FilterConfig()
        gated = filter_angle_scale(matches, g, p, cfg)
        deduped = dedup_matches(gated, g, p)
        assert len(deduped) < len(gated) < len(matches)
        assert filter_angle_scale(gated, g, p, cfg) == gated
        assert dedup_matches(deduped, g, p) == deduped
        assert dedup_matches(filter_angle_scale(deduped, g, p, cfg), g, p) == deduped

    def test_counts_are_monotone(self):
        h_true, matches, g, p = _homography_scene(n_inliers=20, n_outliers=8, seed=2)
        kept, report = run_filter_cascade(matches, g, p)
        counts = list(report.counts().values())
        assert counts == sorted(counts, reverse=True)
        assert report.after_ransac == len(kept) >= report.input // 2

    def test_report_text_roundtrip(self):
        report = FilterReport(10, 8, 6, 5, Homography(np.diag([2.0, 2.0, 1.0])))
        back = FilterReport.from_text(report.to_text())
        assert back.counts() == report.counts()
        assert np.allclose(back.homography.matrix, report.homography.matrix)
        assert "homography=none" in FilterReport().to_text()

    def test_report_unknown_key(self):
        with pytest.raises(ParseError):
            FilterReport.from_text("bogus=1\n")
