"""Tests for grid mapping and reference attention construction."""

from __future__ import annotations

import math
from collections import Counter, defaultdict

import numpy as np
import pytest

from siftsup.errors import OutOfBounds, ParseError
from siftsup.matching import MatchPair
from siftsup.refattn import GridSpec, ReferenceAttention, build_multiscale, build_reference, image_to_grid
from tests.conftest import keypoint

PERSON = GridSpec(512, 384, 64, 48)


class TestImageToGrid:
    def test_floor_mapping(self):
        # x=100 -> col 12, y=200 -> row 25
        assert image_to_grid(100.0, 200.0, PERSON) == 25 * 48 + 12

    def test_origin(self):
        assert image_to_grid(0.0, 0.0, PERSON) == 0

    def test_far_edge_clamps_into_last_cell(self):
        assert image_to_grid(384.0, 512.0, PERSON) == PERSON.size - 1

    @pytest.mark.parametrize(("x", "y"), [(-0.1, 3.0), (3.0, -1.0), (384.5, 3.0), (3.0, 513.0), (math.nan, 3.0)])
    def test_out_of_bounds(self, x, y):
        with pytest.raises(OutOfBounds):
            image_to_grid(x, y, PERSON)

    def test_grid_must_fit_image(self):
        with pytest.raises(ValueError):
            GridSpec(8, 8, 16, 4)


def _random_scene(seed: int, n_kp: int = 40, n_matches: int = 60):
    rng = np.random.default_rng(seed)
    g = [keypoint(float(x), float(y)) for x, y in zip(rng.uniform(0, 384, n_kp), rng.uniform(0, 512, n_kp))]
    p = [keypoint(float(x), float(y)) for x, y in zip(rng.uniform(0, 384, n_kp), rng.uniform(0, 512, n_kp))]
    matches = [MatchPair(int(a), int(b), 0.0) for a, b in rng.integers(0, n_kp, (n_matches, 2))]
    return matches, g, p


def _oracle(matches, g, p, grid_h, grid_w):
    """Brute-force histograms with explicit per-cell bounds."""
    hist = defaultdict(Counter)
    for m in matches:
        kp_p, kp_g = p[m.person_idx], g[m.garment_idx]
        i = min(int(kp_p.y // (512 / grid_h)), grid_h - 1) * grid_w + min(int(kp_p.x // (384 / grid_w)), grid_w - 1)
        j = min(int(kp_g.y // (512 / grid_h)), grid_h - 1) * grid_w + min(int(kp_g.x // (384 / grid_w)), grid_w - 1)
        hist[i][j] += 1
    return {i: {j: c / sum(h.values()) for j, c in h.items()} for i, h in hist.items()}


class TestBuildReference:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force_oracle(self, seed):
        matches, g, p = _random_scene(seed)
        ref = build_reference(matches, g, p, GridSpec(512, 384, 16, 12), GridSpec(512, 384, 16, 12))
        expected = _oracle(matches, g, p, 16, 12)
        assert ref.supervised_indices == sorted(expected)
        for i in ref.supervised_indices:
            dist = dict(ref.distribution(i))
            assert sum(dist.values()) == pytest.approx(1.0, abs=1e-9)
            assert dist.keys() == expected[i].keys()
            for j, prob in dist.items():
                assert prob == pytest.approx(expected[i][j], abs=1e-12)

    def test_two_matches_same_cells(self):
        g = [keypoint(1.0, 1.0), keypoint(2.0, 2.0)]
        p = [keypoint(100.0, 200.0), keypoint(101.0, 201.0)]
        ref = build_reference([MatchPair(0, 0, 0.0), MatchPair(1, 1, 0.0)], g, p, PERSON, PERSON)
        i = 25 * 48 + 12
        assert ref.supervised_indices == [i]
        assert ref.distribution(i) == [(0, 1.0)]
        assert ref.count(i) == 2

    def test_split_distribution(self):
        g = [keypoint(1.0, 1.0), keypoint(300.0, 1.0)]
        p = [keypoint(100.0, 200.0), keypoint(100.0, 200.0)]
        ref = build_reference([MatchPair(0, 0, 0.0), MatchPair(1, 1, 0.0)], g, p, PERSON, PERSON)
        row = ref.dense_row(25 * 48 + 12)
        assert row[0] == 0.5 and row[37] == 0.5
        assert row.sum() == 1.0

    def test_empty_matches(self):
        ref = build_reference([], [], [], PERSON, PERSON)
        assert len(ref) == 0
        idx, probs = ref.dense()
        assert idx.shape == (0,) and probs.shape == (0, PERSON.size)

    def test_mask_drops_person_keypoints_outside(self):
        g = [keypoint(1.0, 1.0), keypoint(2.0, 2.0)]
        p = [keypoint(10.0, 10.0), keypoint(300.0, 400.0)]
        mask = np.zeros((512, 384), dtype=bool)
        mask[:100, :100] = True
        ref = build_reference([MatchPair(0, 0, 0.0), MatchPair(1, 1, 0.0)], g, p, PERSON, PERSON, mask=mask)
        assert ref.supervised_indices == [image_to_grid(10.0, 10.0, PERSON)]

    @pytest.mark.parametrize("seed", range(5))
    def test_match_order_does_not_matter(self, seed):
        matches, g, p = _random_scene(seed)
        grid = GridSpec(512, 384, 16, 12)
        shuffled = list(matches)
        np.random.default_rng(100 + seed).shuffle(shuffled)
        a = build_reference(matches, g, p, grid, grid)
        b = build_reference(shuffled, g, p, grid, grid)
        assert a.histograms == b.histograms
        assert a.to_text() == b.to_text()

    def test_keypoint_outside_image(self):
        g = [keypoint(1.0, 1.0)]
        p = [keypoint(900.0, 1.0)]
        with pytest.raises(OutOfBounds):
            build_reference([MatchPair(0, 0, 0.0)], g, p, PERSON, PERSON)


class TestMultiscale:
    def test_one_reference_per_resolution(self):
        matches, g, p = _random_scene(3)
        refs = build_multiscale(matches, g, p, (512, 384), [(64, 48), (32, 24), (16, 12), (8, 6)])
        assert [r.query_grid.resolution for r in refs] == [(64, 48), (32, 24), (16, 12), (8, 6)]
        # coarser grids merge cells, never add supervised queries
        sizes = [len(r) for r in refs]
        assert sizes == sorted(sizes, reverse=True)

    @pytest.mark.parametrize(("x", "y"), [(100.0, 200.0), (0.0, 0.0), (383.5, 511.5), (17.25, 99.75)])
    def test_cells_halve_between_resolutions(self, x, y):
        g = [keypoint(50.0, 300.0)]
        p = [keypoint(x, y)]
        fine, coarse = build_multiscale([MatchPair(0, 0, 0.0)], g, p, (512, 384), [(64, 48), (32, 24)])
        (i_fine,), (i_coarse,) = fine.supervised_indices, coarse.supervised_indices
        assert divmod(i_coarse, 24) == tuple(v // 2 for v in divmod(i_fine, 48))
        ((j_fine, _),), ((j_coarse, _),) = fine.distribution(i_fine), coarse.distribution(i_coarse)
        assert divmod(j_coarse, 24) == tuple(v // 2 for v in divmod(j_fine, 48))

    def test_halving_worked_example(self):
        g = [keypoint(50.0, 300.0)]
        p = [keypoint(100.0, 200.0)]
        fine, coarse = build_multiscale([MatchPair(0, 0, 0.0)], g, p, (512, 384), [(64, 48), (32, 24)])
        assert fine.entries == {25 * 48 + 12: [(37 * 48 + 6, 1.0)]}
        assert coarse.entries == {12 * 24 + 6: [(18 * 24 + 3, 1.0)]}

    def test_empty_resolution_list(self):
        matches, g, p = _random_scene(0)
        assert build_multiscale(matches, g, p, (512, 384), []) == []

    def test_garment_dims_differ(self):
        g = [keypoint(150.0, 150.0)]
        p = [keypoint(150.0, 150.0)]
        (ref,) = build_multiscale([MatchPair(0, 0, 0.0)], g, p, (512, 384), [(2, 2)], garment_dims=(300, 300))
        assert ref.key_grid.image_h == 300
        # garment point sits in the last cell of a 300x300 image, person point in the first
        assert ref.entries == {0: [(3, 1.0)]}


class TestReferenceText:
    def test_text_roundtrip(self, tmp_path):
        matches, g, p = _random_scene(5)
        ref = build_reference(matches, g, p, GridSpec(512, 384, 8, 6), GridSpec(512, 384, 8, 6))
        path = tmp_path / "ref.txt"
        ref.write(path)
        back = ReferenceAttention.read(path)
        assert back.histograms == ref.histograms
        assert back.query_grid == ref.query_grid

    def test_line_format(self):
        g = [keypoint(1.0, 1.0), keypoint(300.0, 1.0), keypoint(300.0, 1.0)]
        p = [keypoint(100.0, 200.0)] * 3
        ref = build_reference([MatchPair(k, k, 0.0) for k in range(3)], g, p, PERSON, PERSON)
        lines = ref.to_text().splitlines()
        assert lines[0] == "query_grid 512 384 64 48 key_grid 512 384 64 48"
        assert lines[1] == "1212 3 0 0.333333333 37 0.666666667"

    @pytest.mark.parametrize(
        "text",
        [
            "",
            "query_grid 1 2 3\n",
            "query_grid 8 8 2 2 key_grid 8 8 2 2\n9 1 0 1\n",
            "query_grid 8 8 2 2 key_grid 8 8 2 2\n0 2 0 0.2\n",
            "query_grid 8 8 2 2 key_grid 8 8 2 2\n0 1 0\n",
        ],
    )
    def test_bad_files(self, text):
        with pytest.raises(ParseError):
            ReferenceAttention.from_text(text)
