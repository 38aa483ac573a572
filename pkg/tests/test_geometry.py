import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import chamfer_double_loop, dense_arclength
from vecmap.geometry import (BOUNDARY, DIVIDER, PED_CROSSING, DegenerateGeometry, MapInstance, PerceptionRange,
                             chamfer_distance, denormalize_points, equivalent_permutations, normalize_points,
                             point_to_polyline_distance, rasterize_instance_mask, resample_polyline)

RANGE = PerceptionRange(-15.0, 15.0, -30.0, 30.0)
points_2d = st.tuples(st.floats(-50, 50), st.floats(-50, 50))


def test_normalize_center_and_corner():
    assert np.allclose(normalize_points([[0.0, 0.0]], RANGE), [[0.5, 0.5]])
    assert np.allclose(normalize_points([[-15.0, -30.0]], RANGE), [[0.0, 0.0]])


def test_normalize_round_trip():
    pts = np.random.default_rng(0).uniform(-40, 40, size=(1000, 2))
    assert np.abs(denormalize_points(normalize_points(pts, RANGE), RANGE) - pts).max() < 1e-6


def test_out_of_range_points_accepted():
    assert normalize_points([[30.0, 0.0]], RANGE)[0, 0] == pytest.approx(1.5)


def test_invalid_range():
    with pytest.raises(ValueError):
        PerceptionRange(1.0, 1.0, 0.0, 2.0)


class TestResample:
    def test_segment(self):
        out = resample_polyline([[0, 0], [0, 10]], 3)
        assert np.allclose(out, [[0, 0], [0, 5], [0, 10]])

    def test_closed_square_gives_corners(self):
        sq = [[0, 0], [1, 0], [1, 1], [0, 1]]
        assert np.allclose(resample_polyline(sq, 4, closed=True), sq)

    def test_zigzag_equal_arclength(self):
        rng = np.random.default_rng(7)
        raw = np.cumsum(rng.uniform(-3, 3, size=(9, 2)) + [0, 4], axis=0)
        n = 20
        out = resample_polyline(raw, n)
        cum = dense_arclength(raw)
        # arclength position of each output point, located on the raw segment it lies on
        pos = []
        for p in out:
            d = point_to_polyline_distance(p[None], raw, False)[0]
            assert d < 1e-9
            seg = [i for i in range(len(raw) - 1)
                   if point_to_polyline_distance(p[None], raw[i:i + 2], False)[0] < 1e-9][0]
            pos.append(cum[seg] + np.linalg.norm(p - raw[seg]))
        assert np.allclose(np.diff(pos), cum[-1] / (n - 1), atol=1e-6)
        assert np.allclose(out[0], raw[0]) and np.allclose(out[-1], raw[-1])

    def test_zero_length(self):
        with pytest.raises(DegenerateGeometry):
            resample_polyline([[1, 1], [1, 1]], 5)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(points_2d, min_size=2, max_size=6, unique=True), st.integers(0, 4),
           st.floats(0.05, 0.95), st.booleans())
    def test_redundant_collinear_vertex(self, pts, seg, t, closed):
        raw = np.array(pts, dtype=np.float64)
        if np.linalg.norm(np.diff(raw, axis=0), axis=1).sum() < 1e-3:
            return
        seg = seg % (len(raw) - 1)
        extra = raw[seg] + t * (raw[seg + 1] - raw[seg])
        padded = np.insert(raw, seg + 1, extra, axis=0)
        a = resample_polyline(raw, 11, closed)
        b = resample_polyline(padded, 11, closed)
        assert np.abs(a - b).max() < 1e-6


class TestPermutations:
    def test_open_has_identity_and_reverse(self):
        inst = MapInstance(DIVIDER, np.arange(20, dtype=float).reshape(10, 2), closed=False)
        v = equivalent_permutations(inst)
        assert len(v) == 2
        assert np.array_equal(v[0], inst.points)
        assert np.array_equal(v[1], inst.points[::-1])

    def test_closed_variants(self):
        inst = MapInstance(PED_CROSSING, [[0, 0], [2, 0], [2, 1], [0, 1]], closed=True)
        v = equivalent_permutations(inst)
        assert len(v) == 8
        ref = sorted(map(tuple, inst.points))
        assert all(sorted(map(tuple, x)) == ref for x in v)
        assert len({x.tobytes() for x in v}) == 8

    def test_variants_have_zero_chamfer(self):
        inst = MapInstance(PED_CROSSING, resample_polyline([[0, 0], [4, 0], [4, 3], [0, 3]], 10, True), True)
        assert all(chamfer_distance(v, inst.points) == 0 for v in equivalent_permutations(inst))

    @settings(max_examples=20, deadline=None)
    @given(st.lists(points_2d, min_size=3, max_size=8), st.booleans())
    def test_identity_always_present(self, pts, closed):
        inst = MapInstance(PED_CROSSING if closed else BOUNDARY, pts, closed)
        assert np.array_equal(equivalent_permutations(inst)[0], inst.points)


class TestChamfer:
    def test_identical(self):
        a = np.random.default_rng(1).normal(size=(10, 2))
        assert chamfer_distance(a, a) == 0.0

    def test_single_pair(self):
        assert chamfer_distance([[0, 0]], [[3, 4]]) == pytest.approx(5.0)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            a, b = rng.normal(size=(20, 2)) * 5, rng.normal(size=(20, 2)) * 5
            assert chamfer_distance(a, b) == pytest.approx(chamfer_double_loop(a, b), abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            chamfer_distance(np.zeros((0, 2)), [[1, 1]])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(points_2d, min_size=1, max_size=8), st.lists(points_2d, min_size=1, max_size=8),
           st.randoms())
    def test_symmetric_and_order_free(self, a, b, rnd):
        d = chamfer_distance(a, b)
        assert d == pytest.approx(chamfer_distance(b, a), abs=1e-9)
        a2, b2 = list(a), list(b)
        rnd.shuffle(a2)
        rnd.shuffle(b2)
        assert d == pytest.approx(chamfer_distance(a2, b2), abs=1e-9)
        assert d >= 0


class TestMask:
    def test_vertical_centerline_one_cell_wide(self):
        rng = PerceptionRange(0, 10, 0, 10)
        inst = MapInstance(DIVIDER, [[4.5, 0.0], [4.5, 10.0]], False)
        mask = rasterize_instance_mask(inst, 10, 10, rng, stroke_width=1.0)
        expected = np.zeros((10, 10), dtype=np.uint8)
        expected[:, 4] = 1
        assert np.array_equal(mask, expected)

    def test_outside_range_is_empty(self):
        inst = MapInstance(BOUNDARY, [[40.0, -60.0], [45.0, 60.0]], False)
        assert rasterize_instance_mask(inst, 20, 10, RANGE).sum() == 0

    def test_closed_uses_boundary(self):
        rng = PerceptionRange(0, 20, 0, 20)
        box = MapInstance(PED_CROSSING, [[5, 5], [15, 5], [15, 15], [5, 15]], True)
        mask = rasterize_instance_mask(box, 20, 20, rng, stroke_width=1.0)
        assert mask[10, 10] == 0  # interior stays empty
        assert mask[10, 4] == 1 and mask[10, 14] == 1 and mask[4, 10] == 1 and mask[14, 10] == 1

    def test_cell_count_matches_supersampling(self):
        rng = PerceptionRange(-15, 15, -30, 30)
        ys = np.linspace(-28, 28, 30)
        inst = MapInstance(BOUNDARY, np.stack([5 * np.sin(ys / 9), ys], 1), False)
        h, w, width = 40, 20, 2.0
        coarse = rasterize_instance_mask(inst, h, w, rng, width).sum()
        fine = rasterize_instance_mask(inst, 4 * h, 4 * w, rng, width).sum() / 16.0
        assert abs(coarse - fine) / fine < 0.10

    def test_bad_stroke(self):
        with pytest.raises(ValueError):
            rasterize_instance_mask(MapInstance(DIVIDER, [[0, 0], [1, 1]], False), 4, 4, RANGE, 0.0)


def test_instance_validation():
    with pytest.raises(ValueError):
        MapInstance(5, [[0, 0], [1, 1]], False)
    with pytest.raises(ValueError):
        MapInstance(DIVIDER, [[0, np.nan], [1, 1]], False)
