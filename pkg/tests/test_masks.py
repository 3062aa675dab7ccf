"""Mask handling tests: binarize, components, contours, simplification."""

import numpy as np
import pytest

from dsm3d.masks import (
    DegeneratePolygonError,
    FootprintPolygon,
    binarize,
    connected_components,
    extract_contours,
    signed_area,
    simplify,
)
from dsm3d.raster import Geotransform


def ring_is_simple(ring):
    """O(n^2) segment intersection scan (shared endpoints allowed)."""
    n = len(ring)
    segs = [(ring[i], ring[(i + 1) % n]) for i in range(n)]

    def intersects(p1, p2, p3, p4):
        def orient(a, b, c):
            return np.sign((b[0] - a[0]) * (c[1] - a[1])
                           - (b[1] - a[1]) * (c[0] - a[0]))
        if (np.array_equal(p1, p3) or np.array_equal(p1, p4)
                or np.array_equal(p2, p3) or np.array_equal(p2, p4)):
            return False
        return (orient(p1, p2, p3) != orient(p1, p2, p4)
                and orient(p3, p4, p1) != orient(p3, p4, p2))

    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if intersects(*segs[i], *segs[j]):
                return False
    return True


class TestBinarize:
    def test_all_background(self):
        assert not binarize(np.full((4, 4), 7), 1).any()

    def test_all_building(self):
        assert binarize(np.ones((4, 4)), 1).all()

    def test_checkerboard(self):
        labels = np.indices((4, 4)).sum(axis=0) % 2
        mask = binarize(labels, 1)
        assert np.array_equal(mask, labels)

    def test_strictly_binary_output(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 5, size=(8, 8))
        mask = binarize(labels, 3)
        assert set(np.unique(mask)) <= {0, 1}


class TestConnectedComponents:
    def test_empty(self):
        labels, n = connected_components(np.zeros((4, 4), dtype=np.uint8))
        assert n == 0 and not labels.any()

    def test_two_blobs(self):
        mask = np.zeros((5, 5), dtype=np.uint8)
        mask[0, 0] = 1
        mask[4, 4] = 1
        _, n = connected_components(mask)
        assert n == 2

    def test_diagonal_connectivity(self):
        mask = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        _, n8 = connected_components(mask, connectivity=8)
        _, n4 = connected_components(mask, connectivity=4)
        assert n8 == 1 and n4 == 2

    def test_raster_scan_label_order(self):
        mask = np.zeros((6, 6), dtype=np.uint8)
        mask[4, 1] = 1   # later in raster order
        mask[0, 5] = 1   # earlier
        mask[2, 3] = 1
        labels, n = connected_components(mask)
        assert n == 3
        assert labels[0, 5] == 1
        assert labels[2, 3] == 2
        assert labels[4, 1] == 3

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            connected_components(np.full((3, 3), 2))

    def test_bad_connectivity(self):
        with pytest.raises(ValueError):
            connected_components(np.zeros((2, 2), dtype=np.uint8), connectivity=6)


class TestExtractContours:
    def test_empty_mask(self):
        assert extract_contours(np.zeros((5, 5), dtype=np.uint8), min_area=0) == []

    def test_single_pixel_unit_square(self):
        mask = np.zeros((5, 5), dtype=np.uint8)
        mask[2, 3] = 1
        geo = Geotransform(0.0, 5.0, 1.0, 1.0)
        polys = extract_contours(mask, geo=geo, min_area=0)
        assert len(polys) == 1
        p = polys[0]
        assert abs(p.area - 1.0) < 1e-12
        assert p.is_ccw
        # the unit cell encloses the pixel center (3.5, 2.5 in world y-up)
        cx, cy = geo.pixel_center(2, 3)
        assert p.ring[:, 0].min() < cx < p.ring[:, 0].max()
        assert p.ring[:, 1].min() < cy < p.ring[:, 1].max()

    def test_solid_block_area(self):
        mask = np.zeros((20, 20), dtype=np.uint8)
        mask[5:15, 3:13] = 1
        polys = extract_contours(mask, min_area=0)
        assert len(polys) == 1
        assert abs(polys[0].area - 100.0) < 1e-12

    def test_collinear_merge_gives_four_corners(self):
        mask = np.zeros((20, 20), dtype=np.uint8)
        mask[5:15, 3:13] = 1
        polys = extract_contours(mask, min_area=0, merge_collinear=True)
        assert len(polys[0].ring) == 4
        assert abs(polys[0].area - 100.0) < 1e-12

    def test_min_area_filters(self):
        mask = np.zeros((10, 10), dtype=np.uint8)
        mask[0, 0] = 1
        mask[5:9, 5:9] = 1
        polys = extract_contours(mask, min_area=4)
        assert len(polys) == 1
        assert abs(polys[0].area - 16.0) < 1e-12

    def test_rings_simple_and_ccw(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            mask = np.zeros((16, 16), dtype=np.uint8)
            for _ in range(2):
                r0, c0 = rng.integers(0, 10, size=2)
                h, w = rng.integers(2, 6, size=2)
                mask[r0:r0 + h, c0:c0 + w] = 1
            for p in extract_contours(mask, min_area=0):
                assert p.is_ccw
                assert ring_is_simple(p.ring)

    def test_area_matches_pixel_count_for_hole_free_blobs(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            mask = np.zeros((16, 16), dtype=np.uint8)
            for _ in range(2):
                r0, c0 = rng.integers(0, 10, size=2)
                h, w = rng.integers(2, 6, size=2)
                mask[r0:r0 + h, c0:c0 + w] = 1
            labels, n = connected_components(mask)
            polys = extract_contours(mask, min_area=0)
            by_id = {p.component_id: p for p in polys}
            for comp in range(1, n + 1):
                count = int((labels == comp).sum())
                p = by_id[comp]
                assert abs(p.area - count) <= p.perimeter() / 2

    def test_interior_hole_dropped(self):
        mask = np.ones((8, 8), dtype=np.uint8)
        mask[3:5, 3:5] = 0
        polys = extract_contours(mask, min_area=0)
        assert len(polys) == 1
        # exterior ring keeps the full outer area
        assert abs(polys[0].area - 64.0) < 1e-12

    def test_diagonal_pinch_stays_simple(self):
        mask = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        polys = extract_contours(mask, min_area=0)
        assert len(polys) == 1  # one component under 8-connectivity
        assert abs(polys[0].area - 1.0) < 1e-12
        assert ring_is_simple(polys[0].ring)

    def test_concave_shapes(self):
        # L, U, and T blobs: one simple CCW ring each, area = pixel count
        shapes = []
        l_shape = np.zeros((8, 8), dtype=np.uint8)
        l_shape[1:7, 1:3] = 1
        l_shape[5:7, 3:7] = 1
        shapes.append(l_shape)
        u_shape = np.zeros((8, 8), dtype=np.uint8)
        u_shape[1:7, 1:3] = 1
        u_shape[1:7, 5:7] = 1
        u_shape[5:7, 3:5] = 1
        shapes.append(u_shape)
        t_shape = np.zeros((8, 8), dtype=np.uint8)
        t_shape[1:3, 1:7] = 1
        t_shape[3:7, 3:5] = 1
        shapes.append(t_shape)
        for mask in shapes:
            (poly,) = extract_contours(mask, min_area=0)
            assert poly.is_ccw
            assert ring_is_simple(poly.ring)
            assert abs(poly.area - mask.sum()) < 1e-12

    def test_blob_touching_border(self):
        mask = np.zeros((6, 6), dtype=np.uint8)
        mask[0:3, 0:3] = 1    # corner
        mask[4:6, 2:5] = 1    # bottom edge
        polys = extract_contours(mask, min_area=0)
        assert len(polys) == 2
        assert sorted(round(p.area) for p in polys) == [6, 9]
        for p in polys:
            assert ring_is_simple(p.ring)

    def test_multi_pinch_chain(self):
        # three cells touching corner-to-corner: all rings stay simple
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[0, 0] = mask[1, 1] = mask[2, 2] = 1
        polys = extract_contours(mask, min_area=0)
        assert len(polys) == 1
        assert ring_is_simple(polys[0].ring)
        assert abs(polys[0].area - 1.0) < 1e-12

    def test_rasterizing_block_contour_recovers_mask(self):
        from matplotlib.path import Path

        rng = np.random.default_rng(3)
        for _ in range(10):
            mask = np.zeros((12, 12), dtype=np.uint8)
            r0, c0 = rng.integers(0, 6, size=2)
            h, w = rng.integers(2, 6, size=2)
            mask[r0:r0 + h, c0:c0 + w] = 1
            geo = Geotransform(0.0, 12.0, 1.0, 1.0)
            (poly,) = extract_contours(mask, geo=geo, min_area=0)
            rows, cols = np.meshgrid(np.arange(12), np.arange(12), indexing="ij")
            centers = np.stack([cols.ravel() + 0.5, 12.0 - (rows.ravel() + 0.5)],
                               axis=1)
            inside = Path(poly.ring).contains_points(centers).reshape(12, 12)
            assert np.array_equal(inside.astype(np.uint8), mask)


class TestSimplify:
    def test_tolerance_zero_identity(self):
        ring = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        p = FootprintPolygon(ring)
        out = simplify(p, 0.0)
        assert np.array_equal(out.ring, ring)

    def test_collinear_midpoints_removed(self):
        ring = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [2.0, 2.0],
                         [0.0, 2.0], [0.0, 1.0]])
        out = simplify(FootprintPolygon(ring), 1e-9)
        assert len(out.ring) == 4
        assert abs(out.area - 4.0) < 1e-12

    def test_staircase_square_reduces_to_corners(self):
        # rasterized diamond: every edge of its contour is a unit staircase
        # deviating at most ~0.71 from the diagonal chord, so tolerance 1.5
        # collapses the stairs and leaves the 4 true corners
        n = 15
        rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        mask = (np.abs(rows - n // 2) + np.abs(cols - n // 2) <= 5).astype(np.uint8)
        (poly,) = extract_contours(mask, min_area=0)
        out = simplify(poly, 1.5)
        assert len(out.ring) == 4
        assert ring_is_simple(out.ring)
        assert out.is_ccw

    def test_never_increases_vertex_count(self):
        rng = np.random.default_rng(4)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=24))
        ring = np.stack([np.cos(angles), np.sin(angles)], axis=1) * 10
        p = FootprintPolygon(ring)
        for tol in (0.0, 0.1, 0.5, 2.0):
            out = simplify(p, tol)
            assert len(out.ring) <= len(p.ring)

    def test_degenerate_raises(self):
        ring = np.array([[0.0, 0.0], [1.0, 0.01], [2.0, 0.0]])
        with pytest.raises(DegeneratePolygonError):
            simplify(FootprintPolygon(ring), 10.0)

    def test_negative_tolerance_rejected(self):
        ring = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
        with pytest.raises(ValueError):
            simplify(FootprintPolygon(ring), -1.0)


class TestFootprintPolygon:
    def test_signed_area_orientation(self):
        ccw = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]])
        assert signed_area(ccw) == 4.0
        assert signed_area(ccw[::-1]) == -4.0

    def test_needs_three_vertices(self):
        with pytest.raises(ValueError):
            FootprintPolygon(np.zeros((2, 2)))
