"""Building-mask handling: binarization, labeling, footprint polygons.

Contours are traced on the binary mask treating each pixel as a full unit
cell, so a solid k x k block yields a ring of polygon area exactly k^2 and a
single pixel yields the unit square around its center. Rings are returned in
world coordinates with counter-clockwise exterior orientation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .raster import Geotransform


class DegeneratePolygonError(ValueError):
    """Simplification collapsed a ring below 3 distinct vertices."""


def binarize(labels, class_id) -> np.ndarray:
    """1 where the label raster equals the building class id, else 0."""
    arr = np.asarray(labels)
    return (arr == class_id).astype(np.uint8)


_STRUCTURE_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)
_STRUCTURE_8 = np.ones((3, 3), dtype=int)


def connected_components(mask, connectivity: int = 8):
    """Label foreground components; labels follow raster-scan order.

    Returns (labels, count) with background 0. The component whose first
    pixel comes earliest in row-major order gets label 1, and so on, so the
    labeling is deterministic regardless of the underlying fill order.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be strictly binary")
    structure = _STRUCTURE_8 if connectivity == 8 else _STRUCTURE_4
    labels, count = ndimage.label(m, structure=structure)
    if count == 0:
        return labels.astype(np.int32), 0
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    first = np.full(count + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[nz], nz)
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, count + 1, dtype=np.int32)
    return remap[labels], count


@dataclass
class FootprintPolygon:
    """Closed simple ring of world-coordinate vertices, CCW, first != last.

    Closure is implied: the edge from the last vertex back to the first is
    part of the ring.
    """

    ring: np.ndarray
    component_id: int = 0

    def __post_init__(self):
        self.ring = np.asarray(self.ring, dtype=np.float64)
        if self.ring.ndim != 2 or self.ring.shape[1] != 2:
            raise ValueError("ring must be an (n, 2) array")
        if len(self.ring) < 3:
            raise ValueError("ring needs at least 3 vertices")

    @property
    def area(self) -> float:
        return abs(signed_area(self.ring))

    @property
    def is_ccw(self) -> bool:
        return signed_area(self.ring) > 0

    def perimeter(self) -> float:
        d = np.diff(np.vstack([self.ring, self.ring[:1]]), axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())


def signed_area(ring: np.ndarray) -> float:
    """Shoelace signed area; positive for counter-clockwise rings."""
    x = ring[:, 0]
    y = ring[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _boundary_edges(component: np.ndarray):
    """Directed unit edges of the cell-complex boundary of a binary blob.

    Each edge runs between pixel-corner coordinates (x, y) in image space
    (y grows downward); the blob interior lies consistently to one side, so
    the edges chain into closed cycles.
    """
    padded = np.zeros((component.shape[0] + 2, component.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = component
    inner = padded[1:-1, 1:-1]
    edges = []
    rows, cols = np.nonzero(inner)
    north = padded[:-2, 1:-1][rows, cols]
    south = padded[2:, 1:-1][rows, cols]
    west = padded[1:-1, :-2][rows, cols]
    east = padded[1:-1, 2:][rows, cols]
    for r, c, n, s, w, e in zip(rows, cols, north, south, west, east):
        if not n:
            edges.append(((c, r), (c + 1, r)))
        if not e:
            edges.append(((c + 1, r), (c + 1, r + 1)))
        if not s:
            edges.append(((c + 1, r + 1), (c, r + 1)))
        if not w:
            edges.append(((c, r + 1), (c, r)))
    return edges


def _chain_rings(edges):
    """Walk directed edges into closed rings of corner coordinates.

    At pinch corners (diagonally self-touching blobs) the sharpest available
    turn is taken, which splits the figure into simple rings instead of one
    self-crossing loop.
    """
    outgoing = {}
    for a, b in edges:
        outgoing.setdefault(a, []).append(b)
    for lst in outgoing.values():
        lst.sort()
    rings = []
    used = set()
    for start, _ in sorted(edges):
        candidates = [b for b in outgoing.get(start, []) if (start, b) not in used]
        if not candidates:
            continue
        ring = [start]
        prev, cur = start, candidates[0]
        used.add((start, cur))
        while cur != start:
            ring.append(cur)
            options = [b for b in outgoing.get(cur, []) if (cur, b) not in used]
            if not options:
                raise RuntimeError("open boundary chain; mask edges inconsistent")
            if len(options) == 1:
                nxt = options[0]
            else:
                din = (cur[0] - prev[0], cur[1] - prev[1])
                nxt = max(options, key=lambda b: din[0] * (b[1] - cur[1])
                          - din[1] * (b[0] - cur[0]))
            used.add((cur, nxt))
            prev, cur = cur, nxt
        rings.append(ring)
    return rings


def _drop_collinear(ring: np.ndarray) -> np.ndarray:
    """Remove vertices lying on the straight run between their neighbors."""
    prev_pts = np.roll(ring, 1, axis=0)
    next_pts = np.roll(ring, -1, axis=0)
    cross = ((ring[:, 0] - prev_pts[:, 0]) * (next_pts[:, 1] - ring[:, 1])
             - (ring[:, 1] - prev_pts[:, 1]) * (next_pts[:, 0] - ring[:, 0]))
    keep = cross != 0
    if keep.sum() < 3:
        return ring
    return ring[keep]


def extract_contours(mask, geo: Geotransform | None = None,
                     min_area: int = 20, connectivity: int = 8,
                     merge_collinear: bool = False) -> list[FootprintPolygon]:
    """Exterior footprint ring of each component with area >= min_area px.

    Vertices are pixel-corner positions mapped into world coordinates; the
    exterior ring (the one with the largest enclosed area) of each component
    is kept and interior hole rings are dropped. Orientation is CCW in world
    coordinates.
    """
    labels, count = connected_components(mask, connectivity)
    geo = geo or Geotransform(0.0, float(mask.shape[0]), 1.0, 1.0)
    polys = []
    for comp_id in range(1, count + 1):
        component = labels == comp_id
        if int(component.sum()) < min_area:
            continue
        rings = _chain_rings(_boundary_edges(component))
        world_rings = []
        for ring in rings:
            pts = np.asarray(ring, dtype=np.float64)
            world = np.empty_like(pts)
            world[:, 0] = geo.origin_x + pts[:, 0] * geo.pixel_size_x
            world[:, 1] = geo.origin_y - pts[:, 1] * geo.pixel_size_y
            world_rings.append(world)
        exterior = max(world_rings, key=lambda r: abs(signed_area(r)))
        if signed_area(exterior) < 0:
            exterior = exterior[::-1].copy()
        if merge_collinear:
            exterior = _drop_collinear(exterior)
        polys.append(FootprintPolygon(ring=exterior, component_id=comp_id))
    return polys


def _perpendicular_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Distance of each point to segment a-b (endpoint distance when a == b)."""
    ab = b - a
    denom = np.hypot(*ab)
    if denom == 0.0:
        return np.hypot(points[:, 0] - a[0], points[:, 1] - a[1])
    cross = np.abs((points[:, 0] - a[0]) * ab[1] - (points[:, 1] - a[1]) * ab[0])
    return cross / denom


def _douglas_peucker(points: np.ndarray, tolerance: float) -> np.ndarray:
    """Indices kept by Douglas-Peucker on an open polyline."""
    n = len(points)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        seg = points[i + 1:j]
        dists = _perpendicular_distances(seg, points[i], points[j])
        k = int(np.argmax(dists))
        if dists[k] > tolerance:
            mid = i + 1 + k
            keep[mid] = True
            stack.append((i, mid))
            stack.append((mid, j))
    return np.flatnonzero(keep)


def simplify(p: FootprintPolygon, tolerance: float) -> FootprintPolygon:
    """Douglas-Peucker ring simplification within a Hausdorff tolerance.

    Tolerance 0 returns the ring unchanged. The ring is split at two far
    apart anchor vertices so the closed shape survives; a result with fewer
    than 3 distinct vertices raises :class:`DegeneratePolygonError`.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    if tolerance == 0:
        return FootprintPolygon(ring=p.ring.copy(), component_id=p.component_id)
    ring = p.ring
    d2 = ((ring - ring[0]) ** 2).sum(axis=1)
    pivot = int(np.argmax(d2))
    if pivot == 0:
        raise DegeneratePolygonError("all ring vertices coincide")
    first = ring[:pivot + 1]
    second = np.vstack([ring[pivot:], ring[:1]])
    keep_a = _douglas_peucker(first, tolerance)
    keep_b = _douglas_peucker(second, tolerance) + pivot
    idx = np.concatenate([keep_a, keep_b[1:-1]])
    out = ring[np.unique(idx)]
    distinct = np.unique(out, axis=0)
    if len(distinct) < 3:
        raise DegeneratePolygonError(
            f"simplification left {len(distinct)} distinct vertices")
    return FootprintPolygon(ring=out, component_id=p.component_id)
