"""Elevation-to-3D reconstruction: masking, point clouds, meshes, LOD1 prisms.

The elevation raster is a 2.5-D heightfield by construction, so the surface
mesh is triangulated directly from the grid (exact where a scattered-point
surface fit would only approximate): pixel centers become roof vertices, and
vertical wall quads drop from the roof boundary to a base height. LOD1
prisms take one representative height per building component.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .masks import FootprintPolygon
from .raster import Geotransform, Raster


@dataclass
class PointCloud:
    """3-D points in world coordinates with optional per-point RGB bytes."""

    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("color count must match point count")

    def __len__(self):
        return len(self.points)


@dataclass
class Mesh:
    """Indexed triangle surface with consistent outward winding."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if len(self.triangles) and self.triangles.min() < 0:
            raise ValueError("negative triangle index")

    def __len__(self):
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())


@dataclass
class Building:
    footprint: FootprintPolygon
    base: float
    top: float
    building_id: int

    def __post_init__(self):
        if self.top <= self.base:
            raise ValueError("building top must exceed base")

    @property
    def height(self) -> float:
        return self.top - self.base

    def volume(self) -> float:
        return self.footprint.area * self.height


@dataclass
class CityModel:
    """A set of LOD1 prisms plus the count of degenerate buildings dropped."""

    buildings: list = field(default_factory=list)
    n_dropped: int = 0

    def __len__(self):
        return len(self.buildings)


def mask_elevation(e: Raster, mask) -> Raster:
    """Hadamard product of elevation and building mask; nodata propagates."""
    m = np.asarray(mask)
    if m.shape != e.data.shape:
        raise ValueError(f"shape mismatch: {e.data.shape} vs {m.shape}")
    out = e.data * m
    if e.nodata is not None:
        out = np.where(e.valid_mask(), out, e.nodata)
    return Raster(data=out, geo=e.geo, nodata=e.nodata)


def to_point_cloud(e: Raster, geo: Geotransform | None = None,
                   image: Raster | None = None,
                   skip_zero: bool = False) -> PointCloud:
    """Map elevation pixels to 3-D points at pixel centers.

    x and y come from the geotransform (pixel-center convention), z is the
    elevation. Nodata pixels are always dropped; skip_zero additionally
    drops exact zeros (pixels masked out of the building set). Colors are
    sampled from ``image`` when given.
    """
    geo = geo or e.geo
    if geo is None:
        raise ValueError("no geotransform available for the point mapping")
    if e.data.ndim != 2:
        raise ValueError("point mapping expects a single-band raster")
    keep = e.valid_mask()
    if skip_zero:
        keep = keep & (e.data != 0.0)
    rows, cols = np.nonzero(keep)
    x = geo.origin_x + (cols + 0.5) * geo.pixel_size_x
    y = geo.origin_y - (rows + 0.5) * geo.pixel_size_y
    z = e.data[rows, cols]
    points = np.column_stack([x, y, z])
    colors = None
    if image is not None:
        img = image.data
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[:2] != e.data.shape:
            raise ValueError("color image must be (H, W, 3) matching the raster")
        colors = np.clip(img[rows, cols], 0, 255).astype(np.uint8)
    return PointCloud(points=points, colors=colors)


def heightfield_mesh(e: Raster, mask, geo: Geotransform | None = None,
                     base: float = 0.0) -> Mesh:
    """Triangulate the masked heightfield with vertical boundary walls.

    Roof: two triangles per 2x2 pixel quad whose four pixels all lie in the
    mask, with vertices at pixel centers. Walls: one vertical quad per roof
    boundary edge, dropping to the base height. The ground plane is omitted.
    Winding is outward: roof normals point up, wall normals point away from
    the component.
    """
    m = np.asarray(mask).astype(bool)
    if m.shape != e.data.shape:
        raise ValueError(f"shape mismatch: {e.data.shape} vs {m.shape}")
    geo = geo or e.geo or Geotransform(0.0, float(m.shape[0]), 1.0, 1.0)
    h, w = m.shape
    if h < 2 or w < 2:
        return Mesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))

    quad = m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1] & m[1:, 1:]
    vertices: list = []
    vert_index: dict = {}
    triangles: list = []

    def vertex(r, c, z=None):
        key = (r, c, z is not None)
        idx = vert_index.get(key)
        if idx is None:
            x, y = geo.pixel_center(r, c)
            zz = float(e.data[r, c]) if z is None else z
            idx = len(vertices)
            vertices.append((x, y, zz))
            vert_index[key] = idx
        return idx

    def add_triangle(i, j, k):
        a, b, c = (np.asarray(vertices[t]) for t in (i, j, k))
        if np.linalg.norm(np.cross(b - a, c - a)) > 0.0:
            triangles.append((i, j, k))

    qr, qc = np.nonzero(quad)
    for r, c in zip(qr, qc):
        v00 = vertex(r, c)
        v01 = vertex(r, c + 1)
        v10 = vertex(r + 1, c)
        v11 = vertex(r + 1, c + 1)
        add_triangle(v00, v10, v11)
        add_triangle(v00, v11, v01)

    # boundary edges of the roof-cell region -> walls down to base level;
    # (va, vb) ordered so the emitted quad faces away from the region
    def wall(ra, ca, rb, cb):
        top_a = vertex(ra, ca)
        top_b = vertex(rb, cb)
        bot_a = vertex(ra, ca, base)
        bot_b = vertex(rb, cb, base)
        add_triangle(top_a, top_b, bot_b)
        add_triangle(top_a, bot_b, bot_a)

    padded = np.zeros((quad.shape[0] + 2, quad.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = quad
    for r, c in zip(qr, qc):
        if not padded[r, c + 1]:        # no roof cell to the north
            wall(r, c, r, c + 1)
        if not padded[r + 2, c + 1]:    # south
            wall(r + 1, c + 1, r + 1, c)
        if not padded[r + 1, c]:        # west
            wall(r + 1, c, r, c)
        if not padded[r + 1, c + 2]:    # east
            wall(r, c + 1, r + 1, c + 1)

    return Mesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
                np.asarray(triangles, dtype=np.int64).reshape(-1, 3))


_HEIGHT_STATS = {
    "median": np.median,
    "mean": np.mean,
    "max": np.max,
}


def extrude_lod1(polys, e: Raster, labels, base: float = 0.0,
                 stat: str = "median") -> CityModel:
    """One LOD1 prism per footprint, topped at a per-component height statistic.

    ``labels`` is the component labeling that produced the footprints; the
    top height is the chosen statistic (median by default) of the elevation
    over that component's pixels. Buildings whose top does not exceed the
    base are dropped and counted in ``n_dropped``.
    """
    if stat not in _HEIGHT_STATS:
        raise ValueError(f"stat must be one of {sorted(_HEIGHT_STATS)}")
    reduce = _HEIGHT_STATS[stat]
    lab = np.asarray(labels)
    if lab.shape != e.data.shape:
        raise ValueError("label raster shape must match the elevation raster")
    model = CityModel()
    for poly in polys:
        pixels = e.data[lab == poly.component_id]
        if pixels.size == 0:
            raise ValueError(f"footprint {poly.component_id} has no labeled pixels")
        top = float(reduce(pixels))
        if top <= base:
            model.n_dropped += 1
            continue
        model.buildings.append(Building(footprint=poly, base=base, top=top,
                                        building_id=poly.component_id))
    return model
