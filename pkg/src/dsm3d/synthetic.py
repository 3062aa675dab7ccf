"""Synthetic prism scenes: the ground-truth oracle used across the test suite.

Axis-aligned rectangular prisms are stamped into a flat zero DSM. The DSM
equals the analytic prism heights exactly on the mask, so any geometry
recovered downstream can be compared against a closed-form answer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .masks import FootprintPolygon
from .raster import Geotransform, Raster


class PlacementError(RuntimeError):
    """Could not place the requested prisms without overlap."""


@dataclass
class PrismSpec:
    """Analytic ground truth for one stamped prism (pixel and world space)."""

    row0: int
    row1: int
    col0: int
    col1: int
    height: float
    footprint: FootprintPolygon

    @property
    def rows(self) -> int:
        return self.row1 - self.row0

    @property
    def cols(self) -> int:
        return self.col1 - self.col0

    def roof_perimeter(self, geo: Geotransform) -> float:
        """Perimeter of the pixel-center roof rectangle, in world units."""
        return 2.0 * ((self.cols - 1) * geo.pixel_size_x
                      + (self.rows - 1) * geo.pixel_size_y)


@dataclass
class SyntheticScene:
    dsm: Raster
    mask: np.ndarray
    prisms: list = field(default_factory=list)


def make_synthetic_scene(seed: int = 0, extent: tuple[int, int] = (256, 256),
                         n_prisms: int = 10,
                         height_range: tuple[float, float] = (4.0, 12.0),
                         size_range: tuple[int, int] = (10, 30),
                         margin: int = 2, max_tries: int = 500,
                         geo: Geotransform | None = None) -> SyntheticScene:
    """Stamp non-overlapping rectangular prisms into a flat DSM.

    Placement is rejection sampling with ``max_tries`` attempts per prism;
    exhaustion raises :class:`PlacementError`. A fixed seed reproduces the
    scene byte for byte.
    """
    h, w = extent
    lo, hi = size_range
    if lo < 2 or hi < lo:
        raise ValueError("prism sides must be >= 2 pixels and lo <= hi")
    if n_prisms > 0 and hi + 2 * margin > min(h, w):
        raise ValueError("prism size range does not fit the extent")
    geo = geo or Geotransform(0.0, float(h), 1.0, 1.0)
    rng = np.random.default_rng(seed)
    dsm = np.zeros((h, w), dtype=np.float64)
    mask = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    prisms = []
    for i in range(n_prisms):
        for attempt in range(max_tries):
            ph = int(rng.integers(lo, hi + 1))
            pw = int(rng.integers(lo, hi + 1))
            r0 = int(rng.integers(margin, h - ph - margin + 1))
            c0 = int(rng.integers(margin, w - pw - margin + 1))
            window = occupied[max(0, r0 - margin):r0 + ph + margin,
                              max(0, c0 - margin):c0 + pw + margin]
            if not window.any():
                break
        else:
            raise PlacementError(
                f"failed to place prism {i + 1}/{n_prisms} after {max_tries} tries")
        # millimeter quantization: heights survive 6-significant-digit text
        # serialization (.asc) without loss
        height = float(np.round(rng.uniform(*height_range), 3))
        dsm[r0:r0 + ph, c0:c0 + pw] = height
        mask[r0:r0 + ph, c0:c0 + pw] = 1
        occupied[r0:r0 + ph, c0:c0 + pw] = True
        # cell-convention footprint rectangle, CCW in world coordinates
        x0 = geo.origin_x + c0 * geo.pixel_size_x
        x1 = geo.origin_x + (c0 + pw) * geo.pixel_size_x
        y0 = geo.origin_y - (r0 + ph) * geo.pixel_size_y
        y1 = geo.origin_y - r0 * geo.pixel_size_y
        ring = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
        prisms.append(PrismSpec(row0=r0, row1=r0 + ph, col0=c0, col1=c0 + pw,
                                height=height,
                                footprint=FootprintPolygon(ring, component_id=i + 1)))
    return SyntheticScene(dsm=Raster(data=dsm, geo=geo), mask=mask, prisms=prisms)


def render_scene_image(scene: SyntheticScene,
                       height_scale: float = 20.0) -> np.ndarray:
    """Deterministic (H, W, 3) image of a scene for training and inference.

    Channel 0 encodes the scaled elevation, channel 1 the mask, channel 2 a
    horizontal ramp so the encoder sees spatial context.
    """
    h, w = scene.dsm.data.shape
    ramp = np.tile(np.linspace(0.0, 1.0, w), (h, 1))
    img = np.stack([
        np.clip(scene.dsm.data / height_scale, 0.0, 1.0),
        scene.mask.astype(np.float64),
        ramp,
    ], axis=2)
    return img
