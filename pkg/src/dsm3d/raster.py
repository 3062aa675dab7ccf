"""Georeferenced raster I/O, tiling, patch fusion, and smoothing.

Supported formats
-----------------
``.asc``
    ESRI ASCII grid, the elevation interchange format. Header keys: ncols,
    nrows, xllcorner, yllcorner, cellsize, NODATA_value; data rows run north
    to south. Values are written with 6 significant digits.
``.png``
    8-bit grayscale/RGB for images and masks; 16-bit grayscale for scaled
    elevations, with a JSON sidecar ``<path>.json`` holding {scale, offset}
    so that value = stored * scale + offset.
``.pgm``
    Binary (P5) or ASCII (P2) grayscale, 8 or 16 bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage


class RasterError(Exception):
    """Base error for raster I/O and processing."""


class RasterFormatError(RasterError):
    """Malformed file contents (bad header, dimension mismatch, ...)."""


@dataclass(frozen=True)
class Geotransform:
    """North-up affine pixel-to-world mapping (no rotation or shear).

    ``origin_x``/``origin_y`` locate the outer corner of pixel (0, 0); world
    x grows with columns and world y shrinks as rows go south, so
    ``pixel_size_y`` is stored positive and applied with a negative step.
    """

    origin_x: float
    origin_y: float
    pixel_size_x: float
    pixel_size_y: float

    def __post_init__(self):
        if self.pixel_size_x <= 0 or self.pixel_size_y <= 0:
            raise ValueError("pixel sizes must be positive")

    def pixel_center(self, row: int, col: int) -> tuple[float, float]:
        """World coordinates of a pixel center (+0.5 convention)."""
        x = self.origin_x + (col + 0.5) * self.pixel_size_x
        y = self.origin_y - (row + 0.5) * self.pixel_size_y
        return x, y


@dataclass
class Raster:
    """A 2-D (or H x W x C) grid with optional georeference and nodata value."""

    data: np.ndarray
    geo: Geotransform | None = None
    nodata: float | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)

    @property
    def shape(self):
        return self.data.shape

    def valid_mask(self) -> np.ndarray:
        """True where the pixel carries data (not the nodata sentinel)."""
        if self.nodata is None:
            return np.ones(self.data.shape[:2], dtype=bool)
        d = self.data if self.data.ndim == 2 else self.data[:, :, 0]
        return d != self.nodata


# ---------------------------------------------------------------------------
# ESRI ASCII grid

_ASC_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")


def _read_asc(path) -> Raster:
    header = {}
    with open(path, "r") as fh:
        pos = fh.tell()
        while True:
            line = fh.readline()
            if not line:
                raise RasterFormatError(f"{path}: truncated header")
            parts = line.split()
            if len(parts) == 2 and parts[0].lower() in _ASC_HEADER_KEYS + ("nodata_value",):
                header[parts[0].lower()] = parts[1]
                pos = fh.tell()
            else:
                fh.seek(pos)
                break
        for key in _ASC_HEADER_KEYS:
            if key not in header:
                raise RasterFormatError(f"{path}: missing header key {key}")
        try:
            ncols = int(header["ncols"])
            nrows = int(header["nrows"])
            xll = float(header["xllcorner"])
            yll = float(header["yllcorner"])
            cellsize = float(header["cellsize"])
        except ValueError as exc:
            raise RasterFormatError(f"{path}: bad header value: {exc}") from exc
        if ncols < 1 or nrows < 1 or ncols * nrows > 2 ** 31:
            raise RasterFormatError(f"{path}: unreasonable dimensions {nrows}x{ncols}")
        if cellsize <= 0:
            raise RasterFormatError(f"{path}: cellsize must be positive")
        try:
            values = np.loadtxt(fh, dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise RasterFormatError(f"{path}: bad data body: {exc}") from exc
    flat = values.reshape(-1)
    if flat.size != ncols * nrows:
        raise RasterFormatError(
            f"{path}: header says {nrows}x{ncols}={nrows*ncols} values, "
            f"body has {flat.size}")
    data = flat.reshape(nrows, ncols)
    nodata = float(header["nodata_value"]) if "nodata_value" in header else None
    geo = Geotransform(origin_x=xll, origin_y=yll + nrows * cellsize,
                       pixel_size_x=cellsize, pixel_size_y=cellsize)
    return Raster(data=data, geo=geo, nodata=nodata)


def _write_asc(r: Raster, path) -> None:
    if r.data.ndim != 2:
        raise RasterError("ASCII grids hold a single band")
    geo = r.geo or Geotransform(0.0, float(r.data.shape[0]), 1.0, 1.0)
    if geo.pixel_size_x != geo.pixel_size_y:
        raise RasterError("ASCII grid requires square pixels")
    nrows, ncols = r.data.shape
    nodata = r.nodata if r.nodata is not None else -9999.0
    with open(path, "w") as fh:
        fh.write(f"ncols {ncols}\n")
        fh.write(f"nrows {nrows}\n")
        fh.write(f"xllcorner {geo.origin_x:.10g}\n")
        fh.write(f"yllcorner {geo.origin_y - nrows * geo.pixel_size_y:.10g}\n")
        fh.write(f"cellsize {geo.pixel_size_x:.10g}\n")
        fh.write(f"NODATA_value {nodata:.10g}\n")
        for row in r.data:
            fh.write(" ".join(f"{v:.6g}" for v in row))
            fh.write("\n")


# ---------------------------------------------------------------------------
# PNG (via Pillow) and PGM


def _read_png(path) -> Raster:
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I"):
            data = np.asarray(img, dtype=np.float64)
            sidecar = str(path) + ".json"
            if os.path.exists(sidecar):
                with open(sidecar) as fh:
                    meta = json.load(fh)
                data = data * float(meta.get("scale", 1.0)) + float(meta.get("offset", 0.0))
        elif img.mode == "L":
            data = np.asarray(img, dtype=np.float64)
        else:
            data = np.asarray(img.convert("RGB"), dtype=np.float64)
    return Raster(data=data)


def _write_png(r: Raster, path, scale: float | None = None,
               offset: float = 0.0) -> None:
    data = r.data
    if scale is not None:
        if data.ndim != 2:
            raise RasterError("scaled 16-bit PNG holds a single band")
        stored = np.round((data - offset) / scale)
        if stored.min() < 0 or stored.max() > 65535:
            raise RasterError("values out of range for 16-bit PNG at this scale")
        Image.fromarray(stored.astype(np.uint16)).save(path)
        with open(str(path) + ".json", "w") as fh:
            json.dump({"scale": scale, "offset": offset}, fh)
        return
    if data.ndim == 2:
        arr = np.clip(data, 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(path)
    elif data.ndim == 3 and data.shape[2] == 3:
        arr = np.clip(data, 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(path)
    else:
        raise RasterError(f"cannot write PNG with shape {data.shape}")


def _read_pgm(path) -> Raster:
    with open(path, "rb") as fh:
        content = fh.read()
    tokens = []
    i = 0
    # header tokens with '#' comments; data follows the third numeric token
    while len(tokens) < 4 and i < len(content):
        while i < len(content) and content[i:i + 1].isspace():
            i += 1
        if content[i:i + 1] == b"#":
            while i < len(content) and content[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(content) and not content[j:j + 1].isspace():
            j += 1
        tokens.append(content[i:j])
        i = j
    if len(tokens) < 4 or tokens[0] not in (b"P2", b"P5"):
        raise RasterFormatError(f"{path}: not a PGM file")
    magic = tokens[0]
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise RasterFormatError(f"{path}: bad PGM header") from exc
    if magic == b"P5":
        i += 1  # exactly one whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        count = width * height
        raw = content[i:i + count * dtype.itemsize]
        if len(raw) != count * dtype.itemsize:
            raise RasterFormatError(f"{path}: truncated PGM data")
        data = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    else:
        values = np.array(content[i:].split(), dtype=np.float64)
        if values.size != width * height:
            raise RasterFormatError(f"{path}: P2 value count mismatch")
        data = values.reshape(height, width)
    return Raster(data=data.astype(np.float64))


def _write_pgm(r: Raster, path) -> None:
    if r.data.ndim != 2:
        raise RasterError("PGM holds a single band")
    data = np.round(r.data)
    if data.min() < 0:
        raise RasterError("PGM cannot store negative values")
    maxval = 65535 if data.max() > 255 else 255
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(data.astype(dtype).tobytes())


_READERS = {".asc": _read_asc, ".png": _read_png, ".pgm": _read_pgm}


def read_raster(path, format: str | None = None) -> Raster:
    """Load a raster; the format is inferred from the extension by default."""
    ext = ("." + format.lower().lstrip(".")) if format else os.path.splitext(str(path))[1].lower()
    if ext not in _READERS:
        raise RasterFormatError(f"unknown raster format {ext!r}")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return _READERS[ext](path)


def write_raster(r: Raster, path, format: str | None = None,
                 scale: float | None = None, offset: float = 0.0) -> None:
    """Write a raster; pass scale (and offset) to get a scaled 16-bit PNG."""
    ext = ("." + format.lower().lstrip(".")) if format else os.path.splitext(str(path))[1].lower()
    if ext == ".asc":
        _write_asc(r, path)
    elif ext == ".png":
        _write_png(r, path, scale=scale, offset=offset)
    elif ext == ".pgm":
        _write_pgm(r, path)
    else:
        raise RasterFormatError(f"unknown raster format {ext!r}")


# ---------------------------------------------------------------------------
# tiling and fusion


@dataclass
class TilePlan:
    """Sliding-window anchors covering an H x W raster."""

    tile_h: int
    tile_w: int
    overlap: int
    anchors: list = field(default_factory=list)

    def __len__(self):
        return len(self.anchors)


def _axis_anchors(extent: int, tile: int, stride: int) -> list[int]:
    anchors = [0]
    while anchors[-1] + tile < extent:
        anchors.append(min(anchors[-1] + stride, extent - tile))
    return anchors


def plan_tiles(h: int, w: int, tile: int = 512, overlap: int = 64) -> TilePlan:
    """Plan anchors with stride tile - overlap; the last anchor per axis is
    clamped so tiles never exceed the raster bounds.

    Tiles larger than the raster shrink to the raster extent on that axis.
    """
    if tile <= overlap:
        raise ValueError(f"tile ({tile}) must exceed overlap ({overlap})")
    if overlap < 0:
        raise ValueError("overlap must be >= 0")
    if h < 1 or w < 1:
        raise ValueError("raster extents must be positive")
    tile_h = min(tile, h)
    tile_w = min(tile, w)
    stride = tile - overlap
    rows = _axis_anchors(h, tile_h, stride)
    cols = _axis_anchors(w, tile_w, stride)
    anchors = [(r, c) for r in rows for c in cols]
    return TilePlan(tile_h=tile_h, tile_w=tile_w, overlap=overlap, anchors=anchors)


def cut_patches(data: np.ndarray, plan: TilePlan) -> list:
    """Extract the planned tiles as (anchor, patch) pairs, in anchor order."""
    return [((r, c), data[r:r + plan.tile_h, c:c + plan.tile_w].copy())
            for r, c in plan.anchors]


def fuse_patches(patches, h: int, w: int) -> Raster:
    """Average overlapping tiles into one raster.

    Uniform per-pixel averaging, accumulated as a running mean in anchor
    order: deterministic for any worker schedule upstream, and exact (bit
    identical) wherever all covering patches agree.
    """
    mean = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    for (r, c), patch in sorted(patches, key=lambda p: p[0]):
        ph, pw = patch.shape[:2]
        if r < 0 or c < 0 or r + ph > h or c + pw > w:
            raise RasterError(f"patch at ({r}, {c}) exceeds raster bounds")
        region_count = count[r:r + ph, c:c + pw]
        region_mean = mean[r:r + ph, c:c + pw]
        region_count += 1
        region_mean += (patch - region_mean) / region_count
    if (count == 0).any():
        uncovered = int((count == 0).sum())
        raise RasterError(f"{uncovered} pixels not covered by any patch")
    return Raster(data=mean)


# ---------------------------------------------------------------------------
# smoothing


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized Gaussian taps with radius ceil(3 sigma)."""
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_filter(r: Raster, sigma: float) -> Raster:
    """Separable Gaussian smoothing with renormalized edge handling.

    The kernel is renormalized over the in-bounds, valid taps of each pixel,
    so constant rasters stay constant up to the border. Nodata pixels are
    excluded from every window and preserved in the output. sigma = 0 is the
    identity.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return Raster(data=r.data.copy(), geo=r.geo, nodata=r.nodata)
    if r.data.ndim != 2:
        raise RasterError("gaussian_filter expects a single-band raster")
    kernel = gaussian_kernel_1d(sigma)
    valid = r.valid_mask()
    filled = np.where(valid, r.data, 0.0).astype(np.float64)
    weights = valid.astype(np.float64)

    def smooth(a):
        tmp = ndimage.correlate1d(a, kernel, axis=0, mode="constant", cval=0.0)
        return ndimage.correlate1d(tmp, kernel, axis=1, mode="constant", cval=0.0)

    num = smooth(filled)
    den = smooth(weights)
    out = np.where(valid, num / np.where(den == 0.0, 1.0, den), 0.0)
    if r.nodata is not None:
        out = np.where(valid, out, r.nodata)
    return Raster(data=out, geo=r.geo, nodata=r.nodata)
