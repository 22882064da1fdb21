"""Single-band raster grids: read, sanitize, resample, write.

A grid couples a float64 value array with a 6-coefficient affine
geotransform in GDAL order ``(x0, ax, bx, y0, ay, by)``::

    x_map = x0 + col * ax + row * bx
    y_map = y0 + col * ay + row * by

where ``(col, row)`` are measured from the top-left corner of the
top-left pixel, so pixel centers sit at ``(col + 0.5, row + 0.5)``.

Two on-disk formats are supported:

* single-band TIFF (uncompressed or deflate), little-endian, with the
  transform carried in the standard geo tags (ModelPixelScale 33550 +
  ModelTiepoint 33922, or ModelTransformation 34264 when the transform
  has rotation terms) and the nodata sentinel in tag 42113;
* a raw ``.f32`` format: row-major float32 little-endian payload plus a
  JSON sidecar ``<path>.json`` holding width/height/transform/nodata,
  used for fixtures and tile payloads.

Grids are treated as immutable after construction; all operations here
return new grids and are safe to call concurrently.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import tifffile

from .errors import (
    CrsMismatchError,
    DegenerateTransformError,
    IoFailureError,
    MissingFileError,
    UnsupportedBandCountError,
    UnsupportedBitDepthError,
)

BITDEPTHS = ("u16", "s16", "f32")

_NUMPY_DTYPES = {"u16": np.uint16, "s16": np.int16, "f32": np.float32}

# Sentinel assumed when file metadata carries none.
DEFAULT_NODATA = {"u16": 0.0, "s16": -32768.0, "f32": float("nan")}

_TAG_PIXEL_SCALE = 33550
_TAG_TIEPOINT = 33922
_TAG_TRANSFORM = 34264
_TAG_GEO_ASCII = 34737
_TAG_GDAL_NODATA = 42113

IDENTITY_TRANSFORM = (0.0, 1.0, 0.0, 0.0, 0.0, -1.0)

# Pixels whose target value cannot be represented in the requested bit depth
# are clamped on write; this counter records how many write calls clamped.
clamp_events = 0


@dataclass(frozen=True)
class RasterGrid:
    """A georeferenced single-band scalar field."""

    values: np.ndarray
    transform: tuple[float, ...] = IDENTITY_TRANSFORM
    crs_id: str = ""
    nodata: float | None = None
    source_bitdepth: str = "f32"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[0] < 1 or vals.shape[1] < 1:
            raise ValueError(f"grid values must be a non-empty 2-D array, got shape {vals.shape}")
        if len(self.transform) != 6:
            raise ValueError("transform must have 6 coefficients")
        if self.source_bitdepth not in BITDEPTHS:
            raise ValueError(f"unknown bit depth {self.source_bitdepth!r}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "transform", tuple(float(t) for t in self.transform))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def valid_ratio(mask: np.ndarray) -> float:
    """Fraction of pixels whose mask bit is set."""
    return float(np.asarray(mask, dtype=np.float64).mean())


def pixel_center_coords(transform, rows, cols):
    """Map coordinates of pixel centers (rows/cols may be arrays)."""
    x0, ax, bx, y0, ay, by = transform
    c = np.asarray(cols, dtype=np.float64) + 0.5
    r = np.asarray(rows, dtype=np.float64) + 0.5
    return x0 + c * ax + r * bx, y0 + c * ay + r * by


def invert_transform(transform):
    """Inverse affine: map coordinates to continuous (col, row) pixel space."""
    x0, ax, bx, y0, ay, by = transform
    det = ax * by - bx * ay
    if not math.isfinite(det) or abs(det) < 1e-15:
        raise DegenerateTransformError(f"affine transform is not invertible (det={det})")
    inv_a = by / det
    inv_b = -bx / det
    inv_c = -ay / det
    inv_d = ax / det

    def to_pixel(x, y):
        dx = np.asarray(x, dtype=np.float64) - x0
        dy = np.asarray(y, dtype=np.float64) - y0
        return inv_a * dx + inv_b * dy, inv_c * dx + inv_d * dy

    return to_pixel


def read_raster(path) -> RasterGrid:
    """Load a single-band raster, widening values to float64.

    Raises MissingFileError, UnsupportedBandCountError or
    UnsupportedBitDepthError per the format contract.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"raster not found: {path}")
    if path.suffix == ".f32":
        return _read_f32(path)
    return _read_tiff(path)


def _read_tiff(path: Path) -> RasterGrid:
    try:
        tf = tifffile.TiffFile(path)
    except Exception as exc:
        raise IoFailureError(f"cannot open TIFF {path}: {exc}") from exc
    with tf:
        page = tf.pages[0]
        if page.samplesperpixel != 1:
            raise UnsupportedBandCountError(
                f"{path}: expected 1 band, found {page.samplesperpixel}"
            )
        dtype = np.dtype(page.dtype)
        bitdepth = None
        for name, np_dtype in _NUMPY_DTYPES.items():
            if dtype == np_dtype:
                bitdepth = name
        if bitdepth is None:
            raise UnsupportedBitDepthError(f"{path}: unsupported sample format {dtype}")
        values = page.asarray()
        if values.ndim != 2:
            raise UnsupportedBandCountError(f"{path}: expected a 2-D single-band image")

        transform = IDENTITY_TRANSFORM
        tags = page.tags
        tag_tf = tags.get(_TAG_TRANSFORM)
        tag_scale = tags.get(_TAG_PIXEL_SCALE)
        tag_tie = tags.get(_TAG_TIEPOINT)
        if tag_tf is not None:
            m = tag_tf.value
            transform = (float(m[3]), float(m[0]), float(m[1]),
                         float(m[7]), float(m[4]), float(m[5]))
        elif tag_scale is not None and tag_tie is not None:
            sx, sy, _ = tag_scale.value[:3]
            i, j, _k, x, y, _z = (float(v) for v in tag_tie.value[:6])
            transform = (x - i * float(sx), float(sx), 0.0,
                         y + j * float(sy), 0.0, -float(sy))

        nodata = None
        tag_nodata = tags.get(_TAG_GDAL_NODATA)
        if tag_nodata is not None:
            raw = str(tag_nodata.value).strip().strip("\x00")
            if raw:
                nodata = float(raw)
        crs_id = ""
        tag_crs = tags.get(_TAG_GEO_ASCII)
        if tag_crs is not None:
            crs_id = str(tag_crs.value).strip().strip("\x00|")

    return RasterGrid(values=values, transform=transform, crs_id=crs_id,
                      nodata=nodata, source_bitdepth=bitdepth)


def _sidecar_path(path: Path) -> Path:
    return Path(str(path) + ".json")


def _read_f32(path: Path) -> RasterGrid:
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise MissingFileError(f"sidecar not found for {path}: {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
        payload = np.fromfile(path, dtype="<f4")
    except (OSError, ValueError) as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc
    w, h = int(meta["width"]), int(meta["height"])
    if payload.size != w * h:
        raise IoFailureError(
            f"{path}: payload holds {payload.size} values, sidecar promises {w * h}"
        )
    nodata = meta.get("nodata")
    return RasterGrid(
        values=payload.reshape(h, w),
        transform=tuple(meta["transform"]),
        crs_id=meta.get("crs_id", ""),
        nodata=float(nodata) if nodata is not None else None,
        source_bitdepth="f32",
    )


def write_raster(grid: RasterGrid, path, bitdepth: str = "f32") -> None:
    """Write a grid as TIFF or raw .f32 (chosen by extension).

    Integer bit depths round to nearest; values outside the representable
    range are clamped (the module-level ``clamp_events`` counter records it).
    """
    global clamp_events
    if bitdepth not in BITDEPTHS:
        raise UnsupportedBitDepthError(f"unknown bit depth {bitdepth!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    vals = grid.values
    if bitdepth == "f32":
        out = vals.astype("<f4")
    else:
        info = np.iinfo(_NUMPY_DTYPES[bitdepth])
        rounded = np.rint(vals)
        if np.any(rounded < info.min) or np.any(rounded > info.max):
            clamp_events += 1
            warnings.warn(
                f"{path.name}: values outside {bitdepth} range clamped to "
                f"[{info.min}, {info.max}]",
                stacklevel=2,
            )
        out = np.clip(rounded, info.min, info.max).astype(_NUMPY_DTYPES[bitdepth])

    try:
        if path.suffix == ".f32":
            _write_f32(grid, out.astype("<f4"), path)
        else:
            _write_tiff(grid, out, path)
    except OSError as exc:
        raise IoFailureError(f"cannot write {path}: {exc}") from exc


def _write_f32(grid: RasterGrid, out: np.ndarray, path: Path) -> None:
    out.tofile(path)
    sidecar = {
        "width": grid.width,
        "height": grid.height,
        "transform": list(grid.transform),
        "nodata": grid.nodata,
        "crs_id": grid.crs_id,
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=1))


def _write_tiff(grid: RasterGrid, out: np.ndarray, path: Path) -> None:
    x0, ax, bx, y0, ay, by = grid.transform
    extratags = []
    if bx == 0.0 and ay == 0.0:
        extratags.append((_TAG_PIXEL_SCALE, "d", 3, (ax, -by, 0.0)))
        extratags.append((_TAG_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, x0, y0, 0.0)))
    else:
        m = (ax, bx, 0.0, x0,
             ay, by, 0.0, y0,
             0.0, 0.0, 0.0, 0.0,
             0.0, 0.0, 0.0, 1.0)
        extratags.append((_TAG_TRANSFORM, "d", 16, m))
    if grid.nodata is not None:
        extratags.append((_TAG_GDAL_NODATA, "s", 0, repr(float(grid.nodata))))
    if grid.crs_id:
        extratags.append((_TAG_GEO_ASCII, "s", 0, grid.crs_id + "|"))
    tifffile.imwrite(path, out, extratags=extratags)


def sanitize_nodata(grid: RasterGrid) -> tuple[RasterGrid, np.ndarray]:
    """Zero-fill nodata pixels and return (clean grid, validity mask).

    A pixel is invalid when it equals the sentinel (explicit, else the
    bit-depth default) or is non-finite. Total function: never raises.
    """
    vals = grid.values
    sentinel = grid.nodata if grid.nodata is not None else DEFAULT_NODATA[grid.source_bitdepth]
    invalid = ~np.isfinite(vals)
    if not math.isnan(sentinel):
        invalid |= vals == sentinel
    cleaned = np.where(invalid, 0.0, vals)
    mask = (~invalid).astype(np.uint8)
    return replace(grid, values=cleaned), mask


def resample_to_grid(
    src: RasterGrid,
    ref: RasterGrid,
    src_mask: np.ndarray | None = None,
) -> tuple[RasterGrid, np.ndarray]:
    """Bilinearly resample ``src`` onto ``ref``'s pixel grid.

    Each output pixel interpolates ``src`` at the map coordinates of the
    corresponding ``ref`` pixel center. Samples outside ``src`` become
    (0, mask=0); when ``src_mask`` is given, samples touching any invalid
    source pixel are also masked out (values treat invalid pixels as the
    zero fill applied by sanitize_nodata).
    """
    if src.crs_id != ref.crs_id:
        raise CrsMismatchError(
            f"source crs {src.crs_id!r} != reference crs {ref.crs_id!r}"
        )
    to_src_pixel = invert_transform(src.transform)

    rows, cols = np.mgrid[0:ref.height, 0:ref.width]
    map_x, map_y = pixel_center_coords(ref.transform, rows, cols)
    colf, rowf = to_src_pixel(map_x, map_y)
    # Continuous array-index coordinates (integer index == pixel center).
    ix = colf - 0.5
    iy = rowf - 0.5
    # Snap near-integer coordinates so aligned grids gather exactly.
    ix = np.where(np.abs(ix - np.rint(ix)) < 1e-9, np.rint(ix), ix)
    iy = np.where(np.abs(iy - np.rint(iy)) < 1e-9, np.rint(iy), iy)

    h, w = src.values.shape
    inside = (ix >= 0.0) & (ix <= w - 1.0) & (iy >= 0.0) & (iy <= h - 1.0)

    x0 = np.clip(np.floor(ix), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(iy), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(ix - x0, 0.0, 1.0)
    fy = np.clip(iy - y0, 0.0, 1.0)

    v = src.values
    top = v[y0, x0] * (1.0 - fx) + v[y0, x1] * fx
    bot = v[y1, x0] * (1.0 - fx) + v[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy

    mask = inside.copy()
    if src_mask is not None:
        m = np.asarray(src_mask)
        corners_valid = (m[y0, x0] & m[y0, x1] & m[y1, x0] & m[y1, x1]).astype(bool)
        mask &= corners_valid
    out = np.where(mask, out, 0.0)

    grid = RasterGrid(
        values=out,
        transform=ref.transform,
        crs_id=src.crs_id,
        nodata=None,
        source_bitdepth=src.source_bitdepth,
    )
    return grid, mask.astype(np.uint8)
