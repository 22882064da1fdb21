"""Reproducible synthetic DEM / shaded-image pairs for desk-scale runs.

Terrain is spectral-synthesis fractal noise (power-law amplitude falloff)
with parabolic raised-rim craters punched in afterwards. Images are
Lambertian renders of the terrain under a configurable sun, with optional
multiplicative albedo noise. Everything is a pure function of its seed, so
stores built from the same parameters hash identically.

No cast shadows and no physically calibrated photometry: the renderer only
has to make elevation learnable from shading, not to emulate a real sensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import preprocess
from .preprocess import (
    NormalizationConfig,
    QcConfig,
    StoredTile,
    TileCandidate,
    make_tile_id,
    qc_filter,
    split_dataset,
    write_tile_store,
)
from .raster_io import RasterGrid


@dataclass(frozen=True)
class TerrainParams:
    size: int = 512
    spectral_beta: float = 2.0
    amplitude: float = 50.0          # meters peak-to-peak before craters
    crater_count: int = 0
    crater_radius_range: tuple[float, float] = (4.0, 24.0)  # pixels
    pixel_scale: float = 5.0         # meters per pixel
    seed: int = 0

    def __post_init__(self):
        if self.size < 64:
            raise ValueError("size must be >= 64")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        if self.pixel_scale <= 0:
            raise ValueError("pixel_scale must be positive")


@dataclass(frozen=True)
class SunParams:
    azimuth_deg: float = 315.0       # clockwise from map north
    elevation_deg: float = 45.0
    albedo_noise_std: float = 0.02

    def __post_init__(self):
        if not 0.0 < self.elevation_deg <= 90.0:
            raise ValueError("sun elevation must be in (0, 90]")


def generate_terrain(p: TerrainParams) -> RasterGrid:
    """Fractal terrain with craters, deterministic in the seed.

    The spectral surface is scaled so its peak-to-peak range equals
    ``amplitude`` exactly (before craters); craters then add bowls with
    raised rims at seeded random positions.
    """
    rng = np.random.default_rng(p.seed)
    n = p.size

    noise = rng.standard_normal((n, n))
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.fftfreq(n)[None, :]
    freq = np.hypot(fy, fx)
    amp = np.zeros_like(freq)
    nonzero = freq > 0
    amp[nonzero] = freq[nonzero] ** (-p.spectral_beta / 2.0)
    surface = np.fft.ifft2(np.fft.fft2(noise) * amp).real

    surface -= surface.min()
    ptp = surface.max()
    if ptp > 0:
        surface *= p.amplitude / ptp

    for _ in range(p.crater_count):
        cy = rng.uniform(0, n)
        cx = rng.uniform(0, n)
        radius = rng.uniform(*p.crater_radius_range)
        depth = 0.4 * radius * p.pixel_scale * rng.uniform(0.5, 1.0)
        rim = 0.25 * depth
        yy = np.arange(n)[:, None] - cy
        xx = np.arange(n)[None, :] - cx
        r = np.hypot(yy, xx)
        inside = r <= radius
        # Parabolic bowl from -depth at the center up to +rim at the edge,
        # then a quadratic rim decaying to zero at 2 radii.
        bowl = (rim + depth) * (r / radius) ** 2 - depth
        skirt = rim * np.clip(1.0 - (r - radius) / radius, 0.0, 1.0) ** 2
        surface += np.where(inside, bowl, np.where(r <= 2 * radius, skirt, 0.0))

    transform = (0.0, p.pixel_scale, 0.0, 0.0, 0.0, -p.pixel_scale)
    return RasterGrid(values=surface, transform=transform, crs_id="synthetic")


def _surface_gradients(z: np.ndarray, pixel_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric-difference slope estimate with a 3x3 weighted stencil.

    Uses the classic weighted scheme (corner weight 1, edge weight 2,
    divisor 8 * pixel_scale) with replicated borders. Returns
    (dz/d_east, dz/d_north) in array orientation where row 0 is north.
    """
    padded = np.pad(z, 1, mode="edge")
    a = padded[:-2, :-2]
    b = padded[:-2, 1:-1]
    c = padded[:-2, 2:]
    d = padded[1:-1, :-2]
    f = padded[1:-1, 2:]
    g = padded[2:, :-2]
    h = padded[2:, 1:-1]
    i = padded[2:, 2:]
    dz_dx = ((c + 2 * f + i) - (a + 2 * d + g)) / (8.0 * pixel_scale)
    dz_dy_south = ((g + 2 * h + i) - (a + 2 * b + c)) / (8.0 * pixel_scale)
    return dz_dx, -dz_dy_south


def sun_vector(sun: SunParams) -> tuple[float, float, float]:
    """Unit vector toward the sun in (east, north, up) axes."""
    az = math.radians(sun.azimuth_deg)
    el = math.radians(sun.elevation_deg)
    return (math.cos(el) * math.sin(az), math.cos(el) * math.cos(az), math.sin(el))


def render_shaded(
    dem: RasterGrid,
    sun: SunParams,
    pixel_scale: float | None = None,
    noise_seed: int = 0,
) -> RasterGrid:
    """Lambertian reflectance of a DEM under the given sun, in [0, 1].

    reflectance = max(0, normal . sun) per pixel, times (1 + albedo noise)
    when albedo_noise_std > 0, clipped to [0, 1]. Cast shadows are not
    modeled. Adding a constant to the DEM leaves the output unchanged
    whenever the shifted heights are exactly representable.
    """
    z = dem.values
    if not np.isfinite(z).all():
        raise ValueError("DEM must be finite; run sanitize_nodata first")
    scale = pixel_scale if pixel_scale is not None else abs(dem.transform[1])
    dz_dx, dz_dy = _surface_gradients(z, scale)

    sx, sy, sz = sun_vector(sun)
    norm = np.sqrt(dz_dx ** 2 + dz_dy ** 2 + 1.0)
    reflectance = np.maximum(0.0, (-dz_dx * sx - dz_dy * sy + sz) / norm)

    if sun.albedo_noise_std > 0:
        rng = np.random.default_rng(noise_seed)
        reflectance = reflectance * (1.0 + sun.albedo_noise_std * rng.standard_normal(z.shape))
    reflectance = np.clip(reflectance, 0.0, 1.0)
    return RasterGrid(values=reflectance, transform=dem.transform, crs_id=dem.crs_id)


@dataclass(frozen=True)
class DatasetRanges:
    """Per-pair sampling ranges for make_dataset."""

    amplitude: tuple[float, float] = (10.0, 60.0)
    spectral_beta: tuple[float, float] = (2.0, 2.0)
    crater_count: tuple[int, int] = (0, 3)
    crater_radius: tuple[float, float] = (4.0, 16.0)
    sun_azimuth: tuple[float, float] = (300.0, 330.0)
    sun_elevation: tuple[float, float] = (30.0, 60.0)
    albedo_noise_std: float = 0.02

    def __post_init__(self):
        if self.amplitude[0] < 2.0:
            raise ValueError("amplitude floor below 2 m would let tiles fail QC")


def make_dataset(
    n_pairs: int,
    out_dir,
    seed: int = 0,
    tile_size: int = 64,
    pixel_scale: float = 5.0,
    ranges: DatasetRanges = DatasetRanges(),
    split_ratios=(0.8, 0.1, 0.1),
    qc: QcConfig | None = None,
    norm: NormalizationConfig = NormalizationConfig(),
) -> Path:
    """Emit a preprocess-compatible tile store of synthetic pairs.

    Each pair gets its own terrain and sun drawn from ``ranges`` with a
    seed derived from (seed, pair index), so the store is a pure function
    of its arguments. Amplitudes >= 2 m guarantee every tile passes QC.
    Returns the manifest path.
    """
    if n_pairs <= 0:
        raise ValueError("n_pairs must be positive")
    qc = qc if qc is not None else QcConfig(tile_size=tile_size)
    if qc.tile_size != tile_size:
        raise ValueError("qc.tile_size disagrees with tile_size")

    tiles: list[StoredTile] = []
    full_mask = np.ones((tile_size, tile_size), dtype=np.uint8)
    for idx in range(n_pairs):
        rng = np.random.default_rng([seed, idx])
        terrain_seed = int(rng.integers(0, 2 ** 63))
        noise_seed = int(rng.integers(0, 2 ** 63))
        params = TerrainParams(
            size=tile_size,
            spectral_beta=float(rng.uniform(*ranges.spectral_beta)),
            amplitude=float(rng.uniform(*ranges.amplitude)),
            crater_count=int(rng.integers(ranges.crater_count[0], ranges.crater_count[1] + 1)),
            crater_radius_range=ranges.crater_radius,
            pixel_scale=pixel_scale,
            seed=terrain_seed,
        )
        sun = SunParams(
            azimuth_deg=float(rng.uniform(*ranges.sun_azimuth)) % 360.0,
            elevation_deg=float(rng.uniform(*ranges.sun_elevation)),
            albedo_noise_std=ranges.albedo_noise_std,
        )
        dem = generate_terrain(params)
        image = render_shaded(dem, sun, pixel_scale, noise_seed=noise_seed)

        candidate = TileCandidate(
            image=image.values, dem=dem.values, mask=full_mask, row=0, col=idx
        )
        result = qc_filter(candidate, qc)
        if not result.keep:  # amplitude floor makes this unreachable
            raise RuntimeError(f"synthetic pair {idx} failed QC: {result.reason}")
        stretched = preprocess.stretch_image(candidate.image, full_mask, norm)
        normalized, meta = preprocess.normalize_dem(
            candidate.dem, full_mask, norm, source_id="synth", row=0, col=idx
        )
        tile_id = make_tile_id("synth", 0, idx)
        tiles.append(StoredTile(tile_id, stretched, normalized, full_mask, meta))

    splits = split_dataset([t.tile_id for t in tiles], split_ratios, seed=seed)
    return write_tile_store(tiles, splits, out_dir, qc=qc, norm=norm)
