"""Turn aligned image/DEM grids into a quality-filtered, normalized tile store.

Pipeline order for one source strip:

    sanitize -> resample image onto the DEM grid -> tile_strip -> qc_filter
    -> stretch_image / normalize_dem -> split_dataset -> write_tile_store

All per-tile statistics (percentiles, elevation extrema) are computed over
valid pixels only; zero-filled nodata never contaminates them.

Tile store layout (all floats serialized at full precision)::

    store/manifest.json                     version, tile_size, thresholds,
                                            split map, per-tile entries
    store/tiles/<source>_<row>_<col>.img.f32   stretched image, float32 LE
    store/tiles/<source>_<row>_<col>.dem.f32   normalized DEM, float32 LE
    store/tiles/<source>_<row>_<col>.msk.u8    validity mask, one byte/pixel
    store/tiles/<source>_<row>_<col>.meta.json source_id, row, col, z_min,
                                               z_ptp, valid_ratio
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadRatiosError,
    CorruptTileError,
    EmptyTileError,
    IoFailureError,
    ManifestVersionError,
    NegativePtpError,
    ShapeMismatchError,
)
from .raster_io import RasterGrid, resample_to_grid, sanitize_nodata

MANIFEST_VERSION = 1
SPLIT_NAMES = ("train", "test", "val")


@dataclass(frozen=True)
class QcConfig:
    """Tile retention thresholds."""

    tile_size: int = 512
    gamma: float = 0.05      # minimum valid-area ratio
    ptp_min: float = 1.0     # tiles flatter than this (meters) are rejected

    def __post_init__(self):
        if self.tile_size <= 0 or self.tile_size % 32 != 0:
            raise ValueError("tile_size must be a positive multiple of 32")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.ptp_min <= 0.0:
            raise ValueError("ptp_min must be positive")


@dataclass(frozen=True)
class NormalizationConfig:
    """Image stretch percentiles and DEM rescaling constants."""

    pct_low: float = 1.0
    pct_high: float = 99.0
    standardize_mean: float = 0.5
    standardize_std: float = 0.5
    epsilon: float = 1e-3    # meters, keeps near-flat tiles finite

    def __post_init__(self):
        if not 0.0 <= self.pct_low < self.pct_high <= 100.0:
            raise ValueError("need 0 <= pct_low < pct_high <= 100")
        if self.standardize_std <= 0.0:
            raise ValueError("standardize_std must be positive")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")


@dataclass
class TileMetadata:
    source_id: str
    row: int
    col: int
    z_min: float | None
    z_ptp: float | None
    valid_ratio: float


@dataclass
class TileCandidate:
    """A raw tile cut from a strip, before QC and normalization."""

    image: np.ndarray
    dem: np.ndarray
    mask: np.ndarray
    row: int
    col: int


@dataclass
class StoredTile:
    """A finished tile: stretched image, normalized DEM, mask, metadata."""

    tile_id: str
    image: np.ndarray
    dem: np.ndarray
    mask: np.ndarray
    meta: TileMetadata


class RejectReason(enum.Enum):
    LOW_VALID_RATIO = "LowValidRatio"
    FLAT_TERRAIN = "FlatTerrain"
    ALL_INVALID = "AllInvalid"


@dataclass(frozen=True)
class QcResult:
    keep: bool
    reason: RejectReason | None = None
    valid_ratio: float = 0.0
    z_ptp: float = 0.0


def tile_strip(
    image: RasterGrid | np.ndarray,
    dem: RasterGrid | np.ndarray,
    mask: np.ndarray,
    cfg: QcConfig,
) -> list[TileCandidate]:
    """Cut non-overlapping tile_size tiles; incomplete edge tiles are dropped."""
    img = image.values if isinstance(image, RasterGrid) else np.asarray(image, dtype=np.float64)
    dm = dem.values if isinstance(dem, RasterGrid) else np.asarray(dem, dtype=np.float64)
    msk = np.asarray(mask, dtype=np.uint8)
    if img.shape != dm.shape or img.shape != msk.shape:
        raise ShapeMismatchError(
            f"image {img.shape}, dem {dm.shape} and mask {msk.shape} must be congruent"
        )
    t = cfg.tile_size
    n_rows, n_cols = img.shape[0] // t, img.shape[1] // t
    out = []
    for r in range(n_rows):
        for c in range(n_cols):
            sl = np.s_[r * t:(r + 1) * t, c * t:(c + 1) * t]
            out.append(TileCandidate(image=img[sl], dem=dm[sl], mask=msk[sl], row=r, col=c))
    return out


def qc_filter(candidate: TileCandidate, cfg: QcConfig) -> QcResult:
    """Keep a tile iff valid_ratio >= gamma and elevation ptp > ptp_min.

    Elevation statistics use valid pixels only. Total function: an
    all-invalid tile is rejected, never an error.
    """
    m = candidate.mask.astype(bool)
    ratio = float(m.mean())
    if not m.any():
        return QcResult(False, RejectReason.ALL_INVALID, ratio, 0.0)
    z = candidate.dem[m]
    ptp = float(z.max() - z.min())
    if ratio < cfg.gamma:
        return QcResult(False, RejectReason.LOW_VALID_RATIO, ratio, ptp)
    if not ptp > cfg.ptp_min:
        return QcResult(False, RejectReason.FLAT_TERRAIN, ratio, ptp)
    return QcResult(True, None, ratio, ptp)


def stretch_image(
    image_tile: np.ndarray,
    mask: np.ndarray,
    cfg: NormalizationConfig = NormalizationConfig(),
) -> np.ndarray:
    """Percentile-stretch then standardize an image tile into [-1, 1].

    Percentiles are taken over valid pixels with linear interpolation.
    Values clip to [p_low, p_high], map to [0, 1], then standardize via
    (x - mean) / std. Invalid pixels output -1 (the range floor), keeping
    "no data" distinguishable from mid-tone terrain. A degenerate spread
    (p_high - p_low < 1e-9) maps valid pixels to 0 post-standardization.
    """
    tile = np.asarray(image_tile, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if tile.shape != m.shape:
        raise ShapeMismatchError(f"tile {tile.shape} vs mask {m.shape}")
    if not m.any():
        raise EmptyTileError("stretch_image needs at least one valid pixel")
    lo, hi = np.percentile(tile[m], [cfg.pct_low, cfg.pct_high])
    if hi - lo < 1e-9:
        scaled = np.zeros_like(tile)
    else:
        scaled = (np.clip(tile, lo, hi) - lo) / (hi - lo)
        scaled = (scaled - cfg.standardize_mean) / cfg.standardize_std
    return np.where(m, scaled, -1.0)


def normalize_dem(
    dem_tile: np.ndarray,
    mask: np.ndarray,
    cfg: NormalizationConfig = NormalizationConfig(),
    source_id: str = "",
    row: int = 0,
    col: int = 0,
) -> tuple[np.ndarray, TileMetadata]:
    """Rescale a DEM tile to [0, 1) using its local extrema.

    normalized = (z - z_min) / (z_ptp + epsilon), extrema over valid pixels;
    invalid pixels become 0. The metadata keeps z_min/z_ptp so the absolute
    tile can be recovered later.
    """
    tile = np.asarray(dem_tile, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if tile.shape != m.shape:
        raise ShapeMismatchError(f"tile {tile.shape} vs mask {m.shape}")
    if not m.any():
        raise EmptyTileError("normalize_dem needs at least one valid pixel")
    z = tile[m]
    z_min = float(z.min())
    z_ptp = float(z.max()) - z_min
    normalized = (tile - z_min) / (z_ptp + cfg.epsilon)
    normalized = np.where(m, normalized, 0.0)
    meta = TileMetadata(
        source_id=source_id,
        row=row,
        col=col,
        z_min=z_min,
        z_ptp=z_ptp,
        valid_ratio=float(m.mean()),
    )
    return normalized, meta


def denormalize_dem(normalized: np.ndarray, z_min: float, z_ptp: float) -> np.ndarray:
    """Invert normalize_dem: absolute = normalized * z_ptp + z_min (meters)."""
    if z_ptp < 0.0:
        raise NegativePtpError(f"z_ptp must be >= 0, got {z_ptp}")
    return np.asarray(normalized, dtype=np.float64) * z_ptp + z_min


def split_dataset(
    ids,
    ratios=(0.8, 0.1, 0.1),
    seed: int = 0,
    by: str = "tile",
    source_ids=None,
) -> dict[str, list[str]]:
    """Deterministic seeded shuffle, then assign train/test/val slices.

    Sizes use half-up rounding per split in declaration order; the last
    split absorbs the residue. 7 ids at 80:10:10 come out as (6, 1, 0).

    ``by="strip"`` splits at the source-strip level instead (leakage-free:
    no strip spans two splits); ``source_ids`` must then map each id to
    its strip, positionally.
    """
    ids = [str(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise ValueError("tile ids must be unique")
    if len(ratios) != len(SPLIT_NAMES):
        raise BadRatiosError(f"need {len(SPLIT_NAMES)} ratios")
    if any(r < 0 for r in ratios):
        raise BadRatiosError("ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatiosError(f"ratios must sum to 1, got {sum(ratios)}")
    if by not in ("tile", "strip"):
        raise ValueError(f"unknown split unit {by!r}")

    if by == "strip":
        if source_ids is None or len(source_ids) != len(ids):
            raise ValueError("strip-level splits need one source_id per tile id")
        strips = sorted(set(str(s) for s in source_ids))
        strip_splits = _split_units(strips, ratios, seed)
        by_strip: dict[str, str] = {}
        for name, members in strip_splits.items():
            for strip in members:
                by_strip[strip] = name
        splits = {name: [] for name in SPLIT_NAMES}
        for tile_id, source in zip(ids, source_ids):
            splits[by_strip[str(source)]].append(tile_id)
        return splits

    return _split_units(ids, ratios, seed)


def _split_units(units: list[str], ratios, seed: int) -> dict[str, list[str]]:
    order = np.random.default_rng(seed).permutation(len(units))
    shuffled = [units[i] for i in order]

    n = len(units)
    sizes = []
    remaining = n
    for k, ratio in enumerate(ratios):
        if k == len(ratios) - 1:
            take = remaining
        else:
            take = min(remaining, int(math.floor(n * ratio + 0.5)))
        sizes.append(take)
        remaining -= take

    splits: dict[str, list[str]] = {}
    cursor = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        splits[name] = shuffled[cursor:cursor + size]
        cursor += size
    return splits


# --- tile store ---------------------------------------------------------------

def _tile_paths(tiles_dir: Path, tile_id: str) -> dict[str, Path]:
    return {
        "img": tiles_dir / f"{tile_id}.img.f32",
        "dem": tiles_dir / f"{tile_id}.dem.f32",
        "msk": tiles_dir / f"{tile_id}.msk.u8",
        "meta": tiles_dir / f"{tile_id}.meta.json",
    }


def make_tile_id(source_id: str, row: int, col: int) -> str:
    safe = str(source_id).replace("/", "-").replace("\\", "-").replace(" ", "-")
    return f"{safe}_{row}_{col}"


@dataclass
class TileStore:
    """An in-memory view of a tile store directory."""

    root: Path
    tile_size: int
    epsilon: float
    gamma: float
    ptp_min: float
    splits: dict[str, list[str]]
    tiles: dict[str, StoredTile]

    def ids(self, split: str) -> list[str]:
        return list(self.splits.get(split, []))

    def __len__(self) -> int:
        return len(self.tiles)


def write_tile_store(
    tiles: list[StoredTile],
    splits: dict[str, list[str]],
    out_dir,
    qc: QcConfig = QcConfig(),
    norm: NormalizationConfig = NormalizationConfig(),
) -> Path:
    """Persist tiles + manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    tiles_dir = out_dir / "tiles"
    try:
        tiles_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailureError(f"cannot create store at {out_dir}: {exc}") from exc

    known = {t.tile_id for t in tiles}
    if len(known) != len(tiles):
        raise IoFailureError("duplicate tile ids; source ids must be unique per strip")
    for name, members in splits.items():
        stray = set(members) - known
        if stray:
            raise IoFailureError(f"split {name!r} references unknown tiles: {sorted(stray)}")

    entries = []
    for tile in tiles:
        paths = _tile_paths(tiles_dir, tile.tile_id)
        tile.image.astype("<f4").tofile(paths["img"])
        tile.dem.astype("<f4").tofile(paths["dem"])
        tile.mask.astype(np.uint8).tofile(paths["msk"])
        paths["meta"].write_text(json.dumps(asdict(tile.meta), indent=1))
        entries.append({"id": tile.tile_id, **asdict(tile.meta)})

    manifest = {
        "version": MANIFEST_VERSION,
        "tile_size": qc.tile_size,
        "epsilon": norm.epsilon,
        "gamma": qc.gamma,
        "ptp_min": qc.ptp_min,
        "splits": {name: list(splits.get(name, [])) for name in SPLIT_NAMES},
        "tiles": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


def read_tile_store(store_dir) -> TileStore:
    """Load a store, verifying payload sizes against the manifest."""
    store_dir = Path(store_dir)
    manifest_path = store_dir / "manifest.json"
    if not manifest_path.exists():
        raise IoFailureError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, ValueError) as exc:
        raise IoFailureError(f"unreadable manifest: {exc}") from exc
    version = manifest.get("version")
    if version != MANIFEST_VERSION:
        raise ManifestVersionError(
            f"manifest version {version} unsupported (expected {MANIFEST_VERSION})"
        )

    t = int(manifest["tile_size"])
    n_px = t * t
    tiles_dir = store_dir / "tiles"
    tiles: dict[str, StoredTile] = {}
    for entry in manifest["tiles"]:
        tile_id = entry["id"]
        paths = _tile_paths(tiles_dir, tile_id)
        for key, expected_bytes in (("img", n_px * 4), ("dem", n_px * 4), ("msk", n_px)):
            p = paths[key]
            if not p.exists():
                raise CorruptTileError(f"{tile_id}: missing payload {p.name}")
            actual = p.stat().st_size
            if actual != expected_bytes:
                raise CorruptTileError(
                    f"{tile_id}: {p.name} holds {actual} bytes, manifest implies {expected_bytes}"
                )
        image = np.fromfile(paths["img"], dtype="<f4").reshape(t, t)
        dem = np.fromfile(paths["dem"], dtype="<f4").reshape(t, t)
        mask = np.fromfile(paths["msk"], dtype=np.uint8).reshape(t, t)
        z_min = entry.get("z_min")
        z_ptp = entry.get("z_ptp")
        meta = TileMetadata(
            source_id=entry["source_id"],
            row=int(entry["row"]),
            col=int(entry["col"]),
            z_min=float(z_min) if z_min is not None else None,
            z_ptp=float(z_ptp) if z_ptp is not None else None,
            valid_ratio=float(entry["valid_ratio"]),
        )
        tiles[tile_id] = StoredTile(tile_id, image, dem, mask, meta)

    splits = {name: list(manifest["splits"].get(name, [])) for name in SPLIT_NAMES}
    for name, members in splits.items():
        for tile_id in members:
            if tile_id not in tiles:
                raise CorruptTileError(f"split {name!r} lists unknown tile {tile_id}")

    return TileStore(
        root=store_dir,
        tile_size=t,
        epsilon=float(manifest["epsilon"]),
        gamma=float(manifest["gamma"]),
        ptp_min=float(manifest["ptp_min"]),
        splits=splits,
        tiles=tiles,
    )


def preprocess_pair(
    image: RasterGrid,
    dem: RasterGrid,
    source_id: str,
    qc: QcConfig = QcConfig(),
    norm: NormalizationConfig = NormalizationConfig(),
) -> tuple[list[StoredTile], list[tuple[int, int, RejectReason]]]:
    """Align one image/DEM pair, tile it, and produce finished tiles.

    The image is resampled onto the DEM grid (the DEM is the reference
    geometry). Returns (kept tiles, rejected (row, col, reason) triples).
    """
    dem_clean, dem_mask = sanitize_nodata(dem)
    img_clean, img_mask = sanitize_nodata(image)
    img_on_dem, img_on_dem_mask = resample_to_grid(img_clean, dem_clean, src_mask=img_mask)
    mask = (dem_mask.astype(bool) & img_on_dem_mask.astype(bool)).astype(np.uint8)

    kept: list[StoredTile] = []
    rejected: list[tuple[int, int, RejectReason]] = []
    for cand in tile_strip(img_on_dem, dem_clean, mask, qc):
        result = qc_filter(cand, qc)
        if not result.keep:
            rejected.append((cand.row, cand.col, result.reason))
            continue
        stretched = stretch_image(cand.image, cand.mask, norm)
        normalized, meta = normalize_dem(
            cand.dem, cand.mask, norm, source_id=source_id, row=cand.row, col=cand.col
        )
        tile_id = make_tile_id(source_id, cand.row, cand.col)
        kept.append(StoredTile(tile_id, stretched, normalized, cand.mask, meta))
    return kept, rejected
