"""Inference modes and evaluation metrics.

Two ways to read a prediction:

* relative - the raw sigmoid output in (0, 1); shape and ordering are
  meaningful, absolute scale is not. Needs nothing but the image.
* absolute - the relative map rescaled through the stored per-tile
  (z_min, z_ptp) statistics, giving meters. A post-processing step only;
  the network never sees the statistics.

Metrics: MAE in meters (absolute mode) and per-tile nRMSE, the RMSE
normalized by the ground-truth tile range, averaged over tiles. Tiles with
a degenerate truth range have no defined nRMSE and are counted as skipped.
Profile extraction samples both DEMs along a line segment for the
comparison figures.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .errors import (
    EmptyMaskError,
    EmptySplitError,
    IoFailureError,
    MissingMetadataError,
    NegativePtpError,
    OutOfBoundsError,
)
from .model import ElevationNet
from .preprocess import TileStore
from .train import tensors_for_ids

NRMSE_RANGE_FLOOR = 1e-9


def predict_relative(model: ElevationNet, image: np.ndarray, device: str = "cpu") -> np.ndarray:
    """Eval-mode forward pass; returns the elevation channel as numpy.

    Accepts one stretched tile [H, W] or a batch [B, H, W]; the scale-head
    output is discarded.
    """
    arr = np.asarray(image, dtype=np.float32)
    single = arr.ndim == 2
    if single:
        arr = arr[None, ...]
    tensor = torch.from_numpy(arr).unsqueeze(1).to(device)
    model.eval()
    with torch.no_grad():
        out = model(tensor)
    rel = out.elevation.squeeze(1).cpu().numpy().astype(np.float64)
    return rel[0] if single else rel


def predict_absolute(relative: np.ndarray, z_min: float, z_ptp: float) -> np.ndarray:
    """Rescale a relative DEM into meters: rel * z_ptp + z_min."""
    if z_ptp < 0:
        raise NegativePtpError(f"z_ptp must be >= 0, got {z_ptp}")
    return np.asarray(relative, dtype=np.float64) * z_ptp + z_min


def mae(pred: np.ndarray, truth: np.ndarray, mask=None) -> float:
    """Mean absolute error over valid pixels."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    m = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if p.shape != t.shape or p.shape != m.shape:
        raise ValueError("pred/truth/mask shapes must match")
    if not m.any():
        raise EmptyMaskError("mae needs at least one valid pixel")
    return float(np.abs(p[m] - t[m]).mean())


def nrmse_tile(pred: np.ndarray, truth: np.ndarray, mask=None) -> float | None:
    """RMSE over valid pixels divided by the truth range; None if undefined."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    m = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if p.shape != t.shape or p.shape != m.shape:
        raise ValueError("pred/truth/mask shapes must match")
    if not m.any():
        raise EmptyMaskError("nrmse needs at least one valid pixel")
    tv = t[m]
    rng = float(tv.max() - tv.min())
    if rng < NRMSE_RANGE_FLOOR:
        return None
    rmse = float(np.sqrt(np.mean((p[m] - tv) ** 2)))
    return rmse / rng


@dataclass
class MetricsReport:
    mode: str
    mae_m: float | None
    per_tile_nrmse: list[float]
    mean_nrmse: float | None
    n_tiles: int
    n_skipped: int

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "mae_m": self.mae_m,
            "per_tile_nrmse": self.per_tile_nrmse,
            "mean_nrmse": self.mean_nrmse,
            "n_tiles": self.n_tiles,
            "n_skipped": self.n_skipped,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json_dict(), indent=1))
        return path


class ConstantPredictor:
    """Baseline that predicts one constant relative elevation everywhere."""

    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        return torch.full_like(images, self.value)


def mean_train_elevation(store: TileStore, split: str = "train") -> float:
    """Mean normalized elevation across a split (the climatology constant)."""
    ids = store.ids(split)
    if not ids:
        raise EmptySplitError(f"split {split!r} is empty")
    return float(np.mean([store.tiles[i].dem.mean() for i in ids]))


def _predict_batch(model, images: torch.Tensor) -> torch.Tensor:
    if isinstance(model, ElevationNet):
        model.eval()
        with torch.no_grad():
            return model(images).elevation
    # Callable predictor (stubs, baselines): images -> elevation tensor.
    with torch.no_grad():
        return model(images)


def evaluate_store(
    model,
    store: TileStore,
    split: str,
    mode: str = "relative",
    batch_size: int = 32,
    device: str = "cpu",
) -> MetricsReport:
    """Predict every tile of a split and aggregate MAE / per-tile nRMSE.

    Relative mode compares normalized maps and reports no MAE in meters.
    Absolute mode rescales prediction and truth through the stored tile
    statistics first; missing statistics raise MissingMetadataError.
    """
    if mode not in ("relative", "absolute"):
        raise ValueError(f"unknown mode {mode!r}")
    ids = store.ids(split)
    if not ids:
        raise EmptySplitError(f"split {split!r} is empty")

    if mode == "absolute":
        for tile_id in ids:
            meta = store.tiles[tile_id].meta
            if (meta.z_min is None or meta.z_ptp is None
                    or not math.isfinite(meta.z_min) or not math.isfinite(meta.z_ptp)):
                raise MissingMetadataError(
                    f"tile {tile_id} lacks z_min/z_ptp; absolute mode impossible"
                )

    per_tile_nrmse: list[float] = []
    n_skipped = 0
    abs_errors_sum = 0.0
    abs_errors_n = 0

    for start in range(0, len(ids), batch_size):
        batch_ids = ids[start:start + batch_size]
        images, dems, masks, z_min, z_ptp = tensors_for_ids(store, batch_ids, device)
        rel = _predict_batch(model, images).squeeze(1).cpu().numpy().astype(np.float64)
        truth = dems.squeeze(1).cpu().numpy().astype(np.float64)
        mask = masks.squeeze(1).cpu().numpy().astype(bool)

        for k, tile_id in enumerate(batch_ids):
            p, t, m = rel[k], truth[k], mask[k]
            if mode == "absolute":
                p = predict_absolute(p, float(z_min[k]), float(z_ptp[k]))
                t = predict_absolute(t, float(z_min[k]), float(z_ptp[k]))
                abs_errors_sum += np.abs(p[m] - t[m]).sum()
                abs_errors_n += int(m.sum())
            value = nrmse_tile(p, t, m)
            if value is None:
                n_skipped += 1
            else:
                per_tile_nrmse.append(value)

    mean_nrmse = float(np.mean(per_tile_nrmse)) if per_tile_nrmse else None
    mae_m = abs_errors_sum / abs_errors_n if mode == "absolute" and abs_errors_n else None
    return MetricsReport(
        mode=mode,
        mae_m=mae_m,
        per_tile_nrmse=per_tile_nrmse,
        mean_nrmse=mean_nrmse,
        n_tiles=len(ids),
        n_skipped=n_skipped,
    )


@dataclass
class ElevationProfile:
    distance_m: np.ndarray
    truth: np.ndarray
    pred: np.ndarray
    units: str = "m"   # "m" or "relative"

    def __post_init__(self):
        if not (len(self.distance_m) == len(self.truth) == len(self.pred)):
            raise ValueError("profile sequences must share one length")
        if len(self.distance_m) > 1 and not np.all(np.diff(self.distance_m) > 0):
            raise ValueError("distance must be strictly increasing")


def _bilinear_at(values: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = values.shape
    r0 = np.clip(np.floor(rows), 0, max(h - 2, 0)).astype(np.int64)
    c0 = np.clip(np.floor(cols), 0, max(w - 2, 0)).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = np.clip(rows - r0, 0.0, 1.0)
    fc = np.clip(cols - c0, 0.0, 1.0)
    top = values[r0, c0] * (1 - fc) + values[r0, c1] * fc
    bot = values[r1, c0] * (1 - fc) + values[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def extract_profile(
    truth_tile: np.ndarray,
    pred_tile: np.ndarray,
    line: tuple[float, float, float, float],
    pixel_scale: float = 1.0,
    units: str = "m",
) -> ElevationProfile:
    """Sample both tiles along (r0, c0) -> (r1, c1) at one-pixel steps.

    Endpoints are in array-index space and must lie inside the tile.
    """
    truth = np.asarray(truth_tile, dtype=np.float64)
    pred = np.asarray(pred_tile, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ValueError("truth and pred tiles must share a shape")
    r0, c0, r1, c1 = (float(v) for v in line)
    h, w = truth.shape
    for r, c in ((r0, c0), (r1, c1)):
        if not (0 <= r <= h - 1 and 0 <= c <= w - 1):
            raise OutOfBoundsError(f"endpoint ({r}, {c}) outside tile {h}x{w}")

    length = math.hypot(r1 - r0, c1 - c0)
    n = int(math.floor(length + 1e-9)) + 1
    if length == 0:
        rows = np.array([r0])
        cols = np.array([c0])
    else:
        steps = np.arange(n, dtype=np.float64)
        rows = r0 + steps * (r1 - r0) / length
        cols = c0 + steps * (c1 - c0) / length
    return ElevationProfile(
        distance_m=np.arange(n, dtype=np.float64) * pixel_scale,
        truth=_bilinear_at(truth, rows, cols),
        pred=_bilinear_at(pred, rows, cols),
        units=units,
    )


def profile_to_csv(profile: ElevationProfile, path) -> Path:
    path = Path(path)
    lines = ["distance_m,truth,pred"]
    for d, t, p in zip(profile.distance_m, profile.truth, profile.pred):
        lines.append(f"{float(d)!r},{float(t)!r},{float(p)!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def render_profile_figure(profile: ElevationProfile, out_path, mode: str = "relative") -> Path:
    """Plot truth vs prediction along the profile; format by extension."""
    if mode not in ("relative", "absolute"):
        raise ValueError(f"unknown mode {mode!r}")
    out_path = Path(out_path)
    matplotlib.rcParams["svg.hashsalt"] = "lunardem"
    matplotlib.rcParams["svg.fonttype"] = "none"
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(profile.distance_m, profile.truth, color="green", label="ground truth")
    ax.plot(profile.distance_m, profile.pred, color="red", label="prediction")
    ax.set_xlabel("distance (m)")
    if mode == "relative":
        ax.set_ylabel("relative elevation [0-1]")
    else:
        ax.set_ylabel("elevation (m)")
    ax.set_title(f"Elevation profile ({mode} mode)")
    ax.legend()
    fig.tight_layout()
    metadata = {"Date": None} if out_path.suffix == ".svg" else {"Software": "lunardem"}
    try:
        fig.savefig(out_path, metadata=metadata)
    except OSError as exc:
        raise IoFailureError(f"cannot write figure {out_path}: {exc}") from exc
    finally:
        plt.close(fig)
    if not out_path.exists() or out_path.stat().st_size == 0:
        raise IoFailureError(f"figure {out_path} was not written")
    return out_path
