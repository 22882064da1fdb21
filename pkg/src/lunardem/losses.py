"""Composite training objective: masked L1 + gradient matching + SSIM,
plus an auxiliary L1 on the scale-head outputs.

All components are per-sample means (pixel statistics inside a sample,
then an unweighted mean over the batch), which makes sample-count-weighted
aggregation across batches exact. Inputs may be [H,W], [B,H,W] or
[B,1,H,W]; everything runs in the dtype it is given, so float64 probes
work for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyMaskError, MissingStatsError, TooSmallError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_DYNAMIC_RANGE = 1.0   # losses operate on the normalized [0, 1] domain


@dataclass(frozen=True)
class LossWeights:
    alpha_l1: float = 1.0
    alpha_grad: float = 1.0
    alpha_ssim: float = 1.0
    alpha_scale: float = 0.1

    def __post_init__(self):
        for name in ("alpha_l1", "alpha_grad", "alpha_ssim", "alpha_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossReport:
    """Scalar component values for one step or one evaluation pass."""

    total: float
    l1: float
    grad: float
    ssim: float
    scale: float

    def to_json_dict(self) -> dict:
        return {"total": self.total, "l1": self.l1, "grad": self.grad,
                "ssim": self.ssim, "scale": self.scale}


@dataclass(frozen=True)
class CorpusStats:
    """Standardization constants for the scale-head targets."""

    z_min_mean: float
    z_min_std: float

    @classmethod
    def from_z_mins(cls, z_mins) -> "CorpusStats":
        arr = np.asarray(list(z_mins), dtype=np.float64)
        if arr.size == 0:
            raise MissingStatsError("cannot compute corpus stats from zero tiles")
        std = float(arr.std())
        return cls(z_min_mean=float(arr.mean()), z_min_std=max(std, 1e-6))


def scale_targets(z_min, z_ptp, stats: CorpusStats, dtype=torch.float32) -> torch.Tensor:
    """Stack (standardized z_min, log1p(z_ptp)) as a [B, 2] tensor."""
    z_min = torch.as_tensor(np.asarray(z_min, dtype=np.float64))
    z_ptp = torch.as_tensor(np.asarray(z_ptp, dtype=np.float64))
    t0 = (z_min - stats.z_min_mean) / stats.z_min_std
    t1 = torch.log1p(z_ptp)
    return torch.stack([t0, t1], dim=-1).to(dtype)


def _as_bchw(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x.unsqueeze(0).unsqueeze(0)
    if x.dim() == 3:
        return x.unsqueeze(1)
    if x.dim() == 4:
        return x
    raise ValueError(f"expected 2-4 dims, got {x.dim()}")


def _prep(pred, target, mask):
    pred = _as_bchw(torch.as_tensor(pred))
    target = _as_bchw(torch.as_tensor(target)).to(pred.dtype)
    if mask is None:
        mask = torch.ones_like(pred)
    else:
        mask = _as_bchw(torch.as_tensor(mask)).to(pred.dtype)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
            f"mask {tuple(mask.shape)}"
        )
    return pred, target, mask


def l1_loss(pred, target, mask=None) -> torch.Tensor:
    """Mean absolute error over valid pixels, averaged across the batch."""
    pred, target, mask = _prep(pred, target, mask)
    counts = mask.sum(dim=(1, 2, 3))
    if (counts == 0).any():
        raise EmptyMaskError("a sample has no valid pixels")
    per_sample = ((pred - target).abs() * mask).sum(dim=(1, 2, 3)) / counts
    return per_sample.mean()


def gradient_loss(pred, target, mask=None) -> torch.Tensor:
    """Forward-difference gradient matching.

    For each sample: mean |d/dx pred - d/dx target| over x-stencils whose
    two pixels are both valid, plus the same for y. A direction with no
    valid stencil contributes zero; a sample with neither raises.
    """
    pred, target, mask = _prep(pred, target, mask)
    if pred.shape[-1] < 2 or pred.shape[-2] < 2:
        raise TooSmallError("gradient_loss needs tiles of at least 2x2")

    diff = pred - target
    gx = (diff[:, :, :, 1:] - diff[:, :, :, :-1]).abs()
    gy = (diff[:, :, 1:, :] - diff[:, :, :-1, :]).abs()
    mx = mask[:, :, :, 1:] * mask[:, :, :, :-1]
    my = mask[:, :, 1:, :] * mask[:, :, :-1, :]

    nx = mx.sum(dim=(1, 2, 3))
    ny = my.sum(dim=(1, 2, 3))
    if ((nx == 0) & (ny == 0)).any():
        raise EmptyMaskError("a sample has no valid gradient stencils")
    term_x = (gx * mx).sum(dim=(1, 2, 3)) / nx.clamp(min=1)
    term_y = (gy * my).sum(dim=(1, 2, 3)) / ny.clamp(min=1)
    return (term_x + term_y).mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
                    dtype=torch.float64) -> torch.Tensor:
    """Normalized 2-D Gaussian kernel of shape [1, 1, size, size]."""
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kernel = torch.outer(g, g)
    kernel = kernel / kernel.sum()
    return kernel.unsqueeze(0).unsqueeze(0)


def ssim_loss(pred, target) -> torch.Tensor:
    """1 - mean local SSIM over all fully-interior Gaussian windows.

    Window statistics use an 11x11 Gaussian (sigma 1.5) in valid mode (no
    padding), with the standard stabilizers for a unit dynamic range.
    Result lies in [0, 2].
    """
    pred = _as_bchw(torch.as_tensor(pred))
    target = _as_bchw(torch.as_tensor(target)).to(pred.dtype)
    if pred.shape != target.shape:
        raise ValueError("pred/target shape mismatch")
    if pred.shape[-1] < SSIM_WINDOW or pred.shape[-2] < SSIM_WINDOW:
        raise TooSmallError(
            f"ssim_loss needs tiles of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )
    window = gaussian_window(dtype=pred.dtype).to(pred.device)
    c1 = (SSIM_K1 * SSIM_DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_DYNAMIC_RANGE) ** 2

    # Remove the per-sample DC component before the windowed moments; the
    # moments are shift-invariant and this avoids float32 cancellation in
    # the E[x^2] - E[x]^2 form (constant tiles get exactly zero variance).
    dc_p = pred.mean(dim=(1, 2, 3), keepdim=True)
    dc_t = target.mean(dim=(1, 2, 3), keepdim=True)
    pc = pred - dc_p
    tc = target - dc_t

    mu_pc = F.conv2d(pc, window)
    mu_tc = F.conv2d(tc, window)
    mu_p = mu_pc + dc_p
    mu_t = mu_tc + dc_t
    var_p = F.conv2d(pc * pc, window) - mu_pc * mu_pc
    var_t = F.conv2d(tc * tc, window) - mu_tc * mu_tc
    cov = F.conv2d(pc * tc, window) - mu_pc * mu_tc

    ssim_map = ((2 * mu_p * mu_t + c1) * (2 * cov + c2)) / (
        (mu_p * mu_p + mu_t * mu_t + c1) * (var_p + var_t + c2)
    )
    per_sample = ssim_map.mean(dim=(1, 2, 3))
    return (1.0 - per_sample).mean()


def scale_loss(pred_params: torch.Tensor, z_min, z_ptp,
               stats: CorpusStats | None) -> torch.Tensor:
    """Mean L1 between predicted and target (standardized z_min, log1p z_ptp)."""
    if stats is None:
        raise MissingStatsError("scale_loss needs corpus statistics")
    pred_params = torch.as_tensor(pred_params)
    if pred_params.dim() != 2 or pred_params.shape[1] != 2:
        raise ValueError(f"pred_params must be [B, 2], got {tuple(pred_params.shape)}")
    targets = scale_targets(z_min, z_ptp, stats, dtype=pred_params.dtype)
    targets = targets.to(pred_params.device)
    if targets.shape != pred_params.shape:
        raise ValueError("scale targets do not match pred_params batch")
    return (pred_params - targets).abs().mean()


def composite_loss(
    elevation: torch.Tensor,
    target: torch.Tensor,
    mask=None,
    weights: LossWeights = LossWeights(),
    scale_params: torch.Tensor | None = None,
    z_min=None,
    z_ptp=None,
    corpus_stats: CorpusStats | None = None,
) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum of the component losses.

    Returns the differentiable total plus a LossReport whose ``total`` is
    recomputed from the reported component floats, so the weighted-sum
    decomposition holds to float64 precision regardless of tensor dtype.
    The scale term participates only when scale_params and per-tile
    z_min/z_ptp targets are supplied.
    """
    l1 = l1_loss(elevation, target, mask)
    grad = gradient_loss(elevation, target, mask)
    ssim = ssim_loss(elevation, target)

    use_scale = scale_params is not None and z_min is not None and z_ptp is not None
    if use_scale and weights.alpha_scale > 0:
        scale = scale_loss(scale_params, z_min, z_ptp, corpus_stats)
    else:
        scale = torch.zeros((), dtype=l1.dtype, device=l1.device)

    total = (weights.alpha_l1 * l1 + weights.alpha_grad * grad
             + weights.alpha_ssim * ssim + weights.alpha_scale * scale)

    l1_v, grad_v, ssim_v, scale_v = (float(t.item()) for t in (l1, grad, ssim, scale))
    report = LossReport(
        total=(weights.alpha_l1 * l1_v + weights.alpha_grad * grad_v
               + weights.alpha_ssim * ssim_v + weights.alpha_scale * scale_v),
        l1=l1_v,
        grad=grad_v,
        ssim=ssim_v,
        scale=scale_v,
    )
    return total, report


def combine_reports(reports: list[LossReport], counts: list[int]) -> LossReport:
    """Sample-count-weighted mean of per-batch reports."""
    if not reports or sum(counts) == 0:
        raise EmptyMaskError("nothing to combine")
    n = float(sum(counts))
    agg = {}
    for key in ("total", "l1", "grad", "ssim", "scale"):
        agg[key] = sum(getattr(r, key) * c for r, c in zip(reports, counts)) / n
    return LossReport(**agg)
