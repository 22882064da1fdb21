"""Encoder-decoder elevation network with channel-attention decoder blocks.

The network maps a single-channel image to a normalized elevation map in
(0, 1). A learnable 1x1 projection lifts the grayscale input to three
channels, a backbone encoder emits a five-level feature pyramid at strides
{2, 4, 8, 16, 32}, and four decoder stages (transposed-conv upsample, skip
concat, conv + group norm + SiLU, dropout, squeeze-excitation) climb back
to stride 2; a final x2 transposed conv plus 1x1 conv and sigmoid reach
full resolution. A small MLP on the globally pooled bottleneck regresses
(standardized z_min, log1p z_ptp) as a training-time regularizer; its
output is never used at inference.

Backbones:

* ``effnet_b3``  - torchvision EfficientNet-B3 feature stages (skips at
  24/32/48/136 channels, bottleneck 384). Pretrained weights are used when
  requested and obtainable, with the first conv averaged across its RGB
  input slices; otherwise initialization falls back to the seeded default
  with a warning.
* ``tiny_unet``  - a plain conv encoder (stem plus four stride-2 levels),
  small enough for CPU tests and baseline comparisons.

Checkpoints are a torch tensor container plus a ``*.checkpoint.json``
sidecar (config, parameter count, epoch, seed, history summary).
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .errors import (
    BadConfigError,
    BadShapeError,
    ConfigMismatchError,
    CorruptCheckpointError,
    NonFiniteInputError,
)

logger = logging.getLogger(__name__)

BACKBONES = ("effnet_b3", "tiny_unet")
GROUPNORM_GROUPS = 8

TINY_UNET_CHANNELS = (16, 24, 32, 48, 64)
EFFNET_B3_CHANNELS = (24, 32, 48, 136, 384)
_EFFNET_B3_CAPTURE = (1, 2, 3, 5, 7)


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "effnet_b3"
    in_channels: int = 1
    projection_channels: int = 3
    decoder_channels: tuple[int, int, int, int] = (256, 128, 64, 32)
    se_reduction: int = 16
    dropout_p: float = 0.2
    scale_head_hidden: int = 64
    pretrained_encoder: bool = False

    def __post_init__(self):
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise BadConfigError(f"unknown backbone {self.backbone!r}")
        if self.in_channels != 1:
            raise BadConfigError("only single-channel input is supported")
        if self.projection_channels < 1:
            raise BadConfigError("projection_channels must be >= 1")
        if len(self.decoder_channels) != 4:
            raise BadConfigError("decoder needs exactly four stages")
        for c in self.decoder_channels:
            if c <= 0 or c % self.se_reduction != 0:
                raise BadConfigError(
                    f"decoder channel {c} must be a positive multiple of "
                    f"se_reduction={self.se_reduction}"
                )
            if c % GROUPNORM_GROUPS != 0:
                raise BadConfigError(
                    f"decoder channel {c} must be divisible by {GROUPNORM_GROUPS} groups"
                )
        if not 0.0 <= self.dropout_p < 1.0:
            raise BadConfigError("dropout_p must be in [0, 1)")
        if self.scale_head_hidden < 1:
            raise BadConfigError("scale_head_hidden must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["decoder_channels"] = tuple(d["decoder_channels"])
        return cls(**d)


@dataclass
class ModelOutput:
    elevation: torch.Tensor     # [B, 1, H, W] in (0, 1)
    scale_params: torch.Tensor  # [B, 2]


class SEBlock(nn.Module):
    """Squeeze-excitation: rescale channels by gates from pooled statistics."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction != 0:
            raise BadConfigError(f"channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.fc1 = nn.Linear(channels, hidden)
        self.act = nn.SiLU()
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise BadShapeError(f"SE block expects [B,C,H,W], got {tuple(x.shape)}")
        pooled = x.mean(dim=(2, 3))
        gate = torch.sigmoid(self.fc2(self.act(self.fc1(pooled))))
        return x * gate.unsqueeze(-1).unsqueeze(-1)


class DecoderStage(nn.Module):
    """x2 upsample, concat the skip, conv + GN + SiLU, dropout, SE."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int,
                 se_reduction: int, dropout_p: float):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=2, stride=2)
        self.conv = nn.Conv2d(out_channels + skip_channels, out_channels,
                              kernel_size=3, padding=1, bias=False)
        self.norm = nn.GroupNorm(GROUPNORM_GROUPS, out_channels)
        self.act = nn.SiLU()
        self.drop = nn.Dropout2d(dropout_p)
        self.se = SEBlock(out_channels, se_reduction)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.up(x)
        if x.shape[-2:] != skip.shape[-2:]:
            raise BadShapeError(
                f"upsampled {tuple(x.shape[-2:])} does not match skip {tuple(skip.shape[-2:])}"
            )
        x = torch.cat([x, skip], dim=1)
        x = self.act(self.norm(self.conv(x)))
        x = self.drop(x)
        return self.se(x)


class TinyEncoder(nn.Module):
    """Stem plus four stride-2 conv levels; pyramid at strides 2..32."""

    channels = TINY_UNET_CHANNELS

    def __init__(self, in_channels: int):
        super().__init__()
        chans = (in_channels,) + self.channels
        self.levels = nn.ModuleList()
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            self.levels.append(nn.Sequential(
                nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1, bias=False),
                nn.GroupNorm(GROUPNORM_GROUPS, c_out),
                nn.SiLU(),
                nn.Conv2d(c_out, c_out, kernel_size=3, padding=1, bias=False),
                nn.GroupNorm(GROUPNORM_GROUPS, c_out),
                nn.SiLU(),
            ))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        pyramid = []
        for level in self.levels:
            x = level(x)
            pyramid.append(x)
        return pyramid


class EffNetB3Encoder(nn.Module):
    """EfficientNet-B3 feature stages, sliced to the stride-32 bottleneck."""

    channels = EFFNET_B3_CHANNELS

    def __init__(self, in_channels: int, pretrained: bool):
        super().__init__()
        from torchvision.models import efficientnet_b3

        weights = None
        if pretrained:
            try:
                from torchvision.models import EfficientNet_B3_Weights
                weights = EfficientNet_B3_Weights.IMAGENET1K_V1
                backbone = efficientnet_b3(weights=weights)
            except Exception as exc:
                warnings.warn(
                    f"pretrained encoder weights unavailable ({exc}); "
                    "falling back to seeded random initialization"
                )
                weights = None
        if weights is None:
            backbone = efficientnet_b3(weights=None)
        elif in_channels != 3:
            # Average the stem conv across its RGB slices so the learnable
            # projection output is treated symmetrically.
            stem = backbone.features[0][0]
            with torch.no_grad():
                mean_w = stem.weight.mean(dim=1, keepdim=True)
                stem.weight.copy_(mean_w.expand_as(stem.weight))

        self.stages = nn.ModuleList(backbone.features[:_EFFNET_B3_CAPTURE[-1] + 1])
        self._capture = set(_EFFNET_B3_CAPTURE)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        pyramid = []
        for idx, stage in enumerate(self.stages):
            x = stage(x)
            if idx in self._capture:
                pyramid.append(x)
        return pyramid


class ElevationNet(nn.Module):
    """Full model: projection, encoder pyramid, SE decoder, two heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.project = nn.Conv2d(cfg.in_channels, cfg.projection_channels, kernel_size=1)

        if cfg.backbone == "tiny_unet":
            self.encoder = TinyEncoder(cfg.projection_channels)
        else:
            self.encoder = EffNetB3Encoder(cfg.projection_channels, cfg.pretrained_encoder)
        enc = self.encoder.channels  # strides (2, 4, 8, 16, 32)

        dec = cfg.decoder_channels
        ins = (enc[4], dec[0], dec[1], dec[2])
        skips = (enc[3], enc[2], enc[1], enc[0])
        self.decoder = nn.ModuleList(
            DecoderStage(i, s, o, cfg.se_reduction, cfg.dropout_p)
            for i, s, o in zip(ins, skips, dec)
        )

        head_ch = max(dec[3] // 2, 8)
        self.head_up = nn.ConvTranspose2d(dec[3], head_ch, kernel_size=2, stride=2)
        self.head_act = nn.SiLU()
        self.head_out = nn.Conv2d(head_ch, 1, kernel_size=1)

        self.scale_head = nn.Sequential(
            nn.Linear(enc[4], cfg.scale_head_hidden),
            nn.SiLU(),
            nn.Linear(cfg.scale_head_hidden, 2),
        )

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, images: torch.Tensor) -> ModelOutput:
        if images.dim() != 4 or images.shape[1] != self.cfg.in_channels:
            raise BadShapeError(
                f"expected [B,{self.cfg.in_channels},H,W], got {tuple(images.shape)}"
            )
        h, w = images.shape[-2:]
        if h % 32 != 0 or w % 32 != 0:
            raise BadShapeError(f"spatial dims must be multiples of 32, got {h}x{w}")
        if not torch.isfinite(images).all():
            raise NonFiniteInputError("input images contain NaN/Inf")

        x = self.project(images)
        pyramid = self.encoder(x)
        s2, s4, s8, s16, bottleneck = pyramid

        x = bottleneck
        for stage, skip in zip(self.decoder, (s16, s8, s4, s2)):
            x = stage(x, skip)
        elevation = torch.sigmoid(self.head_out(self.head_act(self.head_up(x))))

        pooled = bottleneck.mean(dim=(2, 3))
        scale_params = self.scale_head(pooled)
        return ModelOutput(elevation=elevation, scale_params=scale_params)


def build_model(cfg: ModelConfig, init_seed: int = 0) -> ElevationNet:
    """Construct a seeded model instance and log its parameter count."""
    cfg.validate()
    torch.manual_seed(init_seed)
    model = ElevationNet(cfg)
    logger.info("built %s model with %d parameters", cfg.backbone, model.parameter_count)
    return model


def parameter_hash(model: nn.Module) -> str:
    """SHA-256 over all parameter bytes, for determinism checks."""
    digest = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def _sidecar_path(path: Path) -> Path:
    return path.parent / (path.stem + ".checkpoint.json")


def save_checkpoint(
    model: ElevationNet,
    path,
    epoch: int | None = None,
    seed: int | None = None,
    history_summary: dict | None = None,
) -> Path:
    """Write weights plus a self-describing JSON sidecar; returns the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"state_dict": model.state_dict(), "config": model.cfg.to_dict()},
        path,
    )
    sidecar = {
        "config": model.cfg.to_dict(),
        "parameter_count": model.parameter_count,
        "epoch": epoch,
        "seed": seed,
        "history_summary": history_summary or {},
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=1))
    return path


def load_checkpoint(
    path,
    expected_config: ModelConfig | None = None,
) -> tuple[ElevationNet, dict]:
    """Rebuild a model from a checkpoint; returns (model, sidecar dict).

    Raises ConfigMismatchError when expected_config disagrees with the
    stored one, CorruptCheckpointError on unreadable or inconsistent data.
    """
    path = Path(path)
    if not path.exists():
        raise CorruptCheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        stored_cfg = ModelConfig.from_dict(payload["config"])
        state_dict = payload["state_dict"]
    except Exception as exc:  # torch raises several unrelated types here
        raise CorruptCheckpointError(f"unreadable checkpoint {path}: {exc}") from exc

    if expected_config is not None and stored_cfg != expected_config:
        raise ConfigMismatchError(
            f"checkpoint was built for {stored_cfg.backbone!r} "
            f"({stored_cfg.to_dict()}), requested {expected_config.to_dict()}"
        )

    model = ElevationNet(stored_cfg)
    try:
        model.load_state_dict(state_dict)
    except RuntimeError as exc:
        raise CorruptCheckpointError(f"state dict mismatch in {path}: {exc}") from exc

    sidecar_file = _sidecar_path(path)
    sidecar = {}
    if sidecar_file.exists():
        sidecar = json.loads(sidecar_file.read_text())
        count = sidecar.get("parameter_count")
        if count is not None and count != model.parameter_count:
            raise CorruptCheckpointError(
                f"{path}: sidecar reports {count} parameters, model has "
                f"{model.parameter_count}"
            )
    model.eval()
    return model, sidecar
