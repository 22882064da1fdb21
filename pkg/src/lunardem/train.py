"""Single-stage supervised training: Adam, per-epoch cosine annealing,
validation on held-out tiles, best/last checkpointing.

The whole run is a pure function of (model init seed, store, config seed)
in single-worker mode: data order comes from a seeded numpy generator,
dropout from the torch generator seeded at entry. Per-step loss reports
stream to ``train_log.jsonl``; per-epoch summaries land in
``history.json`` next to the checkpoints.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import EmptySplitError, NonFiniteLossError, OutOfRangeError
from .losses import CorpusStats, LossReport, LossWeights, combine_reports, composite_loss
from .model import ElevationNet, save_checkpoint
from .preprocess import TileStore


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs: int = 200
    scheduler: str = "cosine"
    lr_min: float = 0.0
    seed: int = 0
    device: str = "cpu"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    val_every: int = 1
    checkpoint_dir: str = "checkpoints"
    clip_norm: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.lr_min <= self.lr:
            raise ValueError("need 0 <= lr_min <= lr")
        if self.scheduler != "cosine":
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    lr: float
    wall_seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        h = cls(best_epoch=d["best_epoch"], best_val_loss=d["best_val_loss"])
        h.records = [EpochRecord(**r) for r in d["records"]]
        return h


def cosine_lr(step_epoch: int, cfg: TrainConfig) -> float:
    """Cosine-annealed learning rate at an epoch index in [0, epochs]."""
    if not 0 <= step_epoch <= cfg.epochs:
        raise OutOfRangeError(f"epoch {step_epoch} outside [0, {cfg.epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (
        1.0 + math.cos(math.pi * step_epoch / cfg.epochs)
    )


def tensors_for_ids(store: TileStore, ids, device="cpu"):
    """Stack store tiles into (images, dems, masks, z_min, z_ptp) tensors."""
    tiles = [store.tiles[i] for i in ids]
    images = torch.from_numpy(np.stack([t.image for t in tiles])).unsqueeze(1)
    dems = torch.from_numpy(np.stack([t.dem for t in tiles])).unsqueeze(1)
    masks = torch.from_numpy(np.stack([t.mask for t in tiles]).astype(np.float32)).unsqueeze(1)
    z_min = np.array([t.meta.z_min for t in tiles], dtype=np.float64)
    z_ptp = np.array([t.meta.z_ptp for t in tiles], dtype=np.float64)
    return (images.to(device), dems.to(device), masks.to(device), z_min, z_ptp)


def _batches(ids: list[str], batch_size: int):
    for start in range(0, len(ids), batch_size):
        yield ids[start:start + batch_size]


def corpus_stats_for_split(store: TileStore, split: str) -> CorpusStats:
    ids = store.ids(split)
    if not ids:
        raise EmptySplitError(f"split {split!r} is empty")
    return CorpusStats.from_z_mins([store.tiles[i].meta.z_min for i in ids])


def evaluate(
    model: ElevationNet,
    store: TileStore,
    split: str,
    weights: LossWeights = LossWeights(),
    batch_size: int = 32,
    corpus_stats: CorpusStats | None = None,
    device: str = "cpu",
) -> LossReport:
    """Eval-mode composite loss over a split, weighted by sample count."""
    ids = store.ids(split)
    if not ids:
        raise EmptySplitError(f"split {split!r} is empty")
    model.eval()
    reports, counts = [], []
    with torch.no_grad():
        for batch_ids in _batches(ids, batch_size):
            images, dems, masks, z_min, z_ptp = tensors_for_ids(store, batch_ids, device)
            out = model(images)
            kwargs = {}
            if corpus_stats is not None:
                kwargs = {"scale_params": out.scale_params, "z_min": z_min,
                          "z_ptp": z_ptp, "corpus_stats": corpus_stats}
            _, report = composite_loss(out.elevation, dems, masks, weights, **kwargs)
            reports.append(report)
            counts.append(len(batch_ids))
    return combine_reports(reports, counts)


def train(
    model: ElevationNet,
    store: TileStore,
    cfg: TrainConfig,
) -> tuple[Path, TrainHistory]:
    """Run the full training loop; returns (best checkpoint path, history)."""
    train_ids = store.ids("train")
    val_ids = store.ids("val")
    if not train_ids:
        raise EmptySplitError("train split is empty")
    if not val_ids:
        raise EmptySplitError("val split is empty")

    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = ckpt_dir / "train_log.jsonl"

    torch.manual_seed(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)

    device = cfg.device
    model.to(device)
    stats = corpus_stats_for_split(store, "train")
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                 weight_decay=cfg.weight_decay)

    history = TrainHistory()
    best_path = ckpt_dir / "best.pt"
    step = 0
    with log_path.open("w") as log:
        for epoch in range(cfg.epochs):
            epoch_start = time.time()
            lr = cosine_lr(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr

            model.train()
            perm = order_rng.permutation(len(train_ids))
            shuffled = [train_ids[i] for i in perm]
            epoch_reports, epoch_counts = [], []
            for batch_ids in _batches(shuffled, cfg.batch_size):
                images, dems, masks, z_min, z_ptp = tensors_for_ids(store, batch_ids, device)
                optimizer.zero_grad()
                out = model(images)
                total, report = composite_loss(
                    out.elevation, dems, masks, cfg.loss_weights,
                    scale_params=out.scale_params, z_min=z_min, z_ptp=z_ptp,
                    corpus_stats=stats,
                )
                if not math.isfinite(report.total):
                    raise NonFiniteLossError(
                        f"non-finite loss at step {step} (epoch {epoch}); "
                        f"offending tiles: {batch_ids}",
                        tile_ids=batch_ids,
                    )
                total.backward()
                if cfg.clip_norm is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
                optimizer.step()

                log.write(json.dumps({"step": step, "epoch": epoch, "lr": lr,
                                      **report.to_json_dict()}) + "\n")
                epoch_reports.append(report)
                epoch_counts.append(len(batch_ids))
                step += 1

            train_loss = combine_reports(epoch_reports, epoch_counts).total

            val_loss = None
            if (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1:
                val_loss = evaluate(model, store, "val", cfg.loss_weights,
                                    cfg.batch_size, stats, device).total
                if val_loss < history.best_val_loss:
                    history.best_val_loss = val_loss
                    history.best_epoch = epoch
                    save_checkpoint(model, best_path, epoch=epoch, seed=cfg.seed,
                                    history_summary={"val_loss": val_loss})

            record = EpochRecord(
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                lr=lr,
                wall_seconds=time.time() - epoch_start,
            )
            history.records.append(record)
            log.write(json.dumps({"epoch_summary": asdict(record)}) + "\n")

    save_checkpoint(model, ckpt_dir / "last.pt", epoch=cfg.epochs - 1, seed=cfg.seed,
                    history_summary={"best_val_loss": history.best_val_loss})
    (ckpt_dir / "history.json").write_text(json.dumps(history.to_dict(), indent=1))
    return best_path, history
