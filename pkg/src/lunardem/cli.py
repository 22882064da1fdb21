"""One executable, six subcommands:

    lunardem synth       make a synthetic tile store
    lunardem preprocess  build a tile store from raw image/DEM pairs
    lunardem train       train the elevation network on a store
    lunardem eval        compute MAE / nRMSE over a split
    lunardem infer       predict a DEM for one image
    lunardem profile     emit an elevation-profile CSV + figure

Options resolve as flag > config file > built-in default. The config file
is INI-style with sections mirroring the library configs ([qc],
[normalize], [synth], [model], [train], [loss], [paths], [run]); unknown
keys are rejected. Every run writes a ``run.json`` (resolved parameters,
seed, version, wall time) next to its outputs, sufficient to replay the
command.

Exit codes: 0 ok, 2 usage, 3 io, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    CorruptCheckpointError,
    CorruptTileError,
    IoFailureError,
    LunarDemError,
    ManifestVersionError,
    MissingFileError,
    NonFiniteLossError,
    UnsupportedBandCountError,
    UnsupportedBitDepthError,
)
from .losses import LossWeights
from .model import ModelConfig, build_model, load_checkpoint
from .preprocess import (
    NormalizationConfig,
    QcConfig,
    preprocess_pair,
    read_tile_store,
    split_dataset,
    stretch_image,
    write_tile_store,
)
from .raster_io import RasterGrid, read_raster, sanitize_nodata, write_raster
from .synthgen import DatasetRanges, make_dataset
from .train import TrainConfig, train
from . import infer_metrics

logger = logging.getLogger("lunardem")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_IO_ERRORS = (
    MissingFileError,
    IoFailureError,
    CorruptTileError,
    ManifestVersionError,
    CorruptCheckpointError,
    UnsupportedBandCountError,
    UnsupportedBitDepthError,
    OSError,
)


@dataclass(frozen=True)
class Opt:
    dest: str
    type: object = str
    default: object = None
    section: str | None = None
    help: str = ""
    is_flag: bool = False
    required: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.dest.replace("_", "-")


def _ratio_triple(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 3:
        raise ValueError("expected three comma-separated ratios")
    return tuple(parts)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in str(text).split(","))


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    return str(text).strip().lower() in ("1", "true", "yes", "on")


_COMMON_SEED = Opt("seed", int, 0, "run", "global random seed")

_OPTS: dict[str, list[Opt]] = {
    "synth": [
        Opt("n", int, None, "synth", "number of synthetic pairs", required=True),
        Opt("out", str, None, "paths", "output store directory", required=True),
        _COMMON_SEED,
        Opt("tile_size", int, 64, "qc", "tile edge length (multiple of 32)"),
        Opt("pixel_scale", float, 5.0, "synth", "meters per pixel"),
        Opt("amp_min", float, 10.0, "synth", "terrain amplitude lower bound (m)"),
        Opt("amp_max", float, 60.0, "synth", "terrain amplitude upper bound (m)"),
        Opt("az_min", float, 300.0, "synth", "sun azimuth lower bound (deg)"),
        Opt("az_max", float, 330.0, "synth", "sun azimuth upper bound (deg)"),
        Opt("el_min", float, 30.0, "synth", "sun elevation lower bound (deg)"),
        Opt("el_max", float, 60.0, "synth", "sun elevation upper bound (deg)"),
        Opt("craters_max", int, 3, "synth", "max craters per tile"),
        Opt("noise_std", float, 0.02, "synth", "albedo noise std"),
        Opt("split_ratios", _ratio_triple, (0.8, 0.1, 0.1), "run", "train,test,val"),
    ],
    "preprocess": [
        Opt("pairs", str, None, "paths", "CSV of image_path,dem_path,source_id", required=True),
        Opt("out", str, None, "paths", "output store directory", required=True),
        _COMMON_SEED,
        Opt("tile_size", int, 512, "qc", "tile edge length (multiple of 32)"),
        Opt("gamma", float, 0.05, "qc", "minimum valid-area ratio"),
        Opt("ptp_min", float, 1.0, "qc", "minimum elevation ptp (m)"),
        Opt("pct_low", float, 1.0, "normalize", "stretch lower percentile"),
        Opt("pct_high", float, 99.0, "normalize", "stretch upper percentile"),
        Opt("epsilon", float, 1e-3, "normalize", "DEM rescale epsilon (m)"),
        Opt("split_ratios", _ratio_triple, (0.8, 0.1, 0.1), "run", "train,test,val"),
        Opt("split_by", str, "tile", "run", "split unit: tile | strip"),
    ],
    "train": [
        Opt("store", str, None, "paths", "tile store directory", required=True),
        Opt("checkpoint_dir", str, "checkpoints", "paths", "where checkpoints go"),
        _COMMON_SEED,
        Opt("backbone", str, "effnet_b3", "model", "effnet_b3 | tiny_unet"),
        Opt("decoder_channels", _int_tuple, (256, 128, 64, 32), "model", "4 widths"),
        Opt("se_reduction", int, 16, "model", "squeeze-excitation reduction"),
        Opt("dropout_p", float, 0.2, "model", "decoder dropout probability"),
        Opt("scale_head_hidden", int, 64, "model", "scale head hidden width"),
        Opt("pretrained", _bool, False, "model", "try pretrained encoder weights",
            is_flag=True),
        Opt("lr", float, 5e-5, "train", "peak learning rate"),
        Opt("weight_decay", float, 1e-5, "train", "Adam weight decay"),
        Opt("batch_size", int, 32, "train", "tiles per batch"),
        Opt("epochs", int, 200, "train", "training epochs"),
        Opt("lr_min", float, 0.0, "train", "cosine floor"),
        Opt("val_every", int, 1, "train", "validate every N epochs"),
        Opt("clip_norm", float, None, "train", "gradient clipping norm"),
        Opt("device", str, "cpu", "train", "torch device"),
        Opt("alpha_l1", float, 1.0, "loss", "L1 weight"),
        Opt("alpha_grad", float, 1.0, "loss", "gradient weight"),
        Opt("alpha_ssim", float, 1.0, "loss", "SSIM weight"),
        Opt("alpha_scale", float, 0.1, "loss", "scale head weight"),
    ],
    "eval": [
        Opt("store", str, None, "paths", "tile store directory", required=True),
        Opt("checkpoint", str, None, "paths", "model checkpoint (.pt)", required=True),
        Opt("split", str, "test", "run", "train | test | val"),
        Opt("mode", str, "relative", "run", "relative | absolute"),
        Opt("out", str, "metrics.json", "paths", "metrics JSON path"),
        Opt("batch_size", int, 32, "train", "tiles per batch"),
        Opt("device", str, "cpu", "train", "torch device"),
        _COMMON_SEED,
    ],
    "infer": [
        Opt("image", str, None, "paths", "input raster (TIFF or .f32)", required=True),
        Opt("checkpoint", str, None, "paths", "model checkpoint (.pt)", required=True),
        Opt("out", str, None, "paths", "output raster path", required=True),
        Opt("zmin", float, None, None, "tile minimum elevation (m) for absolute output"),
        Opt("zptp", float, None, None, "tile elevation range (m) for absolute output"),
        Opt("meta", str, None, None, "tile .meta.json carrying z_min/z_ptp"),
        Opt("pct_low", float, 1.0, "normalize", "stretch lower percentile"),
        Opt("pct_high", float, 99.0, "normalize", "stretch upper percentile"),
        Opt("device", str, "cpu", "train", "torch device"),
        _COMMON_SEED,
    ],
    "profile": [
        Opt("store", str, None, "paths", "tile store directory", required=True),
        Opt("checkpoint", str, None, "paths", "model checkpoint (.pt)", required=True),
        Opt("tile", str, None, None, "tile id inside the store", required=True),
        Opt("line", str, None, None, "r0,c0,r1,c1 in pixels", required=True),
        Opt("mode", str, "relative", "run", "relative | absolute"),
        Opt("pixel_scale", float, 5.0, "synth", "meters per pixel"),
        Opt("out_prefix", str, "profile", "paths", "output prefix for .csv and figure"),
        Opt("figure_format", str, "png", "run", "png | svg"),
        Opt("device", str, "cpu", "train", "torch device"),
        _COMMON_SEED,
    ],
}

_KNOWN_CONFIG_KEYS: dict[str, set[str]] = {}
for _opts in _OPTS.values():
    for _o in _opts:
        if _o.section is not None:
            _KNOWN_CONFIG_KEYS.setdefault(_o.section, set()).add(_o.dest)


def _load_config(path: str | None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path is None:
        return parser
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"config file not found: {p}")
    parser.read(p)
    for section in parser.sections():
        if section not in _KNOWN_CONFIG_KEYS:
            raise LunarDemError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _KNOWN_CONFIG_KEYS[section]:
                raise LunarDemError(f"unknown config key [{section}] {key}")
    return parser


def _resolve(args: argparse.Namespace, config: configparser.ConfigParser,
             opts: list[Opt]) -> dict:
    resolved = {}
    for opt in opts:
        value = getattr(args, opt.dest, None)
        if value is None and opt.section and config.has_option(opt.section, opt.dest):
            raw = config.get(opt.section, opt.dest)
            value = _bool(raw) if opt.is_flag else opt.type(raw)
        if value is None:
            value = opt.default
        if value is None and opt.required:
            raise LunarDemError(f"missing required option {opt.flag}")
        resolved[opt.dest] = value
    return resolved


def _add_opts(sub: argparse.ArgumentParser, opts: list[Opt]) -> None:
    for opt in opts:
        if opt.is_flag:
            sub.add_argument(opt.flag, dest=opt.dest, action="store_const",
                             const=True, default=None, help=opt.help)
        else:
            sub.add_argument(opt.flag, dest=opt.dest, type=opt.type, default=None,
                             help=opt.help)


def version_string() -> str:
    v = __version__
    try:
        proc = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=3,
            cwd=Path(__file__).resolve().parent,
        )
        if proc.returncode == 0 and proc.stdout.strip():
            v += "+g" + proc.stdout.strip()
    except Exception:
        pass
    return v


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    return value


def write_run_json(out_dir: Path, command: str, params: dict, wall_seconds: float) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "params": {k: _jsonable(v) for k, v in params.items()},
        "seed": params.get("seed"),
        "version": version_string(),
        "wall_seconds": wall_seconds,
    }
    path = out_dir / "run.json"
    path.write_text(json.dumps(payload, indent=1))
    return path


# --- subcommand bodies ---------------------------------------------------------

def cmd_synth(params: dict) -> int:
    if params["n"] <= 0:
        print("error: --n must be a positive integer", file=sys.stderr)
        return EXIT_USAGE
    started = time.time()
    ranges = DatasetRanges(
        amplitude=(params["amp_min"], params["amp_max"]),
        crater_count=(0, params["craters_max"]),
        sun_azimuth=(params["az_min"], params["az_max"]),
        sun_elevation=(params["el_min"], params["el_max"]),
        albedo_noise_std=params["noise_std"],
    )
    manifest = make_dataset(
        n_pairs=params["n"],
        out_dir=params["out"],
        seed=params["seed"],
        tile_size=params["tile_size"],
        pixel_scale=params["pixel_scale"],
        ranges=ranges,
        split_ratios=params["split_ratios"],
    )
    store = read_tile_store(Path(params["out"]))
    print(f"wrote {len(store)} tiles to {params['out']}")
    for name in ("train", "test", "val"):
        print(f"  {name}: {len(store.ids(name))}")
    write_run_json(Path(params["out"]), "synth", params, time.time() - started)
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_preprocess(params: dict) -> int:
    started = time.time()
    pairs_path = Path(params["pairs"])
    if not pairs_path.exists():
        raise MissingFileError(f"pairs manifest not found: {pairs_path}")
    qc = QcConfig(tile_size=params["tile_size"], gamma=params["gamma"],
                  ptp_min=params["ptp_min"])
    norm = NormalizationConfig(pct_low=params["pct_low"], pct_high=params["pct_high"],
                               epsilon=params["epsilon"])

    rows = []
    with pairs_path.open() as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#") or row[0] == "image_path":
                continue
            if len(row) < 3:
                raise LunarDemError(f"pairs row needs image_path,dem_path,source_id: {row}")
            rows.append((row[0].strip(), row[1].strip(), row[2].strip()))

    all_tiles = []
    for image_path, dem_path, source_id in rows:
        image = read_raster(image_path)
        dem = read_raster(dem_path)
        kept, rejected = preprocess_pair(image, dem, source_id, qc, norm)
        all_tiles.extend(kept)
        reasons = {}
        for _, _, reason in rejected:
            reasons[reason.value] = reasons.get(reason.value, 0) + 1
        reason_text = ", ".join(f"{k}={v}" for k, v in sorted(reasons.items())) or "none"
        print(f"{source_id}: kept {len(kept)}, rejected {len(rejected)} ({reason_text})")

    splits = split_dataset(
        [t.tile_id for t in all_tiles], params["split_ratios"], seed=params["seed"],
        by=params["split_by"],
        source_ids=[t.meta.source_id for t in all_tiles],
    )
    write_tile_store(all_tiles, splits, params["out"], qc=qc, norm=norm)
    print(f"wrote {len(all_tiles)} tiles to {params['out']}")
    write_run_json(Path(params["out"]), "preprocess", params, time.time() - started)
    return EXIT_OK


def _model_config_from(params: dict) -> ModelConfig:
    return ModelConfig(
        backbone=params["backbone"],
        decoder_channels=params["decoder_channels"],
        se_reduction=params["se_reduction"],
        dropout_p=params["dropout_p"],
        scale_head_hidden=params["scale_head_hidden"],
        pretrained_encoder=bool(params["pretrained"]),
    )


def cmd_train(params: dict) -> int:
    started = time.time()
    store = read_tile_store(params["store"])
    model = build_model(_model_config_from(params), init_seed=params["seed"])
    weights = LossWeights(alpha_l1=params["alpha_l1"], alpha_grad=params["alpha_grad"],
                          alpha_ssim=params["alpha_ssim"], alpha_scale=params["alpha_scale"])
    cfg = TrainConfig(
        lr=params["lr"], weight_decay=params["weight_decay"],
        batch_size=params["batch_size"], epochs=params["epochs"],
        lr_min=params["lr_min"], seed=params["seed"], device=params["device"],
        loss_weights=weights, val_every=params["val_every"],
        checkpoint_dir=params["checkpoint_dir"], clip_norm=params["clip_norm"],
    )
    best_path, history = train(model, store, cfg)
    print(f"trained {params['epochs']} epochs; best val loss "
          f"{history.best_val_loss:.6f} at epoch {history.best_epoch}")
    print(f"best checkpoint: {best_path}")
    write_run_json(Path(cfg.checkpoint_dir), "train", params, time.time() - started)
    return EXIT_OK


def cmd_eval(params: dict) -> int:
    started = time.time()
    store = read_tile_store(params["store"])
    model, _ = load_checkpoint(params["checkpoint"])
    report = infer_metrics.evaluate_store(
        model, store, params["split"], params["mode"],
        batch_size=params["batch_size"], device=params["device"],
    )
    out = Path(params["out"])
    report.save(out)
    mean_text = "undefined" if report.mean_nrmse is None else f"{report.mean_nrmse:.6f}"
    mae_text = "n/a" if report.mae_m is None else f"{report.mae_m:.4f} m"
    print(f"{params['mode']} metrics over {report.n_tiles} tiles "
          f"({report.n_skipped} skipped): mean nRMSE {mean_text}, MAE {mae_text}")
    print(f"metrics: {out}")
    write_run_json(out.parent, "eval", params, time.time() - started)
    return EXIT_OK


def cmd_infer(params: dict) -> int:
    started = time.time()
    grid = read_raster(params["image"])
    clean, mask = sanitize_nodata(grid)
    norm = NormalizationConfig(pct_low=params["pct_low"], pct_high=params["pct_high"])
    stretched = stretch_image(clean.values, mask, norm)

    model, _ = load_checkpoint(params["checkpoint"])
    relative = infer_metrics.predict_relative(model, stretched, device=params["device"])

    z_min, z_ptp = params["zmin"], params["zptp"]
    if params["meta"] is not None:
        meta = json.loads(Path(params["meta"]).read_text())
        z_min, z_ptp = float(meta["z_min"]), float(meta["z_ptp"])
    if (z_min is None) != (z_ptp is None):
        print("error: --zmin and --zptp must be given together", file=sys.stderr)
        return EXIT_USAGE

    if z_min is not None:
        values = infer_metrics.predict_absolute(relative, z_min, z_ptp)
        mode = "absolute"
    else:
        values = relative
        mode = "relative"

    out_grid = RasterGrid(values=values, transform=grid.transform, crs_id=grid.crs_id)
    out_path = Path(params["out"])
    write_raster(out_grid, out_path, bitdepth="f32")
    print(f"wrote {mode} DEM to {out_path}")
    write_run_json(out_path.parent, "infer", params, time.time() - started)
    return EXIT_OK


def cmd_profile(params: dict) -> int:
    started = time.time()
    store = read_tile_store(params["store"])
    tile_id = params["tile"]
    if tile_id not in store.tiles:
        print(f"error: tile {tile_id!r} not in store", file=sys.stderr)
        return EXIT_USAGE
    tile = store.tiles[tile_id]
    line = tuple(float(v) for v in params["line"].split(","))
    if len(line) != 4:
        print("error: --line needs r0,c0,r1,c1", file=sys.stderr)
        return EXIT_USAGE

    model, _ = load_checkpoint(params["checkpoint"])
    pred = infer_metrics.predict_relative(model, tile.image, device=params["device"])
    truth = tile.dem.astype(np.float64)
    mode = params["mode"]
    if mode == "absolute":
        pred = infer_metrics.predict_absolute(pred, tile.meta.z_min, tile.meta.z_ptp)
        truth = infer_metrics.predict_absolute(truth, tile.meta.z_min, tile.meta.z_ptp)

    profile = infer_metrics.extract_profile(
        truth, pred, line, pixel_scale=params["pixel_scale"],
        units="m" if mode == "absolute" else "relative",
    )
    prefix = Path(params["out_prefix"])
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = infer_metrics.profile_to_csv(profile, prefix.with_suffix(".csv"))
    fig_path = infer_metrics.render_profile_figure(
        profile, prefix.with_suffix("." + params["figure_format"]), mode=mode)
    print(f"profile CSV: {csv_path}")
    print(f"profile figure: {fig_path}")
    write_run_json(prefix.parent, "profile", params, time.time() - started)
    return EXIT_OK


_HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "profile": cmd_profile,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lunardem",
        description="Monocular elevation estimation pipeline",
    )
    parser.add_argument("--version", action="version", version=version_string())
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, opts in _OPTS.items():
        sub = subparsers.add_parser(name, help=f"{name} subcommand")
        sub.add_argument("--config", default=None, help="INI config file")
        sub.add_argument("--verbose", action="store_true", help="debug logging")
        _add_opts(sub, opts)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = _load_config(args.config)
        params = _resolve(args, config, _OPTS[args.command])
        logger.debug("resolved %s params: %s", args.command, params)
        return _HANDLERS[args.command](params)
    except NonFiniteLossError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _IO_ERRORS as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (LunarDemError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
