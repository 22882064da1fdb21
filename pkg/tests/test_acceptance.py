"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the report lines.
The headline corpus-scale numbers are out of reach on a desk machine (they
need the full real-image corpus and a datacenter GPU), so criterion 1
checks that the corpus-scale defaults ship as configured and the remaining
criteria verify the pipeline's properties at desk scale.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from lunardem.cli import main
from lunardem.infer_metrics import (
    ConstantPredictor,
    evaluate_store,
    mae,
    mean_train_elevation,
    nrmse_tile,
)
from lunardem.losses import (
    CorpusStats,
    LossWeights,
    composite_loss,
    gradient_loss,
    scale_targets,
    ssim_loss,
)
from lunardem.model import (
    ModelConfig,
    SEBlock,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from lunardem.preprocess import (
    NormalizationConfig,
    QcConfig,
    TileCandidate,
    denormalize_dem,
    normalize_dem,
    qc_filter,
    read_tile_store,
)
from lunardem.synthgen import DatasetRanges, SunParams, TerrainParams, generate_terrain, make_dataset, render_shaded
from lunardem.train import TrainConfig, cosine_lr, train
from lunardem.raster_io import write_raster

from oracles import qc_decide_scalar, se_scalar, ssim_scalar
from test_cli import store_hash


@contextmanager
def criterion(number, description):
    try:
        yield
    except BaseException:
        print(f"[ACCEPTANCE] criterion {number}: FAIL - {description}")
        raise
    print(f"[ACCEPTANCE] criterion {number}: PASS - {description}")


# --- shared expensive fixtures -----------------------------------------------------

OVERFIT_MODEL = ModelConfig(backbone="tiny_unet", decoder_channels=(64, 48, 32, 16),
                            se_reduction=8, dropout_p=0.0)
E2E_MODEL = ModelConfig(backbone="tiny_unet", decoder_channels=(64, 48, 32, 16),
                        se_reduction=8, dropout_p=0.05)


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """8 tiles, one batch per epoch, 300 optimizer steps."""
    root = tmp_path_factory.mktemp("overfit")
    make_dataset(10, root / "store", seed=33, tile_size=64)
    store = read_tile_store(root / "store")
    model = build_model(OVERFIT_MODEL, init_seed=1)
    cfg = TrainConfig(lr=2e-3, weight_decay=0.0, batch_size=8, epochs=300, seed=1,
                      checkpoint_dir=str(root / "ckpt"), val_every=300)
    started = time.monotonic()
    _, history = train(model, store, cfg)
    elapsed = time.monotonic() - started
    return history, elapsed


@pytest.fixture(scope="module")
def e2e_run(tmp_path_factory):
    """500 train / 50 held-out / 10 val synthetic pairs, 12 epochs."""
    root = tmp_path_factory.mktemp("e2e")
    make_dataset(560, root / "store", seed=77, tile_size=64,
                 split_ratios=(500 / 560, 50 / 560, 10 / 560),
                 ranges=DatasetRanges())
    store = read_tile_store(root / "store")
    assert [len(store.ids(s)) for s in ("train", "test", "val")] == [500, 50, 10]

    model = build_model(E2E_MODEL, init_seed=3)
    cfg = TrainConfig(lr=2e-3, weight_decay=1e-5, batch_size=8, epochs=12, seed=3,
                      checkpoint_dir=str(root / "ckpt"), val_every=3)
    started = time.monotonic()
    best_path, _ = train(model, store, cfg)
    elapsed = time.monotonic() - started
    best_model, _ = load_checkpoint(best_path)
    return store, best_model, elapsed


# --- criteria ------------------------------------------------------------------------

def test_criterion_1_corpus_scale_defaults_ship_as_configured():
    with criterion(1, "corpus-scale reproduction is out of desk scope; "
                      "the shipped defaults match the full-scale recipe"):
        train_cfg = TrainConfig()
        assert train_cfg.lr == 5e-5
        assert train_cfg.weight_decay == 1e-5
        assert train_cfg.batch_size == 32
        assert train_cfg.epochs == 200
        assert train_cfg.scheduler == "cosine"
        qc = QcConfig()
        assert qc.tile_size == 512
        assert qc.gamma == 0.05
        assert qc.ptp_min == 1.0
        norm = NormalizationConfig()
        assert (norm.pct_low, norm.pct_high) == (1.0, 99.0)
        assert norm.epsilon == 1e-3
        weights = LossWeights()
        assert (weights.alpha_l1, weights.alpha_grad, weights.alpha_ssim) == (1, 1, 1)
        assert ModelConfig().backbone == "effnet_b3"


def test_criterion_2_normalization_round_trip_on_1000_tiles():
    with criterion(2, "1000-tile normalize/denormalize round trip within 1e-3 m"):
        started = time.monotonic()
        rng = np.random.default_rng(2024)
        cfg = NormalizationConfig()
        mask = np.ones((64, 64), np.uint8)
        worst = 0.0
        for i in range(1000):
            terrain = generate_terrain(TerrainParams(
                size=64, amplitude=float(rng.uniform(2.0, 80.0)),
                crater_count=int(rng.integers(0, 3)), seed=int(rng.integers(2 ** 32))))
            z = terrain.values + rng.uniform(-2000.0, 8000.0)
            normalized, meta = normalize_dem(z, mask, cfg)
            back = denormalize_dem(normalized, meta.z_min, meta.z_ptp)
            worst = max(worst, float(np.abs(back - z).max()))
        elapsed = time.monotonic() - started
        assert worst <= 1e-3, f"round-trip error {worst}"
        assert elapsed < 10.0, f"took {elapsed:.1f}s"


def test_criterion_3_qc_matches_scalar_oracle_500_of_500():
    with criterion(3, "qc_filter agrees with the scalar rule oracle on 500 tiles"):
        rng = np.random.default_rng(99)
        cfg = QcConfig(tile_size=64)
        cases = []
        # crafted edges: ptp exactly at threshold rejects, ratio exactly at
        # gamma keeps
        dem = np.zeros((10, 10))
        dem[0, 0] = 1.0
        cases.append((dem, np.ones((10, 10), np.uint8), False))
        dem2 = np.zeros((10, 10))
        mask2 = np.zeros((10, 10), np.uint8)
        mask2.flat[:5] = 1
        dem2.flat[:5] = [0.0, 2.0, 5.0, 7.0, 9.0]
        cases.append((dem2, mask2, True))
        while len(cases) < 500:
            dem = rng.uniform(0, rng.choice([0.5, 1.0, 2.0, 50.0]), size=(10, 10))
            mask = (rng.random((10, 10)) < rng.choice([0.02, 0.05, 0.3, 1.0]))
            cases.append((dem, mask.astype(np.uint8), None))

        agree = 0
        for dem, mask, expected_keep in cases:
            result = qc_filter(TileCandidate(np.zeros_like(dem), dem, mask, 0, 0), cfg)
            want = qc_decide_scalar(dem.tolist(), mask.tolist(), cfg.gamma, cfg.ptp_min)
            got = "keep" if result.keep else result.reason.value
            if expected_keep is not None:
                assert result.keep is expected_keep
            agree += got == want
        assert agree == 500


class _Probe(torch.nn.Module):
    """Float64 probe with well under 1k parameters."""

    def __init__(self):
        super().__init__()
        self.conv1 = torch.nn.Conv2d(1, 3, 3, padding=1)
        self.conv2 = torch.nn.Conv2d(3, 1, 3, padding=1)
        self.scale = torch.nn.Linear(1, 2)
        self.double()

    def forward(self, x):
        h = torch.tanh(self.conv1(x))
        return torch.sigmoid(self.conv2(h)), self.scale(x.mean(dim=(1, 2, 3))[:, None])


def test_criterion_4_loss_correctness():
    with criterion(4, "loss components: zero at identity, shift invariance, "
                      "finite-difference gradients, SSIM oracle"):
        rng = np.random.default_rng(4)
        stats = CorpusStats(z_min_mean=1200.0, z_min_std=80.0)

        # (a) all components exactly zero at pred == target
        target = torch.as_tensor(rng.random((1, 1, 16, 16)))
        z_min, z_ptp = np.array([1300.0]), np.array([45.0])
        params = scale_targets(z_min, z_ptp, stats, dtype=target.dtype)
        total, report = composite_loss(target, target, scale_params=params,
                                       z_min=z_min, z_ptp=z_ptp, corpus_stats=stats)
        for component in (report.total, report.l1, report.grad, report.ssim, report.scale):
            assert abs(component) <= 1e-6

        # (b) gradient-loss shift invariance to 1e-12
        pred = torch.as_tensor(rng.random((1, 1, 12, 12)))
        tgt = torch.as_tensor(rng.random((1, 1, 12, 12)))
        base = gradient_loss(pred, tgt).item()
        for shift in (0.7, -42.0, 1e3):
            assert abs(gradient_loss(pred + shift, tgt + shift).item() - base) <= 1e-12

        # (c) composite gradient vs central finite differences (float64)
        torch.manual_seed(44)
        probe = _Probe()
        assert sum(p.numel() for p in probe.parameters()) <= 1000
        images = torch.rand(1, 1, 16, 16, dtype=torch.float64)
        target64 = torch.rand(1, 1, 16, 16, dtype=torch.float64)

        def composite_total():
            elevation, scale_params = probe(images)
            total, _ = composite_loss(elevation, target64,
                                      scale_params=scale_params, z_min=z_min,
                                      z_ptp=z_ptp, corpus_stats=stats)
            return total

        loss = composite_total()
        loss.backward()
        parameters = list(probe.parameters())
        grads = [p.grad.clone() for p in parameters]
        sampler = np.random.default_rng(13)
        step = 1e-4
        for _ in range(20):
            pi = int(sampler.integers(len(parameters)))
            idx = int(sampler.integers(parameters[pi].numel()))
            with torch.no_grad():
                original = parameters[pi].view(-1)[idx].item()
                parameters[pi].view(-1)[idx] = original + step
                plus = composite_total().item()
                parameters[pi].view(-1)[idx] = original - step
                minus = composite_total().item()
                parameters[pi].view(-1)[idx] = original
            fd = (plus - minus) / (2 * step)
            ag = grads[pi].view(-1)[idx].item()
            assert abs(fd - ag) / max(abs(fd), abs(ag), 1e-8) < 1e-4

        # (d) ssim_loss vs the independent scalar implementation, 10 pairs
        for _ in range(10):
            a = rng.random((13, 13))
            b = rng.random((13, 13))
            got = ssim_loss(torch.as_tensor(a), torch.as_tensor(b)).item()
            want = 1.0 - ssim_scalar(a.tolist(), b.tolist())
            assert abs(got - want) <= 1e-6


def test_criterion_5_architecture_contracts(tmp_path):
    with criterion(5, "forward shapes 64/96/512 with sigmoid range, SE oracle, "
                      "bit-exact checkpoint round trip"):
        rng = np.random.default_rng(5)
        for backbone in ("tiny_unet", "effnet_b3"):
            cfg = ModelConfig(backbone=backbone, decoder_channels=(64, 48, 32, 16),
                              se_reduction=8, dropout_p=0.0)
            model = build_model(cfg, init_seed=0)
            model.eval()
            for size in (64, 96, 512):
                with torch.no_grad():
                    out = model(torch.rand(1, 1, size, size))
                assert tuple(out.elevation.shape) == (1, 1, size, size)
                assert out.elevation.min().item() > 0.0
                assert out.elevation.max().item() < 1.0
                assert tuple(out.scale_params.shape) == (1, 2)

        torch.manual_seed(55)
        se = SEBlock(16, 4).double()
        x = rng.normal(size=(2, 16, 7, 7))
        got = se(torch.as_tensor(x)).detach().numpy()
        want = se_scalar(x,
                         se.fc1.weight.detach().numpy(), se.fc1.bias.detach().numpy(),
                         se.fc2.weight.detach().numpy(), se.fc2.bias.detach().numpy())
        np.testing.assert_allclose(got, want, atol=1e-6, rtol=0)

        cfg = ModelConfig(backbone="tiny_unet", decoder_channels=(32, 32, 16, 16),
                          se_reduction=8, dropout_p=0.0)
        model = build_model(cfg, init_seed=9)
        model.eval()
        probe = torch.rand(1, 1, 64, 64)
        with torch.no_grad():
            before = model(probe).elevation
        path = save_checkpoint(model, tmp_path / "probe.pt")
        reloaded, _ = load_checkpoint(path)
        with torch.no_grad():
            after = reloaded(probe).elevation
        assert torch.equal(before, after)


def test_criterion_6_overfit_one_batch(overfit_run):
    with criterion(6, "tiny_unet drives one-batch train loss below 10% of its "
                      "step-0 value within 300 steps"):
        history, elapsed = overfit_run
        step0 = history.records[0].train_loss
        floor = min(record.train_loss for record in history.records)
        assert floor < 0.1 * step0, f"loss only fell to {floor / step0:.1%} of step 0"
        assert elapsed < 300.0, f"took {elapsed:.0f}s"


def test_criterion_7_synthetic_end_to_end_learning(e2e_run):
    with criterion(7, "trained model beats the constant-mean baseline by >= 30% "
                      "on held-out nRMSE and MAE"):
        store, model, elapsed = e2e_run
        baseline = ConstantPredictor(mean_train_elevation(store, "train"))
        base_rel = evaluate_store(baseline, store, "test", "relative")
        base_abs = evaluate_store(baseline, store, "test", "absolute")
        model_rel = evaluate_store(model, store, "test", "relative")
        model_abs = evaluate_store(model, store, "test", "absolute")

        assert model_rel.mean_nrmse <= 0.7 * base_rel.mean_nrmse, (
            f"nRMSE {model_rel.mean_nrmse:.4f} vs baseline {base_rel.mean_nrmse:.4f}")
        assert model_abs.mae_m <= 0.7 * base_abs.mae_m, (
            f"MAE {model_abs.mae_m:.3f} vs baseline {base_abs.mae_m:.3f}")
        assert elapsed < 900.0, f"training took {elapsed:.0f}s"
        print(f"  [criterion 7] nRMSE {model_rel.mean_nrmse:.4f} "
              f"(baseline {base_rel.mean_nrmse:.4f}), "
              f"MAE {model_abs.mae_m:.3f} m (baseline {base_abs.mae_m:.3f} m)")


def test_criterion_8_scheduler_exactness(tmp_path):
    with criterion(8, "cosine lr at epochs {0, T/2, T} equals "
                      "{5e-5, 2.5e-5, 0} to 1e-12"):
        cfg = TrainConfig()  # defaults: lr 5e-5, epochs 200, floor 0
        assert abs(cosine_lr(0, cfg) - 5e-5) <= 1e-12
        assert abs(cosine_lr(100, cfg) - 2.5e-5) <= 1e-12
        assert abs(cosine_lr(200, cfg) - 0.0) <= 1e-12

        # recorded values from a real run follow the same formula exactly
        make_dataset(6, tmp_path / "store", seed=8, tile_size=64,
                     split_ratios=(0.7, 0.0, 0.3))
        store = read_tile_store(tmp_path / "store")
        model = build_model(ModelConfig(backbone="tiny_unet",
                                        decoder_channels=(32, 32, 16, 16),
                                        se_reduction=8, dropout_p=0.0))
        run_cfg = TrainConfig(lr=5e-5, epochs=2, batch_size=4, seed=8,
                              checkpoint_dir=str(tmp_path / "ckpt"))
        _, history = train(model, store, run_cfg)
        assert abs(history.records[0].lr - 5e-5) <= 1e-12
        assert abs(history.records[1].lr - 2.5e-5) <= 1e-12
        assert abs(cosine_lr(2, run_cfg) - 0.0) <= 1e-12


def test_criterion_9_metric_algebra():
    with criterion(9, "nRMSE affine invariance, MAE equivariance (1e-9), "
                      "perfect predictor metrics exactly zero"):
        rng = np.random.default_rng(9)
        for _ in range(25):
            truth = rng.uniform(0, 1, size=(16, 16))
            pred = truth + rng.normal(0, 0.05, size=(16, 16))
            gain = float(rng.uniform(0.1, 40.0))
            offset = float(rng.uniform(-500.0, 500.0))
            assert mae(gain * pred + offset, gain * truth + offset) == pytest.approx(
                gain * mae(pred, truth), rel=1e-9)
            assert nrmse_tile(gain * pred + offset, gain * truth + offset) == \
                pytest.approx(nrmse_tile(pred, truth), rel=1e-9)
        truth = rng.uniform(100, 200, size=(32, 32))
        assert mae(truth, truth) == 0.0
        assert nrmse_tile(truth, truth) == 0.0


def test_criterion_10_pipeline_determinism(tmp_path):
    with criterion(10, "synth + preprocess + 1-epoch train reproduce bit-for-bit "
                       "under a fixed seed"):
        # synth twice
        for name in ("synth_a", "synth_b"):
            assert main(["synth", "--n", "8", "--seed", "21",
                         "--out", str(tmp_path / name)]) == 0
        assert store_hash(tmp_path / "synth_a") == store_hash(tmp_path / "synth_b")

        # preprocess twice from one raw pair
        dem = generate_terrain(TerrainParams(size=128, amplitude=30.0, seed=6))
        image = render_shaded(dem, SunParams(albedo_noise_std=0.0), 5.0)
        write_raster(dem, tmp_path / "dem.tif", "f32")
        write_raster(image, tmp_path / "img.tif", "f32")
        pairs = tmp_path / "pairs.csv"
        pairs.write_text(f"{tmp_path / 'img.tif'},{tmp_path / 'dem.tif'},srcA\n")
        for name in ("prep_a", "prep_b"):
            assert main(["preprocess", "--pairs", str(pairs), "--tile-size", "64",
                         "--seed", "4", "--out", str(tmp_path / name)]) == 0
        assert store_hash(tmp_path / "prep_a") == store_hash(tmp_path / "prep_b")

        # one-epoch training twice on the synth store
        histories = []
        for name in ("t_a", "t_b"):
            assert main(["train", "--store", str(tmp_path / "synth_a"),
                         "--checkpoint-dir", str(tmp_path / name),
                         "--epochs", "1", "--batch-size", "4", "--seed", "12",
                         "--backbone", "tiny_unet",
                         "--decoder-channels", "32,32,16,16",
                         "--se-reduction", "8", "--dropout-p", "0.1"]) == 0
            payload = json.loads((tmp_path / name / "history.json").read_text())
            for record in payload["records"]:
                record.pop("wall_seconds")
            histories.append(payload)
        assert histories[0] == histories[1]
