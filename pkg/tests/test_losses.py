import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lunardem.errors import EmptyMaskError, MissingStatsError, TooSmallError
from lunardem.losses import (
    CorpusStats,
    LossWeights,
    combine_reports,
    composite_loss,
    gradient_loss,
    l1_loss,
    scale_loss,
    scale_targets,
    ssim_loss,
)

from oracles import gradient_loss_scalar, l1_scalar, scale_loss_scalar, ssim_scalar

torch.manual_seed(0)


def t64(array):
    return torch.as_tensor(np.asarray(array), dtype=torch.float64)


# --- l1 -------------------------------------------------------------------------

def test_l1_identity_is_zero(rng):
    x = t64(rng.random((5, 5)))
    assert l1_loss(x, x).item() == 0.0


def test_l1_constant_offset():
    target = t64(np.zeros((6, 6)))
    pred = target + 0.25
    assert l1_loss(pred, target).item() == pytest.approx(0.25, abs=1e-15)


def test_l1_masked_matches_scalar_oracle(rng):
    pred = rng.random((4, 4))
    target = rng.random((4, 4))
    mask = (rng.random((4, 4)) < 0.7).astype(np.float64)
    mask[0, 0] = 1.0
    got = l1_loss(t64(pred), t64(target), t64(mask)).item()
    want = l1_scalar(pred.tolist(), target.tolist(), mask.tolist())
    assert got == pytest.approx(want, abs=1e-12)


def test_l1_empty_mask():
    with pytest.raises(EmptyMaskError):
        l1_loss(t64(np.ones((3, 3))), t64(np.ones((3, 3))), t64(np.zeros((3, 3))))


# --- gradient ---------------------------------------------------------------------

def test_gradient_shift_invariance(rng):
    pred = t64(rng.random((7, 7)))
    target = t64(rng.random((7, 7)))
    base = gradient_loss(pred, target).item()
    for c in (1.0, -3.5, 1234.0):
        shifted = gradient_loss(pred + c, target + c).item()
        assert abs(shifted - base) <= 1e-12


def test_gradient_ramp_closed_form():
    # pred flat zero, target a horizontal ramp with slope s per pixel:
    # x-term contributes s, y-term contributes 0.
    s = 0.37
    target = t64(np.tile(np.arange(8) * s, (8, 1)))
    pred = torch.zeros_like(target)
    assert gradient_loss(pred, target).item() == pytest.approx(s, abs=1e-12)


def test_gradient_matches_stencil_oracle(rng):
    pred = rng.random((5, 5))
    target = rng.random((5, 5))
    mask = (rng.random((5, 5)) < 0.8).astype(np.float64)
    mask[:2, :2] = 1.0
    got = gradient_loss(t64(pred), t64(target), t64(mask)).item()
    want = gradient_loss_scalar(pred.tolist(), target.tolist(), mask.tolist())
    assert got == pytest.approx(want, abs=1e-12)


def test_gradient_empty_stencils():
    mask = np.zeros((4, 4))
    mask[0, 0] = 1.0  # one valid pixel, but no valid pair
    mask[2, 2] = 1.0
    with pytest.raises(EmptyMaskError):
        gradient_loss(t64(np.ones((4, 4))), t64(np.ones((4, 4))), t64(mask))


# --- ssim -------------------------------------------------------------------------

def test_ssim_self_similarity_is_zero(rng):
    x = t64(rng.random((16, 16)))
    assert ssim_loss(x, x).item() == pytest.approx(0.0, abs=1e-12)


def test_ssim_constant_images_luminance_only():
    pred = t64(np.zeros((12, 12)))
    target = t64(np.ones((12, 12)))
    c1 = 1e-4
    expected = 1.0 - c1 / (1.0 + c1)
    assert ssim_loss(pred, target).item() == pytest.approx(expected, abs=1e-12)


def test_ssim_matches_scalar_oracle(rng):
    pred = rng.random((14, 14))
    target = rng.random((14, 14))
    got = ssim_loss(t64(pred), t64(target)).item()
    want = 1.0 - ssim_scalar(pred.tolist(), target.tolist())
    assert got == pytest.approx(want, abs=1e-6)


def test_ssim_too_small():
    with pytest.raises(TooSmallError):
        ssim_loss(t64(np.zeros((8, 8))), t64(np.zeros((8, 8))))


def test_ssim_range(rng):
    for _ in range(5):
        a = t64(rng.random((12, 12)))
        b = t64(rng.random((12, 12)))
        v = ssim_loss(a, b).item()
        assert 0.0 <= v <= 2.0


# --- scale ------------------------------------------------------------------------

STATS = CorpusStats(z_min_mean=1500.0, z_min_std=100.0)


def test_scale_identity_is_zero():
    z_min = np.array([1500.0, 1600.0])
    z_ptp = np.array([50.0, 80.0])
    targets = scale_targets(z_min, z_ptp, STATS, dtype=torch.float64)
    assert scale_loss(targets, z_min, z_ptp, STATS).item() == 0.0


def test_scale_constant_offset_is_one():
    z_min = np.array([1500.0, 1600.0])
    z_ptp = np.array([50.0, 80.0])
    targets = scale_targets(z_min, z_ptp, STATS, dtype=torch.float64)
    assert scale_loss(targets + 1.0, z_min, z_ptp, STATS).item() == \
        pytest.approx(1.0, abs=1e-12)


def test_scale_matches_scalar_oracle(rng):
    z_min = rng.uniform(1000, 2000, size=4)
    z_ptp = rng.uniform(1, 100, size=4)
    pred = t64(rng.normal(size=(4, 2)))
    got = scale_loss(pred, z_min, z_ptp, STATS).item()
    want = scale_loss_scalar(pred.numpy().tolist(), z_min.tolist(), z_ptp.tolist(),
                             STATS.z_min_mean, STATS.z_min_std)
    assert got == pytest.approx(want, abs=1e-12)


def test_scale_missing_stats():
    with pytest.raises(MissingStatsError):
        scale_loss(torch.zeros(2, 2), [0.0, 1.0], [1.0, 2.0], None)


# --- composite --------------------------------------------------------------------

def test_composite_perfect_prediction_is_zero(rng):
    target = t64(rng.random((16, 16)))
    z_min, z_ptp = np.array([1500.0]), np.array([60.0])
    params = scale_targets(z_min, z_ptp, STATS, dtype=torch.float64)
    total, report = composite_loss(
        target, target, scale_params=params, z_min=z_min, z_ptp=z_ptp,
        corpus_stats=STATS)
    assert abs(total.item()) <= 1e-6
    for value in (report.l1, report.grad, report.ssim, report.scale):
        assert abs(value) <= 1e-6


def test_composite_unity_weights_decomposition(rng):
    pred = t64(rng.random((16, 16)))
    target = t64(rng.random((16, 16)))
    z_min, z_ptp = np.array([1200.0]), np.array([30.0])
    params = t64(rng.normal(size=(1, 2)))
    _, report = composite_loss(
        pred, target, weights=LossWeights(),
        scale_params=params, z_min=z_min, z_ptp=z_ptp, corpus_stats=STATS)
    assert report.total == pytest.approx(
        report.l1 + report.grad + report.ssim + 0.1 * report.scale, abs=1e-9)
    assert report.scale > 0.0


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3), st.floats(0, 3), st.floats(0, 3))
def test_composite_weighted_sum_invariant(a1, a2, a3, a4):
    rng = np.random.default_rng(7)
    pred = t64(rng.random((12, 12)))
    target = t64(rng.random((12, 12)))
    z_min, z_ptp = np.array([100.0]), np.array([10.0])
    params = t64(rng.normal(size=(1, 2)))
    weights = LossWeights(alpha_l1=a1, alpha_grad=a2, alpha_ssim=a3, alpha_scale=a4)
    _, report = composite_loss(pred, target, weights=weights, scale_params=params,
                               z_min=z_min, z_ptp=z_ptp, corpus_stats=STATS)
    assert report.total == pytest.approx(
        a1 * report.l1 + a2 * report.grad + a3 * report.ssim + a4 * report.scale,
        abs=1e-9)
    assert min(report.l1, report.grad, report.ssim, report.scale) >= 0.0


class ProbeNet(torch.nn.Module):
    """Tiny float64 probe: conv stack for elevation, linear for scale."""

    def __init__(self, with_scale=True):
        super().__init__()
        self.conv1 = torch.nn.Conv2d(1, 2, 3, padding=1)
        self.conv2 = torch.nn.Conv2d(2, 1, 3, padding=1)
        self.scale = torch.nn.Linear(1, 2) if with_scale else None
        self.double()

    def forward(self, x):
        h = torch.tanh(self.conv1(x))
        elevation = torch.sigmoid(self.conv2(h))
        scale = self.scale(x.mean(dim=(1, 2, 3), keepdim=False).unsqueeze(1)) \
            if self.scale is not None else None
        return elevation, scale


def _loss_for(net, images, target, component):
    elevation, scale = net(images)
    z_min, z_ptp = np.array([1500.0]), np.array([60.0])
    if component == "l1":
        return l1_loss(elevation, target)
    if component == "grad":
        return gradient_loss(elevation, target)
    if component == "ssim":
        return ssim_loss(elevation, target)
    if component == "scale":
        return scale_loss(scale, z_min, z_ptp, STATS)
    total, _ = composite_loss(elevation, target, scale_params=scale,
                              z_min=z_min, z_ptp=z_ptp, corpus_stats=STATS)
    return total


@pytest.mark.parametrize("component", ["l1", "grad", "ssim", "scale", "total"])
def test_gradient_matches_finite_differences(component):
    torch.manual_seed(101)
    net = ProbeNet()
    images = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    target = torch.rand(1, 1, 16, 16, dtype=torch.float64)

    loss = _loss_for(net, images, target, component)
    loss.backward()
    params = list(net.parameters())
    grads = [torch.zeros_like(p) if p.grad is None else p.grad.clone() for p in params]

    rng = np.random.default_rng(5)
    step = 1e-4
    checked = 0
    for _ in range(20):
        pi = int(rng.integers(len(params)))
        flat_idx = int(rng.integers(params[pi].numel()))
        with torch.no_grad():
            original = params[pi].view(-1)[flat_idx].item()
            params[pi].view(-1)[flat_idx] = original + step
            plus = _loss_for(net, images, target, component).item()
            params[pi].view(-1)[flat_idx] = original - step
            minus = _loss_for(net, images, target, component).item()
            params[pi].view(-1)[flat_idx] = original
        fd = (plus - minus) / (2 * step)
        ag = grads[pi].view(-1)[flat_idx].item()
        denom = max(abs(fd), abs(ag), 1e-8)
        assert abs(fd - ag) / denom < 1e-4, (component, pi, flat_idx, fd, ag)
        checked += 1
    assert checked == 20


# --- aggregation -------------------------------------------------------------------

def test_combine_reports_weighted():
    from lunardem.losses import LossReport
    a = LossReport(total=1.0, l1=0.5, grad=0.25, ssim=0.25, scale=0.0)
    b = LossReport(total=3.0, l1=1.5, grad=0.75, ssim=0.75, scale=0.0)
    merged = combine_reports([a, b], [3, 1])
    assert merged.total == pytest.approx(1.5)
    assert merged.l1 == pytest.approx(0.75)
