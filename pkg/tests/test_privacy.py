import csv
import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy.ndimage import gaussian_filter

from ppnesf.privacy import (
    PSNR_CAP,
    AttackScene,
    InversionDecoder,
    PrivacyConfig,
    PrivacyReport,
    attack_features,
    check_disjoint,
    decode,
    gradient_difference_loss,
    mean_image_baseline,
    psnr,
    ssim,
    train_inversion,
    write_contact_sheet,
    write_report_csv,
)

SMALL = PrivacyConfig(width=8, depth=2, epochs=6, iters_per_epoch=10, batch_size=2, seed=0)


def smooth_images(rng, n, size=16):
    return [np.clip(gaussian_filter(rng.uniform(size=(size, size)), 2.0) * 3 - 1, 0, 1).astype(np.float32)
            for _ in range(n)]


def fake_scene(scene_id, feats, images):
    return AttackScene(scene_id, model=None, views=[], cache=list(zip(feats, images)))


def test_psnr_closed_form():
    gt = np.full((4, 4), 0.6)
    assert psnr(np.full((4, 4), 0.5), gt) == pytest.approx(20.0, abs=1e-12)
    assert psnr(gt, gt) == PSNR_CAP
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0


def _ssim_reference(x, y, c1=1e-4, c2=9e-4):
    # Gaussian-window SSIM written out directly; skimage truncates at 3.5 sigma.
    f = lambda a: gaussian_filter(a, 1.5, truncate=3.5)  # noqa: E731
    mx, my = f(x), f(y)
    vx, vy, cxy = f(x * x) - mx * mx, f(y * y) - my * my, f(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    pad = 5
    return s[pad:-pad, pad:-pad].mean()


def test_ssim_matches_direct_formula(rng):
    x = rng.uniform(size=(32, 32))
    y = np.clip(x + rng.normal(0, 0.1, size=x.shape), 0, 1)
    assert ssim(x, y) == pytest.approx(_ssim_reference(x, y), abs=1e-9)
    assert ssim(x, x) == pytest.approx(1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_ranges(seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(size=(16, 16)), r.uniform(size=(16, 16))
    assert -1.0 <= ssim(a, b) <= 1.0
    assert psnr(a, b) >= 0.0


def test_gradient_difference_loss():
    gt = torch.arange(16, dtype=torch.float64).reshape(1, 1, 4, 4) / 16
    assert float(gradient_difference_loss(gt + 0.3, gt)) == pytest.approx(0.0, abs=1e-15)
    # A flat prediction misses every x-step (1/16) and y-step (4/16).
    assert float(gradient_difference_loss(torch.zeros_like(gt), gt)) == pytest.approx(1 / 16 + 4 / 16)


def test_decoder_shapes_and_standardisation():
    dec = InversionDecoder(3, width=8, depth=2, seed=1)
    x = torch.randn(2, 3, 16, 12)
    with torch.no_grad():
        y = dec(x)
        shifted = dec(3.0 * x - 2.0)
    assert y.shape == (2, 1, 16, 12)
    assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0
    assert torch.allclose(shifted, y, atol=1e-5)
    with pytest.raises(ValueError):
        dec(torch.randn(1, 3, 10, 12))
    again = InversionDecoder(3, width=8, depth=2, seed=1)
    assert all(torch.equal(a, b) for a, b in zip(dec.parameters(), again.parameters()))


def test_decode_resamples_odd_sizes(caplog):
    dec = InversionDecoder(2, width=8, depth=2).eval()
    with caplog.at_level(logging.WARNING, logger="ppnesf.privacy"):
        out = decode(dec, torch.randn(2, 10, 14))
    assert out.shape == (10, 14) and "resampled" in caplog.text


def test_protocol_checks(rng):
    imgs = smooth_images(rng, 2)
    feats = [torch.randn(2, 16, 16) for _ in imgs]
    a, b = fake_scene("a", feats, imgs), fake_scene("b", feats, imgs)
    with pytest.raises(ValueError, match="two attacker"):
        train_inversion([a], SMALL)
    with pytest.raises(ValueError, match="also used"):
        train_inversion([a, b], SMALL, victims=["b"])
    check_disjoint([a, b], ["c"])
    train_inversion([a], SMALL, allow_overlap=True)


def test_training_is_deterministic(rng):
    imgs = smooth_images(rng, 4)
    feats = [torch.from_numpy(np.stack([i, 1 - i])) for i in imgs]
    scenes = lambda: [fake_scene("a", feats[:2], imgs[:2]), fake_scene("b", feats[2:], imgs[2:])]  # noqa: E731
    d1, d2 = train_inversion(scenes(), SMALL), train_inversion(scenes(), SMALL)
    assert all(torch.equal(a, b) for a, b in zip(d1.parameters(), d2.parameters()))


def test_constant_features_give_mean_image(rng):
    imgs = smooth_images(rng, 12)
    const = [torch.ones(2, 16, 16) for _ in imgs]
    attackers = [fake_scene("a", const[:5], imgs[:5]), fake_scene("b", const[5:10], imgs[5:10])]
    cfg = PrivacyConfig(width=8, depth=2, epochs=20, iters_per_epoch=25, grad_weight=0.0, lr=3e-3, seed=0)
    dec = train_inversion(attackers, cfg, victims=["v"])
    report = attack_features(dec, const[10:], imgs[10:])
    baseline = mean_image_baseline(attackers, imgs[10:])
    assert abs(report.mean_psnr - baseline) < 1.0


def test_noise_features_stay_near_floor(rng):
    imgs = smooth_images(rng, 12)
    # Informative features: the image itself and a nonlinear copy.
    feats = [torch.from_numpy(np.stack([i, i**2]).astype(np.float32)) for i in imgs]
    attackers = [fake_scene("a", feats[:5], imgs[:5]), fake_scene("b", feats[5:10], imgs[5:10])]
    dec = train_inversion(attackers, PrivacyConfig(width=8, depth=2, epochs=20, iters_per_epoch=25, seed=0))
    informed = attack_features(dec, feats[10:], imgs[10:])
    noise = attack_features(dec, [torch.randn(2, 16, 16, generator=torch.Generator().manual_seed(i))
                                  for i in range(2)], imgs[10:])
    baseline = mean_image_baseline(attackers, imgs[10:])
    assert noise.mean_psnr <= baseline + 0.5
    assert informed.mean_psnr > baseline + 3.0


def test_report_outputs(tmp_path, rng):
    imgs = smooth_images(rng, 2)
    rep = PrivacyReport("rgb", "s", [0.1, 0.2], [20.0, 21.0], [0.5, 0.6], reconstructions=imgs, targets=imgs)
    assert rep.summary()["psnr"] == pytest.approx(20.5)
    rows = list(csv.DictReader(write_report_csv([rep], tmp_path / "r.csv").open()))
    assert len(rows) == 2 and rows[1]["variant"] == "rgb" and float(rows[1]["psnr"]) == 21.0
    sheet = np.asarray(Image.open(write_contact_sheet([rep, rep], tmp_path / "s.png")))
    assert sheet.shape == (32, 48)
    with pytest.raises(ValueError):
        write_contact_sheet([PrivacyReport("x", "s", [], [], [])], tmp_path / "t.png")
