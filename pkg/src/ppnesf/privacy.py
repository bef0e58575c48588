"""Inversion attack on rendered geometric features and privacy metrics.

An attacker trains a decoder that maps the geometry branch's rendered
features to grayscale images on scenes it controls, then applies it to a
victim field. Fields trained with a photometric loss leak appearance into
those features; fields trained only from segmentation should leak less.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from skimage.metrics import structural_similarity
from torch import nn

from .fields import FieldModel, render_view
from .scenes import View

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0


# --------------------------------------------------------------------------- metrics


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(np.abs(np.asarray(pred, np.float64) - np.asarray(gt, np.float64)).mean())


def psnr(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0) -> float:
    mse = float(((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2).mean())
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse)))


def ssim(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM (sigma 1.5)."""
    return float(structural_similarity(np.asarray(pred, np.float64), np.asarray(gt, np.float64),
                                       data_range=data_range, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False))


def gradient_difference_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """L1 between horizontal and vertical finite differences of two (B, 1, H, W) images."""
    dx = lambda x: x[..., :, 1:] - x[..., :, :-1]  # noqa: E731
    dy = lambda x: x[..., 1:, :] - x[..., :-1, :]  # noqa: E731
    return (dx(pred) - dx(gt)).abs().mean() + (dy(pred) - dy(gt)).abs().mean()


# --------------------------------------------------------------------------- decoder


def _block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, 1, 1), nn.ReLU(), nn.Conv2d(cout, cout, 3, 1, 1), nn.ReLU())


class InversionDecoder(nn.Module):
    """U-Net from a feature map to a grayscale image in [0, 1].

    Each input map is standardised per channel first, so a decoder trained
    on one set of fields is not thrown off by per-field offsets and scales.
    """

    def __init__(self, in_channels: int, width: int = 64, depth: int = 4, seed: int = 0):
        super().__init__()
        self.in_channels = in_channels
        self.depth = depth
        self.inc = _block(in_channels, width)
        self.down = nn.ModuleList([nn.Sequential(nn.Conv2d(width, width, 3, 2, 1), nn.ReLU(), _block(width, width))
                                   for _ in range(depth)])
        self.up = nn.ModuleList([_block(2 * width, width) for _ in range(depth)])
        self.out = nn.Conv2d(width, 1, 1)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    bound = (6.0 / (m.in_channels * m.kernel_size[0] * m.kernel_size[1])) ** 0.5
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.zero_()
            self.out.weight.mul_(0.1)

    @staticmethod
    def standardize(x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(-2, -1), keepdim=True)
        std = x.std(dim=(-2, -1), keepdim=True)
        return (x - mean) / (std + 1e-6)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x[None]
        h, w = x.shape[-2:]
        if h % 2**self.depth or w % 2**self.depth:
            raise ValueError(f"input {h}x{w} must be divisible by {2 ** self.depth}")
        skips = [self.inc(self.standardize(x))]
        for down in self.down:
            skips.append(down(skips[-1]))
        y = skips.pop()
        for up in self.up:
            skip = skips.pop()
            y = up(torch.cat([F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False), skip], 1))
        return torch.sigmoid(self.out(y))


# --------------------------------------------------------------------------- data


@dataclass
class PrivacyConfig:
    width: int = 64
    depth: int = 4
    epochs: int = 50
    iters_per_epoch: int = 100
    batch_size: int = 2
    lr: float = 1e-3
    grad_weight: float = 1.0
    views_per_scene: int = 40
    n_samples: int = 32
    n_importance: int = 16
    use_labels: bool = False
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacyConfig":
        return cls(**d)


@dataclass
class AttackScene:
    """A trained field with the views it was trained on."""

    scene_id: str
    model: FieldModel
    views: list[View]
    cache: list[tuple[torch.Tensor, np.ndarray]] = field(default_factory=list, repr=False)


def render_feature_map(model: FieldModel, view: View, cfg: PrivacyConfig) -> torch.Tensor:
    """Rendered geometric features (G, H, W), optionally with coarse label one-hots appended."""
    feat = render_view(model, view.camera, None, "geo_feature", cfg.n_samples, cfg.n_importance)
    parts = [torch.from_numpy(feat)]
    if cfg.use_labels:
        logits = render_view(model, view.camera, None, "seg_coarse", cfg.n_samples, cfg.n_importance)
        labels = torch.from_numpy(logits.argmax(axis=0))
        parts.append(F.one_hot(labels, logits.shape[0]).permute(2, 0, 1).to(parts[0].dtype))
    return torch.cat(parts, 0).float()


def build_cache(scene: AttackScene, cfg: PrivacyConfig, rng: np.random.Generator | None = None):
    views = scene.views
    if cfg.views_per_scene and len(views) > cfg.views_per_scene:
        rng = rng or np.random.default_rng(cfg.seed)
        views = [views[i] for i in sorted(rng.choice(len(views), cfg.views_per_scene, replace=False))]
    scene.cache = [(render_feature_map(scene.model, v, cfg), v.image.astype(np.float32)) for v in views]
    return scene.cache


def check_disjoint(attackers: list[AttackScene], victims) -> None:
    victim_ids = {v if isinstance(v, str) else v.scene_id for v in victims}
    clash = victim_ids & {a.scene_id for a in attackers}
    if clash:
        raise ValueError(f"victim scene(s) {sorted(clash)} also used for attacker training")


def train_inversion(attackers: list[AttackScene], cfg: PrivacyConfig = PrivacyConfig(), victims=(),
                    allow_overlap: bool = False) -> InversionDecoder:
    """Fit the decoder on the attackers' rendered features.

    Every epoch draws one attacker scene; every iteration a batch of its views.
    """
    if len(attackers) < 2 and not allow_overlap:
        raise ValueError("need at least two attacker scenes")
    if not allow_overlap:
        check_disjoint(attackers, victims)
    rng = np.random.default_rng(cfg.seed)
    for a in attackers:
        if not a.cache:
            build_cache(a, cfg, rng)
    in_ch = attackers[0].cache[0][0].shape[0]
    torch.manual_seed(cfg.seed)
    decoder = InversionDecoder(in_ch, cfg.width, cfg.depth, seed=cfg.seed)
    opt = torch.optim.Adam(decoder.parameters(), lr=cfg.lr)
    for _ in range(cfg.epochs):
        scene = attackers[int(rng.integers(len(attackers)))]
        for _ in range(cfg.iters_per_epoch):
            idx = rng.choice(len(scene.cache), size=min(cfg.batch_size, len(scene.cache)), replace=False)
            x = torch.stack([scene.cache[i][0] for i in idx])
            y = torch.stack([torch.from_numpy(scene.cache[i][1]) for i in idx])[:, None]
            pred = decoder(x)
            loss = (pred - y).abs().mean() + cfg.grad_weight * gradient_difference_loss(pred, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return decoder.eval()


# --------------------------------------------------------------------------- attack


@dataclass
class PrivacyReport:
    variant: str
    scene_id: str
    mae: list[float]
    psnr: list[float]
    ssim: list[float]
    reconstructions: list[np.ndarray] = field(default_factory=list, repr=False)
    targets: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def mean_mae(self) -> float:
        return float(np.mean(self.mae))

    def summary(self) -> dict:
        return {"variant": self.variant, "scene_id": self.scene_id, "n_views": len(self.psnr),
                "mae": self.mean_mae, "psnr": self.mean_psnr, "ssim": self.mean_ssim}


@torch.no_grad()
def decode(decoder: InversionDecoder, feat: torch.Tensor) -> np.ndarray:
    h, w = feat.shape[-2:]
    mult = 2**decoder.depth
    if h % mult or w % mult:
        logger.warning("feature map %dx%d resampled to a multiple of %d", h, w, mult)
        size = (max(mult, round(h / mult) * mult), max(mult, round(w / mult) * mult))
        out = decoder(F.interpolate(feat[None], size=size, mode="bilinear", align_corners=False))
        return F.interpolate(out, size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()
    return decoder(feat)[0, 0].numpy()


def attack(decoder: InversionDecoder, victim: AttackScene, cfg: PrivacyConfig = PrivacyConfig(),
           variant: str = "", keep_images: bool = False) -> PrivacyReport:
    report = PrivacyReport(variant, victim.scene_id, [], [], [])
    for v in victim.views:
        rec = np.clip(decode(decoder, render_feature_map(victim.model, v, cfg)), 0.0, 1.0)
        report.mae.append(mae(rec, v.image))
        report.psnr.append(psnr(rec, v.image))
        report.ssim.append(ssim(rec, v.image))
        if keep_images:
            report.reconstructions.append(rec)
            report.targets.append(v.image)
    return report


def attack_features(decoder: InversionDecoder, feats, images, variant: str = "", scene_id: str = "") -> PrivacyReport:
    """Attack with precomputed feature maps (e.g. noise for the noise-floor check)."""
    report = PrivacyReport(variant, scene_id, [], [], [])
    for feat, img in zip(feats, images):
        rec = np.clip(decode(decoder, feat), 0.0, 1.0)
        report.mae.append(mae(rec, img))
        report.psnr.append(psnr(rec, img))
        report.ssim.append(ssim(rec, img))
    return report


def mean_image_baseline(attackers: list[AttackScene], victim_images) -> float:
    """PSNR of predicting the attackers' mean training image for every victim view."""
    imgs = [img for a in attackers for _, img in a.cache] or [v.image for a in attackers for v in a.views]
    mean_img = np.mean(imgs, axis=0)
    return float(np.mean([psnr(mean_img, g) for g in victim_images]))


# --------------------------------------------------------------------------- output


def write_report_csv(reports: list[PrivacyReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "scene_id", "view", "mae", "psnr", "ssim"])
        for r in reports:
            for i, (a, p, s) in enumerate(zip(r.mae, r.psnr, r.ssim)):
                writer.writerow([r.variant, r.scene_id, i, f"{a:.6f}", f"{p:.4f}", f"{s:.6f}"])
    return path


def write_contact_sheet(reports: list[PrivacyReport], path, max_rows: int = 6) -> Path:
    """Rows of ground truth followed by each report's reconstruction of the same view."""
    if not reports or not reports[0].targets:
        raise ValueError("reports carry no images; attack with keep_images=True")
    rows = []
    for i in range(min(max_rows, len(reports[0].targets))):
        cells = [reports[0].targets[i]] + [r.reconstructions[i] for r in reports]
        rows.append(np.concatenate(cells, axis=1))
    sheet = (np.clip(np.concatenate(rows, axis=0), 0, 1) * 255).round().astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet).save(path)
    return path
