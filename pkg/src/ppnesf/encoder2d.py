"""Convolutional image encoder producing features, segmentations and uncertainties."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class EncoderOutput:
    features: torch.Tensor  # (B, D, H, W), unit norm per pixel
    logits_coarse: torch.Tensor  # (B, K, H, W)
    logits_fine: torch.Tensor  # (B, Kf, H, W)
    unc_coarse: torch.Tensor  # (B, K, H, W), > 0
    unc_fine: torch.Tensor  # (B, Kf, H, W), > 0

    def at_pixels(self, rows: torch.Tensor, cols: torch.Tensor, index: int = 0) -> "EncoderOutput":
        """Gather (N, C) rows at integer pixel positions of batch item ``index``."""
        def g(x):
            return x[index][:, rows, cols].T
        return EncoderOutput(g(self.features), g(self.logits_coarse), g(self.logits_fine),
                             g(self.unc_coarse), g(self.unc_fine))


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU())


def _head(cin, hidden, cout):
    return nn.Sequential(nn.Conv2d(cin, hidden, 3, 1, 1), nn.ReLU(),
                         nn.Conv2d(hidden, hidden, 3, 1, 1), nn.ReLU(),
                         nn.Conv2d(hidden, cout, 1))


class ImageEncoder(nn.Module):
    """Four conv stages (strides 1, 2, 2, 2) and a two-stage skip decoder.

    The coarse heads read the stride-4 decoder map, the fine heads the
    stride-2 map; both are upsampled back to full resolution. The feature
    head and both uncertainty heads see detached inputs, so only the
    segmentation heads train the shared trunk.
    """

    def __init__(self, n_coarse: int = 20, n_fine: int = 100, feature_dim: int = 16,
                 widths=(16, 32, 64, 64), head_hidden: int = 32, in_channels: int = 1, seed: int = 0):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.in_channels = in_channels
        self.stage1 = nn.Sequential(_conv(in_channels, w1), _conv(w1, w1))
        self.stage2 = nn.Sequential(_conv(w1, w2, 2), _conv(w2, w2))
        self.stage3 = nn.Sequential(_conv(w2, w3, 2), _conv(w3, w3))
        self.stage4 = nn.Sequential(_conv(w3, w4, 2), _conv(w4, w4))
        self.dec3 = _conv(w4 + w3, w3)
        self.dec2 = _conv(w3 + w2, w2)
        self.seg_coarse = _head(w3, head_hidden, n_coarse)
        self.seg_fine = _head(w2, head_hidden, n_fine)
        self.unc_coarse = _head(w3, head_hidden, n_coarse)
        self.unc_fine = _head(w2, head_hidden, n_fine)
        self.feature_head = _head(w2 + w1, head_hidden, feature_dim)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    bound = (6.0 / (m.in_channels * m.kernel_size[0] * m.kernel_size[1])) ** 0.5
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.zero_()
            # Start uncertainties small so early logits are barely perturbed.
            self.unc_coarse[-1].bias.fill_(-4.0)
            self.unc_fine[-1].bias.fill_(-4.0)

    def trunk_parameters(self) -> list[nn.Parameter]:
        mods = (self.stage1, self.stage2, self.stage3, self.stage4, self.dec3, self.dec2)
        return [p for m in mods for p in m.parameters()]

    def zero_heads(self):
        """Zero the final layer of every head."""
        with torch.no_grad():
            for head in (self.seg_coarse, self.seg_fine, self.unc_coarse, self.unc_fine, self.feature_head):
                head[-1].weight.zero_()
                head[-1].bias.zero_()
        return self

    def forward(self, image) -> EncoderOutput:
        x = torch.as_tensor(image, dtype=next(self.parameters()).dtype)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[None] if x.shape[0] == self.in_channels else x[:, None]
        if x.shape[1] != self.in_channels and self.in_channels == 1:
            x = x.mean(dim=1, keepdim=True)
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"image size {h}x{w} must be divisible by 4")
        f1 = self.stage1(x - 0.5)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        d3 = self.dec3(torch.cat([F.interpolate(f4, size=f3.shape[-2:], mode="bilinear", align_corners=False), f3], 1))
        d2 = self.dec2(torch.cat([F.interpolate(d3, size=f2.shape[-2:], mode="bilinear", align_corners=False), f2], 1))

        def up(t):
            return F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)

        lc = up(self.seg_coarse(d3))
        lf = up(self.seg_fine(d2))
        uc = F.softplus(up(self.unc_coarse(d3.detach()))) + 1e-4
        uf = F.softplus(up(self.unc_fine(d2.detach()))) + 1e-4
        feat_in = torch.cat([up(d2.detach()), f1.detach()], 1)
        feat = F.normalize(self.feature_head(feat_in), dim=1, eps=1e-8)
        return EncoderOutput(feat, lc, lf, uc, uf)


def coarse_argmax(out: EncoderOutput) -> np.ndarray:
    return out.logits_coarse[0].argmax(dim=0).cpu().numpy()
