"""Training objectives and the weighted loss report."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .labeling import PrototypeBank

logger = logging.getLogger(__name__)

# The inter-level term has no counterpart without proposal networks.
DEFAULT_WEIGHTS = {
    "depth": 2.0,
    "dist": 0.5,
    "nce": 0.2,
    "ce_coarse": 0.2,
    "ce_fine": 0.2,
    "hierar": 0.05,
}
TERMS = ("nce", "ce_coarse", "ce_fine", "hierar", "depth", "dist", "rgb")


@dataclass
class LossReport:
    values: dict[str, float]
    weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))

    @property
    def total(self) -> float:
        return float(sum(self.weights.get(k, 0.0) * self.values[k] for k in TERMS if k in self.values))

    def row(self) -> dict[str, float]:
        return {**{k: self.values.get(k, 0.0) for k in TERMS}, "total": self.total}


def weighted_total(terms: dict[str, torch.Tensor], weights: dict[str, float]) -> torch.Tensor:
    total = None
    for k in TERMS:
        if k in terms and weights.get(k, 0.0) != 0.0:
            part = weights[k] * terms[k]
            total = part if total is None else total + part
    if total is None:
        raise ValueError("no weighted loss terms")
    return total


def loss_nce(f2d: torch.Tensor, f3d: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """Symmetric InfoNCE between paired 2D and 3D pixel features."""
    n = f2d.shape[0]
    if n < 2:
        raise ValueError("InfoNCE needs at least two pixels")
    sim = f3d @ f2d.T / tau
    target = torch.arange(n)
    return 0.5 * (F.cross_entropy(sim, target) + F.cross_entropy(sim.T, target))


def sampled_log_softmax(logits: torch.Tensor, unc: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """log softmax of the mean over noise draws of ``logits + unc * eps_t``."""
    return torch.log_softmax(logits + unc * noise.mean(dim=0), dim=-1)


def loss_ce_joint(q: torch.Tensor, logits2d: torch.Tensor, logits3d: torch.Tensor, unc: torch.Tensor,
                  n_samples: int = 8, generator: torch.Generator | None = None) -> torch.Tensor:
    """Cross-entropy of both modalities against the OT plan, uncertainty-attenuated.

    The same ``n_samples`` Gaussian draws perturb the 2D and the 3D logits.
    ``q`` is the plan with rows summing to 1/N, so the result is a per-pixel mean.
    """
    noise = torch.randn((n_samples, *logits2d.shape), generator=generator, dtype=logits2d.dtype)
    ls2 = sampled_log_softmax(logits2d, unc, noise)
    ls3 = sampled_log_softmax(logits3d, unc, noise)
    return -(q.to(ls2.dtype) * (ls2 + ls3)).sum()


def prototype_contrastive(f: torch.Tensor, protos: torch.Tensor, assign: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-pixel ``-log softmax_k(f . p_k / tau)`` at the assigned class."""
    logits = f @ protos.detach().to(f.dtype).T / tau
    return -torch.log_softmax(logits, dim=1).gather(1, assign[:, None]).squeeze(1)


def _class_mean(values: torch.Tensor, assign: torch.Tensor, k: int) -> torch.Tensor:
    sums = torch.zeros(k, dtype=values.dtype).index_add(0, assign, values)
    counts = torch.bincount(assign, minlength=k)
    present = counts > 0
    return (sums[present] / counts[present].to(values.dtype)).mean()


def hierar_single(f, pc, pf, coarse, fine, n_sub, tau):
    lc = prototype_contrastive(f, pc, coarse, tau)
    lf = prototype_contrastive(f, pf, fine, tau)
    k = pc.shape[0]
    max_c = torch.full((k,), -torch.inf, dtype=lc.dtype).scatter_reduce(0, coarse, lc, reduce="amax")
    bounded = torch.maximum(lf, max_c[fine // n_sub])
    return 0.5 * _class_mean(lc, coarse, k) + _class_mean(bounded, fine, pf.shape[0])


def loss_hierar(f2d, f3d, bank: PrototypeBank, coarse: torch.Tensor, fine: torch.Tensor,
                tau: float = 0.1) -> torch.Tensor:
    """Hierarchical pixel-to-prototype loss, averaged over the 2D and 3D banks.

    Coarse term: half the mean over non-empty classes of the mean per-pixel
    loss. Fine term: per pixel ``max(L_fine, max coarse loss in the parent
    class)``, averaged the same way.
    """
    l2 = hierar_single(f2d, bank.p2d_coarse, bank.p2d_fine, coarse, fine, bank.n_sub, tau)
    l3 = hierar_single(f3d, bank.p3d_coarse, bank.p3d_fine, coarse, fine, bank.n_sub, tau)
    return 0.5 * (l2 + l3)


def loss_depth(rendered: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Masked L1 on metric depth."""
    if valid is None:
        valid = torch.isfinite(gt)
    valid = valid & torch.isfinite(gt)
    if not bool(valid.any()):
        logger.warning("depth loss with an empty mask")
        return rendered.sum() * 0.0
    return (rendered[valid] - gt[valid]).abs().mean()


def loss_dist(weights: torch.Tensor, t: torch.Tensor, deltas: torch.Tensor, near: torch.Tensor,
              far: torch.Tensor) -> torch.Tensor:
    """Ray-weight distortion penalty on normalised ray distance.

    ``sum_ij w_i w_j |s_i - s_j| + 1/3 sum_i w_i^2 ds_i`` averaged over rays.
    """
    span = (far - near).clamp_min(1e-9)[:, None]
    s = (t - near[:, None]) / span
    ds = deltas / span
    pair = (weights[:, :, None] * weights[:, None, :] * (s[:, :, None] - s[:, None, :]).abs()).sum((1, 2))
    return (pair + (weights * weights * ds).sum(1) / 3.0).mean()


def loss_photometric(rendered: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return ((rendered - gt) ** 2).mean()
