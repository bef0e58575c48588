"""Self-supervised segmentation targets from prototype similarities and optimal transport."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np
import torch

logger = logging.getLogger(__name__)

DIAGNOSTICS: Counter = Counter()


@dataclass(frozen=True)
class PrototypeBank:
    """Aligned 2D/3D prototype sets at the coarse and fine level (float64, unit rows).

    Fine class ``k`` is a child of coarse class ``k // n_sub``.
    """

    p2d_coarse: torch.Tensor
    p3d_coarse: torch.Tensor
    p2d_fine: torch.Tensor
    p3d_fine: torch.Tensor
    n_sub: int

    @classmethod
    def random(cls, n_coarse: int, n_sub: int, dim: int, seed: int = 0) -> "PrototypeBank":
        gen = torch.Generator().manual_seed(seed)

        def unit(k):
            p = torch.randn(k, dim, generator=gen, dtype=torch.float64)
            return p / p.norm(dim=1, keepdim=True)

        return cls(unit(n_coarse), unit(n_coarse), unit(n_coarse * n_sub), unit(n_coarse * n_sub), n_sub)

    @property
    def n_coarse(self) -> int:
        return self.p2d_coarse.shape[0]

    @property
    def n_fine(self) -> int:
        return self.p2d_fine.shape[0]

    def parent(self, fine) -> torch.Tensor:
        return torch.as_tensor(fine) // self.n_sub

    def level(self, level: str) -> tuple[torch.Tensor, torch.Tensor]:
        if level == "coarse":
            return self.p2d_coarse, self.p3d_coarse
        if level == "fine":
            return self.p2d_fine, self.p3d_fine
        raise ValueError(f"unknown level {level!r}")

    def to_sections(self, prefix: str = "bank") -> dict[str, np.ndarray]:
        return {f"{prefix}.{name}": getattr(self, name).numpy().astype(np.float32)
                for name in ("p2d_coarse", "p3d_coarse", "p2d_fine", "p3d_fine")}

    def to_exact_sections(self, prefix: str = "bank") -> dict[str, np.ndarray]:
        """Bit-exact float64 storage: each value as four 16-bit words held in float32."""
        out = {}
        for name in ("p2d_coarse", "p3d_coarse", "p2d_fine", "p3d_fine"):
            x = np.ascontiguousarray(getattr(self, name).numpy(), dtype="<f8")
            out[f"{prefix}.{name}.u16"] = x.view("<u2").astype(np.float32)
        return out

    @classmethod
    def from_sections(cls, sections: dict[str, np.ndarray], n_sub: int, prefix: str = "bank") -> "PrototypeBank":
        vals = {}
        for name in ("p2d_coarse", "p3d_coarse", "p2d_fine", "p3d_fine"):
            if f"{prefix}.{name}.u16" in sections:
                words = sections[f"{prefix}.{name}.u16"].astype("<u2")
                x = np.ascontiguousarray(words).view("<f8").copy()
            else:
                x = sections[f"{prefix}.{name}"].astype(np.float64)
                x = x / np.linalg.norm(x, axis=1, keepdims=True)
            vals[name] = torch.from_numpy(x)
        return cls(n_sub=n_sub, **vals)


@dataclass
class AssignmentMatrix:
    """Transport plan ``Q`` (N, K) with its achieved marginals."""

    q: torch.Tensor
    converged: bool = True
    residual: float = 0.0
    iterations: int = 0

    @property
    def row_sums(self) -> torch.Tensor:
        return self.q.sum(dim=1)

    @property
    def col_sums(self) -> torch.Tensor:
        return self.q.sum(dim=0)

    def assignments(self) -> torch.Tensor:
        return self.q.argmax(dim=1)


def score_matrix(f2d: torch.Tensor, f3d: torch.Tensor, p2d: torch.Tensor, p3d: torch.Tensor,
                 tau: float) -> torch.Tensor:
    """Per-pixel softmax over classes of the summed 2D/3D similarities, shape (K, N)."""
    logits = (f2d.to(torch.float64) @ p2d.T + f3d.to(torch.float64) @ p3d.T) / tau
    return torch.softmax(logits, dim=1).T


def sinkhorn(scores: torch.Tensor, eps: float = 0.05, max_iters: int = 100, tol: float = 1e-6,
             log_scores: torch.Tensor | None = None) -> AssignmentMatrix:
    """Entropic OT onto U(1/N, 1/K) with kernel ``exp(log S / eps)``.

    ``scores`` is (K, N). Alternating row/column scaling in the log domain;
    stops once the row residual is below ``tol`` (columns are exact after
    every column update). If ``max_iters`` runs out the last iterate is
    returned with ``converged=False``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be positive")
    if log_scores is None:
        if bool((scores <= 0).any()):
            raise ValueError("scores must be strictly positive")
        log_scores = torch.log(scores.to(torch.float64))
    logk = log_scores.to(torch.float64).T / eps  # (N, K)
    n, k = logk.shape
    log_r, log_c = -np.log(n), -np.log(k)
    lv = torch.zeros(k, dtype=torch.float64)
    lse_rows = torch.logsumexp(logk, dim=1)
    residual = float("inf")
    it = 0
    for it in range(1, max_iters + 1):
        lu = log_r - lse_rows
        lv = log_c - torch.logsumexp(logk + lu[:, None], dim=0)
        lse_rows = torch.logsumexp(logk + lv[None, :], dim=1)
        residual = float((torch.exp(lu + lse_rows) - 1.0 / n).abs().max())
        if residual < tol:
            break
    q = torch.exp(logk + lu[:, None] + lv[None, :])
    converged = residual < tol
    if not converged:
        DIAGNOSTICS["sinkhorn_not_converged"] += 1
        logger.debug("sinkhorn did not converge in %d iterations (residual %.3e)", max_iters, residual)
    return AssignmentMatrix(q, converged, residual, it)


def sinkhorn_blocks(log_scores: torch.Tensor, mask: torch.Tensor, eps: float = 0.05, max_iters: int = 100,
                    tol: float = 1e-6):
    """Independent Sinkhorn problems solved side by side.

    ``log_scores`` is (B, M, n) with padded rows marked False in ``mask``
    (B, M). Block ``b`` is transported onto U(1/m_b, 1/n), m_b its row
    count. Returns plans (B, M, n), per-block residuals and the iteration count.
    """
    logk = log_scores.to(torch.float64) / eps
    logk = torch.where(mask[..., None], logk, torch.full_like(logk, -torch.inf))
    b, _, n = logk.shape
    m = mask.sum(dim=1).to(torch.float64).clamp_min(1.0)
    log_r = -torch.log(m)[:, None]
    log_c = -np.log(n)
    lv = torch.zeros(b, n, dtype=torch.float64)
    lse_rows = torch.logsumexp(logk, dim=2)
    residual = torch.full((b,), float("inf"), dtype=torch.float64)
    it = 0
    for it in range(1, max_iters + 1):
        lu = torch.where(mask, log_r - lse_rows, torch.full_like(lse_rows, -torch.inf))
        lv = log_c - torch.logsumexp(logk + lu[..., None], dim=1)
        lse_rows = torch.logsumexp(logk + lv[:, None, :], dim=2)
        dev = torch.where(mask, (torch.exp(lu + lse_rows) - 1.0 / m[:, None]).abs(), torch.zeros_like(lse_rows))
        residual = dev.amax(dim=1)
        if float(residual.max()) < tol:
            break
    q = torch.exp(logk + lu[..., None] + lv[:, None, :])
    return torch.nan_to_num(q, nan=0.0), residual, it


def derive_coarse_targets(f2d, f3d, bank: PrototypeBank, tau: float = 0.1, eps: float = 0.05,
                          max_iters: int = 100, tol: float = 1e-6):
    """Coarse plan Q (N, K) and the per-pixel argmax assignment."""
    n = f2d.shape[0]
    if n < bank.n_coarse:
        raise ValueError(f"need at least K={bank.n_coarse} pixels, got {n}")
    p2d, p3d = bank.level("coarse")
    logits = (f2d.detach().to(torch.float64) @ p2d.T + f3d.detach().to(torch.float64) @ p3d.T) / tau
    log_s = torch.log_softmax(logits, dim=1).T
    plan = sinkhorn(None, eps, max_iters, tol, log_scores=log_s)
    return plan, plan.assignments()


def derive_fine_targets(f2d, f3d, bank: PrototypeBank, coarse: torch.Tensor, tau2: float = 0.07,
                        eps: float = 0.05, max_iters: int = 100, tol: float = 1e-6):
    """Fine plan (N, K_f) built from one OT problem per coarse class.

    Each coarse class's pixels are transported onto its ``n_sub`` children
    with uniform marginals; the blocks are stitched so every row sums to 1/N.
    Classes with fewer pixels than children fall back to a per-pixel softmax.
    """
    n = f2d.shape[0]
    ns = bank.n_sub
    f2d = f2d.detach().to(torch.float64)
    f3d = f3d.detach().to(torch.float64)
    qf = torch.zeros(n, bank.n_fine, dtype=torch.float64)
    classes, counts = torch.unique(coarse, return_counts=True)
    # Row slot of every pixel inside its coarse-class block.
    order = torch.argsort(coarse, stable=True)
    starts = torch.cumsum(counts, 0) - counts
    slot = torch.empty(n, dtype=torch.int64)
    slot[order] = torch.arange(n) - torch.repeat_interleave(starts, counts)
    block_of = torch.full((bank.n_coarse,), -1, dtype=torch.int64)
    block_of[classes] = torch.arange(len(classes))
    blk = block_of[coarse]
    children = coarse[:, None] * ns + torch.arange(ns)
    logits = ((f2d[:, None, :] * bank.p2d_fine[children]).sum(-1)
              + (f3d[:, None, :] * bank.p3d_fine[children]).sum(-1)) / tau2  # (N, ns)
    logp = torch.log_softmax(logits, dim=1)
    solvable = counts >= ns
    for k in classes[~solvable].tolist():
        logger.debug("coarse class %d has fewer than %d pixels; softmax fallback", k, ns)
    row_ok = solvable[blk]
    converged, residual = True, 0.0
    if bool(row_ok.any()):
        m_max = int(counts[solvable].max())
        padded = torch.zeros(len(classes), m_max, ns, dtype=torch.float64)
        mask = torch.zeros(len(classes), m_max, dtype=torch.bool)
        padded[blk[row_ok], slot[row_ok]] = logp[row_ok]
        mask[blk[row_ok], slot[row_ok]] = True
        plans, res, _ = sinkhorn_blocks(padded, mask, eps, max_iters, tol)
        scale = counts.to(torch.float64) / n
        block_q = plans[blk[row_ok], slot[row_ok]] * scale[blk[row_ok]][:, None]
        qf[row_ok.nonzero().squeeze(1)[:, None], children[row_ok]] = block_q
        converged = bool((res[solvable] < tol).all())
        residual = float((res[solvable] * scale[solvable]).max())
    fallback = ~row_ok
    if bool(fallback.any()):
        qf[fallback.nonzero().squeeze(1)[:, None], children[fallback]] = torch.exp(logp[fallback]) / n
    fine = coarse * ns + qf.view(n, -1, ns)[torch.arange(n), coarse].argmax(dim=1)
    return AssignmentMatrix(qf, converged, residual), fine


def beta_schedule(step: int, total: int, beta_max: float = 0.5) -> float:
    """Linear ramp of the 2D/3D blend weight from 0 to ``beta_max``."""
    if total <= 0:
        return beta_max
    return beta_max * min(max(step / total, 0.0), 1.0)


def _ema(p_own, p_other_mean, own_mean, counts, mu, beta):
    target = beta * own_mean + (1.0 - beta) * p_other_mean
    upd = mu * p_own + (1.0 - mu) * target
    upd = upd / upd.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return torch.where((counts > 0)[:, None], upd, p_own)


def _class_means(x: torch.Tensor, assign: torch.Tensor, k: int):
    sums = torch.zeros(k, x.shape[1], dtype=torch.float64).index_add_(0, assign, x.to(torch.float64))
    counts = torch.bincount(assign, minlength=k).to(torch.float64)
    return sums / counts.clamp_min(1.0)[:, None], counts


def ema_update(bank: PrototypeBank, f2d, f3d, coarse: torch.Tensor, fine: torch.Tensor | None = None,
               mu: float = 0.996, beta: float = 0.0) -> PrototypeBank:
    """Move prototypes toward the means of their assigned features.

    The 2D bank blends ``beta * mean(F2D) + (1 - beta) * mean(F3D)``; the 3D
    bank mirrors it with the modalities swapped. Empty classes keep their
    prototype.
    """
    f2d = f2d.detach()
    f3d = f3d.detach()
    out = {}
    levels = [("coarse", coarse)] + ([("fine", fine)] if fine is not None else [])
    for level, assign in levels:
        p2d, p3d = bank.level(level)
        m2, cnt = _class_means(f2d, assign, p2d.shape[0])
        m3, _ = _class_means(f3d, assign, p2d.shape[0])
        out[f"p2d_{level}"] = _ema(p2d, m3, m2, cnt, mu, beta)
        out[f"p3d_{level}"] = _ema(p3d, m2, m3, cnt, mu, beta)
    return replace(bank, **out)
