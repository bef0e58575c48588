"""Finite-difference probes for checking reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch


def directional_fd(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                   directions: Sequence[torch.Tensor], eps: float, order: int = 4) -> float:
    """Central difference of a scalar ``fn`` along ``directions`` (in place, restored).

    ``order=2`` is the two-point stencil; ``order=4`` the five-point one,
    whose truncation error is small enough to afford a larger ``eps`` and so
    less cancellation.
    """
    stencil = {2: ((1, 0.5), (-1, -0.5)), 4: ((2, -1 / 12), (1, 2 / 3), (-1, -2 / 3), (-2, 1 / 12))}[order]
    total = 0.0
    with torch.no_grad():
        for k, c in stencil:
            for p, d in zip(params, directions):
                p.add_(d, alpha=k * eps)
            total += c * float(fn())
            for p, d in zip(params, directions):
                p.add_(d, alpha=-k * eps)
    return total / eps


def relative_error(a: float, b: float, floor: float = 1e-10) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_probe_errors(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                          n_probes: int = 50, eps: float = 1e-4, seed: int = 0,
                          floor: float = 1e-10, order: int = 4) -> np.ndarray:
    """Relative errors between autograd and central differences on random directions.

    ``params`` must be leaf tensors with ``requires_grad``; 64-bit is expected.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = fn()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    gen = torch.Generator().manual_seed(seed)
    errs = []
    for _ in range(n_probes):
        dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        norm = torch.sqrt(sum((d * d).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = float(sum((g * d).sum() for g, d in zip(grads, dirs)))
        numeric = directional_fd(fn, params, dirs, eps, order)
        errs.append(relative_error(analytic, numeric, floor))
    return np.asarray(errs)
