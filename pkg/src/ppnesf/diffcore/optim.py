"""Adam with per-group exponential learning-rate schedules."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable

import torch

logger = logging.getLogger(__name__)


def exponential_lr(step: int, total: int, lr0: float, lr_end: float) -> float:
    """``lr0 * (lr_end / lr0) ** (step / total)`` with step clipped to [0, total]."""
    if total <= 0:
        return lr0
    frac = min(max(step / total, 0.0), 1.0)
    return lr0 * math.exp(frac * math.log(lr_end / lr0))


@dataclass
class LrSchedule:
    lr0: float
    lr_end: float
    total: int

    def __call__(self, step: int) -> float:
        return exponential_lr(step, self.total, self.lr0, self.lr_end)


class ScheduledAdam:
    """Adam over several parameter groups, each following its own schedule.

    ``step`` refuses to apply an update when any gradient is non-finite and
    reports that by returning False; the moments are left untouched.
    """

    def __init__(self, groups: Iterable[tuple[Iterable[torch.nn.Parameter], LrSchedule]], eps: float = 1e-15):
        groups = list(groups)
        self.schedules = [s for _, s in groups]
        self.optimizer = torch.optim.Adam(
            [{"params": list(p), "lr": s(0)} for p, s in groups], betas=(0.9, 0.999), eps=eps
        )
        self.skipped = 0

    @property
    def params(self) -> list[torch.nn.Parameter]:
        return [p for g in self.optimizer.param_groups for p in g["params"]]

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=False)

    def grads_finite(self) -> bool:
        return all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in self.params)

    def clip(self, max_norm: float) -> float:
        return float(torch.nn.utils.clip_grad_norm_([p for p in self.params if p.grad is not None], max_norm))

    def step(self, step_index: int) -> bool:
        if not self.grads_finite():
            self.skipped += 1
            logger.warning("non-finite gradient at step %d; update skipped", step_index)
            return False
        for group, sched in zip(self.optimizer.param_groups, self.schedules):
            group["lr"] = sched(step_index)
        self.optimizer.step()
        return True

    def state_arrays(self) -> dict[str, torch.Tensor]:
        """Flat view of the moments for checkpointing."""
        out = {}
        for gi, group in enumerate(self.optimizer.param_groups):
            for pi, p in enumerate(group["params"]):
                st = self.optimizer.state.get(p)
                if not st:
                    continue
                out[f"{gi}.{pi}.exp_avg"] = st["exp_avg"]
                out[f"{gi}.{pi}.exp_avg_sq"] = st["exp_avg_sq"]
                out[f"{gi}.{pi}.step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
        return out

    def load_state_arrays(self, arrays: dict[str, torch.Tensor]):
        for gi, group in enumerate(self.optimizer.param_groups):
            for pi, p in enumerate(group["params"]):
                key = f"{gi}.{pi}"
                if f"{key}.exp_avg" not in arrays:
                    continue
                self.optimizer.state[p] = {
                    "step": torch.tensor(float(arrays[f"{key}.step"].reshape(-1)[0])),
                    "exp_avg": arrays[f"{key}.exp_avg"].to(p.dtype).reshape(p.shape).clone(),
                    "exp_avg_sq": arrays[f"{key}.exp_avg_sq"].to(p.dtype).reshape(p.shape).clone(),
                }


def optimizer_step(params: list[torch.nn.Parameter], optimizer: torch.optim.Optimizer, lr: float) -> bool:
    """Apply one Adam update at ``lr``; skip when a gradient is non-finite."""
    if any(p.grad is not None and not bool(torch.isfinite(p.grad).all()) for p in params):
        logger.warning("non-finite gradient; update skipped")
        return False
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return True
