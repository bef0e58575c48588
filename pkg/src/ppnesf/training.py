"""Per-scene training of the segmentation field, image encoder and prototypes."""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .diffcore import LrSchedule, ScheduledAdam, load_checkpoint, save_checkpoint
from .encoder2d import ImageEncoder
from .fields import FieldConfig, FieldModel, render_rays, render_view, rays_to_tensors
from .geometry import generate_rays
from .labeling import PrototypeBank, beta_schedule, derive_coarse_targets, derive_fine_targets, ema_update
from .losses import (
    DEFAULT_WEIGHTS,
    LossReport,
    loss_ce_joint,
    loss_depth,
    loss_dist,
    loss_hierar,
    loss_nce,
    loss_photometric,
    weighted_total,
)
from .scenes import View, ViewSet

logger = logging.getLogger(__name__)

VARIANTS = ("ppnesf", "rgb", "rgb+seg")


@dataclass
class TrainConfig:
    rays_per_step: int = 4096
    total_steps: int = 20_000
    lr_field: tuple[float, float] = (1e-2, 1e-4)
    lr_encoder: tuple[float, float] = (1e-3, 1e-4)
    mlp_lr_scale: float = 1.0
    n_coarse: int = 20
    n_sub: int = 5
    n_fine: int = 100
    tau: float = 0.1
    tau_fine: float = 0.07
    tau_nce: float = 0.1
    eps: float = 0.05
    mu: float = 0.996
    n_uncertainty_samples: int = 8
    sinkhorn_iters: int = 100
    n_samples: int = 32
    n_importance: int = 16
    grad_clip: float = 10.0
    seed: int = 0
    variant: str = "ppnesf"
    use_dist: bool = True
    rgb_weight: float = 1.0
    loss_weights: dict[str, float] = field(default_factory=dict)
    checkpoint_every: int = 0
    field: dict = field(default_factory=dict)
    encoder_widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    encoder_head_hidden: int = 32

    def __post_init__(self):
        self.lr_field = tuple(self.lr_field)
        self.lr_encoder = tuple(self.lr_encoder)
        self.encoder_widths = tuple(self.encoder_widths)
        if self.n_fine != self.n_sub * self.n_coarse:
            raise ValueError(f"n_fine={self.n_fine} must equal n_sub*n_coarse={self.n_sub * self.n_coarse}")
        rates = (*self.lr_field, *self.lr_encoder, self.tau, self.tau_fine, self.tau_nce, self.eps)
        if min(rates) <= 0 or self.mlp_lr_scale <= 0:
            raise ValueError("learning rates and temperatures must be positive")
        if not 0 <= self.mu <= 1:
            raise ValueError("mu must lie in [0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.rays_per_step < self.n_fine // self.n_sub or self.total_steps < 1:
            raise ValueError("rays_per_step must be at least K and total_steps positive")
        unknown = set(self.loss_weights) - set(DEFAULT_WEIGHTS) - {"rgb"}
        if unknown:
            raise ValueError(f"unknown loss weights {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def segmentation(self) -> bool:
        return self.variant != "rgb"

    @property
    def photometric(self) -> bool:
        return self.variant != "ppnesf"

    def weights(self) -> dict[str, float]:
        w = {**DEFAULT_WEIGHTS, **self.loss_weights}
        if not self.use_dist:
            w["dist"] = 0.0
        if self.photometric:
            w.setdefault("rgb", self.rgb_weight)
        if not self.segmentation:
            for k in ("nce", "ce_coarse", "ce_fine", "hierar"):
                w[k] = 0.0
        return w

    def field_config(self) -> FieldConfig:
        return FieldConfig(n_coarse=self.n_coarse, n_fine=self.n_fine, **self.field)


@dataclass
class TrainState:
    config: TrainConfig
    model: FieldModel
    encoder: ImageEncoder | None
    bank: PrototypeBank | None
    optimizer: ScheduledAdam
    step: int = 0
    weights: dict[str, float] = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)
    scene_id: str = ""


def build_state(config: TrainConfig, scene_id: str = "") -> TrainState:
    model = FieldModel(config.field_config(), with_feature_field=config.segmentation,
                       with_rgb=config.photometric, seed=config.seed)
    encoder = bank = None
    field_lr = LrSchedule(*config.lr_field, config.total_steps)
    if config.mlp_lr_scale == 1.0:
        groups = [(model.parameters(), field_lr)]
    else:
        groups = [([p for n, p in model.named_parameters() if "grid" in n], field_lr)]
    if config.segmentation:
        encoder = ImageEncoder(config.n_coarse, config.n_fine, model.cfg.feature_dim, config.encoder_widths,
                               config.encoder_head_hidden, seed=config.seed + 17)
        bank = PrototypeBank.random(config.n_coarse, config.n_sub, model.cfg.feature_dim, seed=config.seed + 29)
        groups.append((encoder.parameters(), LrSchedule(*config.lr_encoder, config.total_steps)))
    if config.mlp_lr_scale != 1.0:
        # MLPs last so the encoder keeps group index 1
        mlp_lr = LrSchedule(*(r * config.mlp_lr_scale for r in config.lr_field), config.total_steps)
        groups.append(([p for n, p in model.named_parameters() if "grid" not in n], mlp_lr))
    return TrainState(config, model, encoder, bank, ScheduledAdam(groups), weights=config.weights(),
                      scene_id=scene_id)


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + step * 7_919 + 12_345) % (2**63))


def view_for_step(n_views: int, seed: int, step: int) -> int:
    epoch, pos = divmod(step, n_views)
    return int(np.random.default_rng([seed, epoch]).permutation(n_views)[pos])


def _pixel_batch(view: View, n: int, gen: torch.Generator):
    h, w = view.image.shape
    idx = torch.randperm(h * w, generator=gen)[: min(n, h * w)]
    rows, cols = idx // w, idx % w
    px = np.stack([cols.numpy() + 0.5, rows.numpy() + 0.5], axis=1)
    return rows, cols, px


def train_step(state: TrainState, view: View, generator: torch.Generator | None = None) -> LossReport | None:
    """One optimisation step on a single view. Returns None when skipped."""
    cfg = state.config
    gen = generator or step_generator(cfg.seed, state.step)
    model, encoder = state.model, state.encoder
    rows, cols, px = _pixel_batch(view, cfg.rays_per_step, gen)
    dtype = next(model.parameters()).dtype
    o, d, n, f = rays_to_tensors(generate_rays(view.camera, px), dtype)
    kinds = ["depth"]
    if cfg.segmentation:
        kinds += ["seg_coarse", "seg_fine", "feature"]
    if cfg.photometric:
        kinds.append("rgb")

    state.optimizer.zero_grad()
    out = render_rays(model, o, d, n, f, kinds, cfg.n_samples, cfg.n_importance, gen, perturb=True)
    terms: dict[str, torch.Tensor] = {}
    gt_depth = torch.as_tensor(view.depth[rows, cols], dtype=dtype) if view.depth is not None else None
    if gt_depth is not None and state.weights.get("depth", 0) > 0:
        terms["depth"] = loss_depth(out["depth"], gt_depth)
    else:
        terms["depth"] = out["depth"].sum() * 0.0
    terms["dist"] = loss_dist(out["weights"], out["t"], out["deltas"], n, f)
    if cfg.photometric:
        gt = torch.as_tensor(view.image[rows, cols], dtype=dtype)
        terms["rgb"] = loss_photometric(out["rgb"][:, 0], gt)

    old_bank = state.bank
    containment = float("nan")
    if cfg.segmentation:
        enc = encoder(view.image).at_pixels(rows, cols)
        f2d = enc.features
        f3d = F.normalize(out["feature"], dim=-1, eps=1e-8)
        terms["nce"] = loss_nce(f2d, f3d, cfg.tau_nce)
        plan, coarse = derive_coarse_targets(f2d, f3d, state.bank, cfg.tau, cfg.eps, cfg.sinkhorn_iters)
        terms["ce_coarse"] = loss_ce_joint(plan.q, enc.logits_coarse, out["seg_coarse"], enc.unc_coarse,
                                           cfg.n_uncertainty_samples, gen)
        plan_f, fine = derive_fine_targets(f2d, f3d, state.bank, coarse, cfg.tau_fine, cfg.eps, cfg.sinkhorn_iters)
        containment = float((fine // cfg.n_sub == coarse).double().mean())
        terms["ce_fine"] = loss_ce_joint(plan_f.q, enc.logits_fine, out["seg_fine"], enc.unc_fine,
                                         cfg.n_uncertainty_samples, gen)
        beta = beta_schedule(state.step, cfg.total_steps)
        state.bank = ema_update(state.bank, f2d, f3d, coarse, fine, cfg.mu, beta)
        terms["hierar"] = loss_hierar(f2d, f3d, state.bank, coarse, fine, cfg.tau)

    total = weighted_total(terms, state.weights)
    values = {k: float(v.detach()) for k, v in terms.items()}
    if not math.isfinite(float(total.detach())) or not all(math.isfinite(v) for v in values.values()):
        logger.warning("non-finite loss at step %d; step skipped", state.step)
        state.bank = old_bank
        state.step += 1
        return None
    total.backward()
    if not state.optimizer.grads_finite():
        logger.warning("non-finite gradient at step %d; step skipped", state.step)
        state.bank = old_bank
        state.step += 1
        return None
    if cfg.grad_clip > 0:
        state.optimizer.clip(cfg.grad_clip)
    state.optimizer.step(state.step)
    report = LossReport(values, dict(state.weights))
    lrs = [g["lr"] for g in state.optimizer.optimizer.param_groups]
    state.log.append({"step": state.step, **report.row(), "lr_field": lrs[0],
                      "lr_encoder": lrs[1] if cfg.segmentation else 0.0, "containment": containment})
    state.step += 1
    return report


# --------------------------------------------------------------------------- checkpoints


def state_sections(state: TrainState, keep_feature_field: bool = True, with_optimizer: bool = True):
    sections = {}
    for name, t in state.model.state_dict().items():
        if not keep_feature_field and name.startswith(("gamma_grid", "gamma_mlp")):
            continue
        sections[f"field.{name}"] = t.detach().cpu().numpy()
    if state.encoder is not None:
        for name, t in state.encoder.state_dict().items():
            sections[f"encoder.{name}"] = t.detach().cpu().numpy()
    if state.bank is not None:
        sections.update(state.bank.to_exact_sections())
    if with_optimizer:
        for name, t in state.optimizer.state_arrays().items():
            sections[f"optim.{name}"] = t.detach().cpu().numpy()
    return sections


def save_state(state: TrainState, path, keep_feature_field: bool = True, with_optimizer: bool = True,
               tag: str = "training") -> Path:
    meta = {"config": state.config.to_dict(), "step": state.step, "scene_id": state.scene_id,
            "has_feature_field": keep_feature_field and state.model.has_feature_field,
            "has_rgb": state.model.has_rgb, "tag": tag}
    return save_checkpoint(path, state_sections(state, keep_feature_field, with_optimizer), meta)


def load_state(path) -> TrainState:
    sections, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    state = build_state(cfg, meta.get("scene_id", ""))
    if not meta.get("has_feature_field", True):
        state.model.strip_feature_field()
    if not meta.get("has_rgb", False):
        state.model.strip_rgb()

    def load_module(module, prefix):
        sd = {k[len(prefix):]: torch.from_numpy(v) for k, v in sections.items() if k.startswith(prefix)}
        module.load_state_dict(sd)

    load_module(state.model, "field.")
    if state.encoder is not None:
        load_module(state.encoder, "encoder.")
    if state.bank is not None:
        state.bank = PrototypeBank.from_sections(sections, cfg.n_sub)
    optim = {k[len("optim."):]: torch.from_numpy(v) for k, v in sections.items() if k.startswith("optim.")}
    if optim:
        state.optimizer.load_state_arrays(optim)
    state.step = int(meta.get("step", 0))
    return state


def write_log(rows: list[dict], path) -> None:
    if not rows:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


# --------------------------------------------------------------------------- driver


def train_scene(config: TrainConfig, views: ViewSet | list[View], out_dir=None, state: TrainState | None = None,
                stop_at: int | None = None, keep_training_artifacts: bool = False) -> TrainState:
    """Run (or resume) training up to ``stop_at`` (default: ``total_steps``).

    With ``out_dir`` set, periodic training checkpoints, the loss log and the
    final checkpoint (feature field removed unless ``keep_training_artifacts``)
    are written there.
    """
    scene_id = views.scene_id if isinstance(views, ViewSet) else ""
    train_views = views.train if isinstance(views, ViewSet) else list(views)
    if not train_views:
        raise ValueError("no training views")
    if state is None:
        state = build_state(config, scene_id)
    if all(v.depth is None or not np.isfinite(v.depth).any() for v in train_views):
        logger.warning("no depth maps available; depth loss disabled")
        state.weights["depth"] = 0.0
    stop = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    out_dir = Path(out_dir) if out_dir is not None else None
    while state.step < stop:
        view = train_views[view_for_step(len(train_views), config.seed, state.step)]
        train_step(state, view)
        if out_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_state(state, out_dir / f"step_{state.step:06d}.nesf")
    if out_dir is not None:
        write_log(state.log, out_dir / "train_log.csv")
        if state.step >= config.total_steps:
            save_state(state, out_dir / "final.nesf", keep_feature_field=keep_training_artifacts,
                       with_optimizer=keep_training_artifacts, tag="final")
    return state


def finalize(state: TrainState) -> TrainState:
    """Deployable copy: feature field and rgb head removed."""
    final = copy.copy(state)
    final.model = copy.deepcopy(state.model).strip_feature_field().strip_rgb()
    return final


# --------------------------------------------------------------------------- evaluation


@torch.no_grad()
def coarse_agreement(model: FieldModel, encoder: ImageEncoder, views, n_samples: int = 32,
                     n_importance: int = 16) -> float:
    """Fraction of pixels where rendered and encoder coarse argmax agree."""
    hits = total = 0
    for v in views:
        rendered = render_view(model, v.camera, None, "seg_coarse", n_samples, n_importance)
        lab3 = rendered.argmax(axis=0)
        lab2 = encoder(v.image).logits_coarse[0].argmax(dim=0).numpy()
        hits += int((lab3 == lab2).sum())
        total += lab3.size
    return hits / max(total, 1)


@torch.no_grad()
def prototype_utilization(model: FieldModel, encoder: ImageEncoder, bank: PrototypeBank, views,
                          config: TrainConfig) -> float:
    """Share of coarse classes receiving pixels when labelling whole images."""
    used = torch.zeros(bank.n_coarse, dtype=torch.bool)
    for v in views:
        feat3 = render_view(model, v.camera, None, "feature", config.n_samples, config.n_importance)
        f3d = F.normalize(torch.from_numpy(feat3).reshape(feat3.shape[0], -1).T, dim=-1)
        f2d = encoder(v.image).features[0].reshape(f3d.shape[1], -1).T
        _, coarse = derive_coarse_targets(f2d, f3d, bank, config.tau, config.eps, config.sinkhorn_iters)
        used[coarse.unique()] = True
    return float(used.float().mean())
