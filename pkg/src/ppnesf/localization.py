"""Pose estimation against a trained segmentation field.

A query is initialised by label-histogram retrieval (or any given pose) and
refined by minimising the cross-entropy between the encoder's segmentation
of the query image and the field's rendered segmentation, first with the
coarse classes and then with the fine ones.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder2d import EncoderOutput
from .fields import FieldModel, render_rays
from .geometry import Camera, Pose, pose_error, se3_exp_torch, so3_exp, unit_cube_interval

logger = logging.getLogger(__name__)


@dataclass
class RefineConfig:
    coarse_iters: int = 150
    fine_iters: int = 150
    rays_per_iter: int = 4096
    lr0: float = 2e-2
    decay: float = 0.33
    use_uncertainty: bool = True
    drop_quantile: float = 0.1
    n_samples: int = 32
    n_importance: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.coarse_iters < 0 or self.fine_iters < 0 or self.coarse_iters + self.fine_iters == 0:
            raise ValueError("iteration counts must be non-negative and not both zero")
        if self.lr0 <= 0 or not 0 < self.decay <= 1 or self.rays_per_iter < 1:
            raise ValueError("invalid learning rate, decay or ray count")

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        return cls(**d)


@dataclass
class LocalizationResult:
    pose: Pose  # camera-to-world
    translation_error: float = math.nan
    rotation_error: float = math.nan
    converged: bool = True
    losses: list[float] = field(default_factory=list)

    def within(self, max_trans: float, max_rot_deg: float) -> bool:
        return self.translation_error <= max_trans and self.rotation_error <= max_rot_deg


# --------------------------------------------------------------------------- retrieval


def label_histogram(labels, n_classes: int) -> np.ndarray:
    """L1-normalised histogram of integer labels (negative labels ignored)."""
    lab = np.asarray(labels).ravel()
    lab = lab[lab >= 0]
    h = np.bincount(lab, minlength=n_classes)[:n_classes].astype(np.float64)
    return h / max(h.sum(), 1.0)


def encoder_histogram(out: EncoderOutput) -> np.ndarray:
    k = out.logits_coarse.shape[1]
    return label_histogram(out.logits_coarse[0].argmax(dim=0).cpu().numpy(), k)


def retrieve_initial_pose(query, database: list[tuple[Pose, np.ndarray]]) -> Pose:
    """Pose of the database entry with the largest histogram intersection.

    ``query`` is an EncoderOutput or a precomputed histogram.
    """
    if not database:
        raise ValueError("empty retrieval database")
    h = encoder_histogram(query) if isinstance(query, EncoderOutput) else np.asarray(query, dtype=np.float64)
    scores = [np.minimum(h, hist).sum() for _, hist in database]
    return database[int(np.argmax(scores))][0]


def build_database(encoder, views) -> list[tuple[Pose, np.ndarray]]:
    with torch.no_grad():
        return [(v.camera.pose, encoder_histogram(encoder(v.image))) for v in views]


# --------------------------------------------------------------------------- refinement


def perturb_pose(pose: Pose, rot_deg: float, trans: float, rng: np.random.Generator) -> Pose:
    """Rotate about the camera centre by ``rot_deg`` and shift by ``trans``, random directions."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    shift = rng.normal(size=3)
    shift /= np.linalg.norm(shift)
    rot = pose.rotation @ so3_exp(axis * math.radians(rot_deg))
    return Pose(rot, pose.translation + trans * shift)


def uncertainty_weights(unc: torch.Tensor, drop_quantile: float = 0.1) -> torch.Tensor:
    """Per-pixel weights ``exp(-mean_k u)``, zeroed below the given quantile."""
    w = torch.exp(-unc.mean(dim=-1))
    if drop_quantile > 0 and w.numel() > 1:
        w = torch.where(w < torch.quantile(w, drop_quantile), torch.zeros_like(w), w)
    return w


def refinement_loss(model: FieldModel, camera_dirs: torch.Tensor, r_wc: torch.Tensor, t_wc: torch.Tensor,
                    target: torch.Tensor, weights: torch.Tensor, level: str, n_samples: int, n_importance: int,
                    generator: torch.Generator | None = None, perturb: bool = False,
                    interval: tuple | None = None) -> torch.Tensor:
    """Weighted mean of ``-sum_k s2D log s3D`` for a world-to-camera pose (R, t).

    ``camera_dirs`` are unit directions in the camera frame. The ray
    interval comes from the current pose unless ``interval=(near, far)`` is
    given, and is not differentiated either way.
    """
    r_cw = r_wc.T
    origin = -(r_cw @ t_wc)
    dirs = camera_dirs @ r_cw.T
    o = origin.expand_as(dirs)
    if interval is None:
        with torch.no_grad():
            interval = unit_cube_interval(o.detach().cpu().numpy(), dirs.detach().cpu().numpy())
    near, far = interval
    dtype = next(model.parameters()).dtype
    kind = "seg_coarse" if level == "coarse" else "seg_fine"
    out = render_rays(model, o.to(dtype), dirs.to(dtype), torch.as_tensor(near, dtype=dtype),
                      torch.as_tensor(far, dtype=dtype), (kind,), n_samples, n_importance, generator, perturb)
    log_s3 = torch.log_softmax(out[kind].to(target.dtype), dim=-1)
    ce = -(target * log_s3).sum(dim=-1)
    return (weights * ce).sum() / weights.sum().clamp_min(1e-12)


def _camera_dirs(camera: Camera, px: np.ndarray) -> torch.Tensor:
    d = camera.camera_directions(px)
    return torch.from_numpy(d / np.linalg.norm(d, axis=1, keepdims=True))


def _pose_loss(model, delta, p_wc: Pose, dirs, target, weights, level, cfg: RefineConfig, gen):
    dr, dt = se3_exp_torch(delta)
    r0 = torch.tensor(p_wc.rotation)
    t0 = torch.tensor(p_wc.translation)
    return refinement_loss(model, dirs, dr @ r0, dr @ t0 + dt, target, weights, level,
                           cfg.n_samples, cfg.n_importance, gen)


def refine_pose(model: FieldModel, query: EncoderOutput, camera: Camera, init: Pose,
                cfg: RefineConfig = RefineConfig(), gt: Pose | None = None,
                phases: tuple[str, ...] = ("coarse", "fine")) -> LocalizationResult:
    """Coarse-then-fine cross-entropy refinement of a camera-to-world pose.

    The world-to-camera extrinsic is updated as ``exp(delta) * P`` with
    ``delta`` re-zeroed after every step while Adam keeps its moments across
    both phases. Only ``delta`` receives gradients; the model is untouched.
    """
    if not init.is_valid():
        raise ValueError("initial pose is not a valid rigid transform")
    p_wc = init.inverse()
    delta = torch.zeros(6, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([delta], lr=cfg.lr0)
    h, w = camera.height, camera.width
    losses: list[float] = []
    converged = True
    lr = cfg.lr0
    prev_pose, retried = None, False
    iters = {"coarse": cfg.coarse_iters, "fine": cfg.fine_iters}
    for phase_idx, level in enumerate(phases):
        if phase_idx > 0:
            lr *= cfg.decay
        for g in opt.param_groups:
            g["lr"] = lr
        gen = torch.Generator().manual_seed(cfg.seed * 7_919 + phase_idx)
        logits = query.logits_coarse if level == "coarse" else query.logits_fine
        unc = query.unc_coarse if level == "coarse" else query.unc_fine
        probs = torch.softmax(logits[0].detach().to(torch.float64), dim=0)  # (K, H, W)
        unc = unc[0].detach().to(torch.float64)
        for _ in range(iters[level]):
            idx = torch.randperm(h * w, generator=gen)[: min(cfg.rays_per_iter, h * w)]
            rows, cols = idx // w, idx % w
            target = probs[:, rows, cols].T
            weights = (uncertainty_weights(unc[:, rows, cols].T, cfg.drop_quantile) if cfg.use_uncertainty
                       else torch.ones(len(idx), dtype=torch.float64))
            dirs = _camera_dirs(camera, np.stack([cols.numpy() + 0.5, rows.numpy() + 0.5], axis=1))
            loss = _pose_loss(model, delta, p_wc, dirs, target, weights, level, cfg, gen)
            if not torch.isfinite(loss) and prev_pose is not None and not retried:
                # Undo the last update and continue at half the step size.
                retried = True
                p_wc, lr = prev_pose, lr * 0.5
                for g in opt.param_groups:
                    g["lr"] = lr
                loss = _pose_loss(model, delta, p_wc, dirs, target, weights, level, cfg, gen)
            if not torch.isfinite(loss):
                logger.warning("non-finite refinement loss; stopping")
                converged = False
                break
            (grad,) = torch.autograd.grad(loss, [delta])
            if not bool(torch.isfinite(grad).all()):
                converged = False
                break
            delta.grad = grad
            opt.step()
            prev_pose = p_wc
            with torch.no_grad():
                step_r, step_t = se3_exp_torch(delta.detach())
                p_wc = Pose(step_r.numpy(), step_t.numpy()) @ p_wc
                p_wc = p_wc.orthonormalized()
                delta.zero_()
            losses.append(float(loss.detach()))
        if not converged:
            break
    est = p_wc.inverse()
    result = LocalizationResult(est, converged=converged, losses=losses)
    if gt is not None:
        result.translation_error, result.rotation_error = pose_error(est, gt)
    return result


def localize(model: FieldModel, encoder, views, init_poses, cfg: RefineConfig = RefineConfig(),
             phases: tuple[str, ...] = ("coarse", "fine")) -> list[LocalizationResult]:
    """Refine every query view from its initial pose and score against its ground truth."""
    results = []
    for view, init in zip(views, init_poses):
        with torch.no_grad():
            query = encoder(view.image)
        results.append(refine_pose(model, query, view.camera, init, cfg, gt=view.camera.pose, phases=phases))
    return results


def summarize(results: list[LocalizationResult], thresholds=((0.01, 1.0),)) -> dict:
    te = np.array([r.translation_error for r in results])
    re = np.array([r.rotation_error for r in results])
    out = {"n": len(results), "median_translation": float(np.median(te)), "median_rotation": float(np.median(re))}
    for t, r in thresholds:
        out[f"recall@{t:g}/{r:g}deg"] = float(np.mean([x.within(t, r) for x in results]))
    return out
