"""End-to-end experiment drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import merge, scene_specs, train_config
from .fields import render_view
from .localization import (
    LocalizationResult,
    RefineConfig,
    build_database,
    localize,
    perturb_pose,
    retrieve_initial_pose,
)
from .privacy import (
    AttackScene,
    PrivacyConfig,
    PrivacyReport,
    attack,
    build_cache,
    mean_image_baseline,
    psnr,
    train_inversion,
)
from .scenes import ViewSet, generate_scene, generate_trajectory
from .training import TrainState, train_scene

logger = logging.getLogger(__name__)


def make_views(cfg: dict, scene_seed: int | None = None, n_views: int | None = None) -> ViewSet:
    spec, traj = scene_specs(cfg)
    seed = cfg["seed"] if scene_seed is None else scene_seed
    scene = generate_scene(seed, spec)
    return generate_trajectory(scene, n_views or cfg["scene"]["n_views"], seed=seed, spec=traj)


# --------------------------------------------------------------------------- localization


def initial_poses(cfg: dict, state: TrainState, views: ViewSet, queries) -> list:
    lc = cfg["localize"]
    mode = lc["init"]
    if mode == "ground_truth":
        return [q.camera.pose for q in queries]
    if mode == "retrieval":
        db = build_database(state.encoder, views.train)
        with torch.no_grad():
            return [retrieve_initial_pose(state.encoder(q.image), db) for q in queries]
    rng = np.random.default_rng([cfg["seed"], 7])
    poses = []
    for q in queries:
        rot = rng.uniform(0.0, lc["max_rotation_deg"])
        trans = rng.uniform(0.0, lc["max_translation"])
        poses.append(perturb_pose(q.camera.pose, rot, trans, rng))
    return poses


def run_localization(cfg: dict, state: TrainState, views: ViewSet, phases=("coarse", "fine")):
    lc = cfg["localize"]
    queries = views.test[: lc["n_queries"]]
    refine = RefineConfig.from_dict({"seed": cfg["seed"], **lc["refine"]})
    inits = initial_poses(cfg, state, views, queries)
    return localize(state.model, state.encoder, queries, inits, refine, phases=phases)


# --------------------------------------------------------------------------- privacy


@dataclass
class PrivacyRun:
    seed: int
    reports: dict[str, PrivacyReport]
    mean_baseline: float
    fit_psnr: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    def psnr(self, variant: str) -> float:
        return self.reports[variant].mean_psnr


def rgb_fit_psnr(state: TrainState, views, cfg_train) -> float:
    """PSNR of the rgb head's renderings against the training images."""
    vals = []
    for v in views:
        img = render_view(state.model, v.camera, None, "rgb", cfg_train.n_samples, cfg_train.n_importance)[0]
        vals.append(psnr(img, v.image))
    return float(np.mean(vals))


def train_attack_scene(cfg: dict, views: ViewSet, variant: str, seed: int) -> tuple[AttackScene, float]:
    pc = cfg["privacy"]
    tcfg = train_config(cfg, {**cfg["train"], **pc["train"]}, variant=variant, seed=seed)
    state = train_scene(tcfg, views)
    fit = rgb_fit_psnr(state, views.train[:4], tcfg) if state.model.has_rgb else float("nan")
    model = state.model.strip_feature_field().strip_rgb()
    return AttackScene(views.scene_id, model, views.train), fit


def run_privacy_seed(cfg: dict, seed: int, keep_images: bool = False) -> PrivacyRun:
    """Three scenes per seed: two attacker scenes, one victim, one field per scene and variant.

    All fields of a seed share the same initialisation seed, as an attacker
    who knows the victim's architecture and training recipe would.
    """
    t0 = time.time()
    pc = cfg["privacy"]
    base = pc["scene_offset"] + 3 * seed
    scene_cfg = merge(cfg, {"scene": {"trajectory": pc.get("trajectory", {})}})
    scenes = [make_views(scene_cfg, base + i, pc["n_views"]) for i in range(3)]
    dcfg = PrivacyConfig.from_dict({"seed": seed, **pc["decoder"]})
    reports, fits = {}, {}
    baseline = float("nan")
    for variant in pc["variants"]:
        trained = [train_attack_scene(cfg, vs, variant, seed) for vs in scenes]
        attackers = [t[0] for t in trained[:2]]
        victim = trained[2][0]
        victim.views = victim.views[: pc["attack_views"]]
        fits[variant] = trained[2][1]
        for a in attackers:
            build_cache(a, dcfg)
        decoder = train_inversion(attackers, dcfg, victims=[victim])
        reports[variant] = attack(decoder, victim, dcfg, variant, keep_images)
        baseline = mean_image_baseline(attackers, [v.image for v in victim.views])
        logger.info("seed %d %s: psnr %.2f (mean-image baseline %.2f)", seed, variant,
                    reports[variant].mean_psnr, baseline)
    return PrivacyRun(seed, reports, baseline, fits, time.time() - t0)
