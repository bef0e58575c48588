"""Self-checks shipped with the package: gradients, transport marginals, rendering, SE(3)."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import gradient_probe_errors
from .fields import FieldConfig, FieldModel, RaySampleBatch, render
from .geometry import Camera, Pose, generate_rays, look_at, pose_error, se3_exp, se3_exp_torch, se3_log
from .labeling import PrototypeBank, derive_coarse_targets, derive_fine_targets, sinkhorn
from .localization import refinement_loss
from .losses import loss_ce_joint, loss_depth, loss_dist, loss_hierar, loss_nce
from .scenes import SceneSpec, generate_scene, oracle_render_rays


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _unit(x):
    return x / x.norm(dim=-1, keepdim=True)


def check_sinkhorn(n_problems: int = 10, n: int = 4096, k: int = 20, seed: int = 0) -> CheckResult:
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_problems):
        s = torch.rand(k, n, generator=gen, dtype=torch.float64) + 1e-3
        plan = sinkhorn(s, max_iters=100)
        worst = max(worst, float((plan.row_sums - 1 / n).abs().max()), float((plan.col_sums - 1 / k).abs().max()))
    uni = sinkhorn(torch.ones(k, n, dtype=torch.float64))
    dev = float((uni.q - 1.0 / (n * k)).abs().max())
    return CheckResult("sinkhorn marginals", worst < 1e-6 and dev < 1e-10,
                       f"max residual {worst:.2e}, uniform deviation {dev:.2e}")


def loss_closures(seed: int = 0, n: int = 12, dim: int = 6, k: int = 3, n_sub: int = 2):
    """Scalar closures over float64 leaves for every training loss."""
    gen = torch.Generator().manual_seed(seed)
    f2d = _unit(torch.randn(n, dim, generator=gen, dtype=torch.float64)).requires_grad_()
    f3d = _unit(torch.randn(n, dim, generator=gen, dtype=torch.float64)).requires_grad_()
    bank = PrototypeBank.random(k, n_sub, dim, seed=seed)
    plan, coarse = derive_coarse_targets(f2d, f3d, bank)
    _, fine = derive_fine_targets(f2d, f3d, bank, coarse)
    l2 = torch.randn(n, k, generator=gen, dtype=torch.float64).requires_grad_()
    l3 = torch.randn(n, k, generator=gen, dtype=torch.float64).requires_grad_()
    unc = (torch.rand(n, k, generator=gen, dtype=torch.float64) + 0.1).requires_grad_()
    depth = torch.rand(n, generator=gen, dtype=torch.float64).requires_grad_()
    gt = torch.rand(n, generator=gen, dtype=torch.float64)
    s = 8
    t = torch.sort(torch.rand(n, s, generator=gen, dtype=torch.float64), dim=1).values
    near, far = torch.zeros(n, dtype=torch.float64), torch.ones(n, dtype=torch.float64)
    deltas = torch.cat([torch.diff(t, dim=1), far[:, None] - t[:, -1:]], dim=1)
    w = (torch.rand(n, s, generator=gen, dtype=torch.float64) / s).requires_grad_()
    q = plan.q

    def ce():
        return loss_ce_joint(q, l2, l3, unc, 8, torch.Generator().manual_seed(1))

    return {
        "nce": (lambda: loss_nce(f2d, f3d, 0.1), [f2d, f3d]),
        "ce_joint": (ce, [l2, l3, unc]),
        "hierar": (lambda: loss_hierar(f2d, f3d, bank, coarse, fine, 0.1), [f2d, f3d]),
        "depth": (lambda: loss_depth(depth, gt), [depth]),
        "dist": (lambda: loss_dist(w, t, deltas, near, far), [w]),
    }


def check_loss_gradients(n_probes: int = 50, tol: float = 1e-6) -> CheckResult:
    worst = {}
    for name, (fn, params) in loss_closures().items():
        worst[name] = float(gradient_probe_errors(fn, params, n_probes=n_probes).max())
    ok = all(v < tol for v in worst.values())
    return CheckResult("loss gradients", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def check_pose_gradient(n_probes: int = 50, tol: float = 1e-4, n_rays: int = 32, seed: int = 0) -> CheckResult:
    """Refinement loss (render + softmax cross-entropy) vs finite differences on the SE(3) chart."""
    cfg = FieldConfig(n_coarse=4, n_fine=8, geo_dim=6, feature_dim=4, hidden=16, grid_levels=3, grid_features=2,
                      log2_table=10, grid_min_res=4, grid_max_res=16)
    model = FieldModel(cfg, with_feature_field=False, seed=seed + 2).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.psi_grid.table.normal_(0.0, 1.0, generator=gen)
    # Off-lattice camera: samples on grid-cell faces would sit on kinks of the encoding.
    cam = Camera.from_fov(16, 16, 60.0, look_at([0.513, 0.217, 0.447], [0.481, 0.793, 0.352]))
    p_wc = cam.pose.inverse()
    px = np.random.default_rng(seed).uniform(0, 16, size=(n_rays, 2))
    d = cam.camera_directions(px)
    dirs = torch.from_numpy(d / np.linalg.norm(d, axis=1, keepdims=True))
    rays = generate_rays(cam, px)
    target = torch.softmax(torch.randn(n_rays, 4, generator=gen, dtype=torch.float64), dim=1)
    weights = torch.rand(n_rays, generator=gen, dtype=torch.float64) + 0.5
    delta = torch.zeros(6, dtype=torch.float64, requires_grad=True)
    r0, t0 = torch.from_numpy(p_wc.rotation.copy()), torch.from_numpy(p_wc.translation.copy())

    def loss():
        dr, dt = se3_exp_torch(delta)
        return refinement_loss(model, dirs, dr @ r0, dr @ t0 + dt, target, weights, "coarse", 24, 0,
                               interval=(rays.near, rays.far))

    worst = float(gradient_probe_errors(loss, [delta], n_probes=n_probes, eps=1e-6).max())
    return CheckResult("pose-chart gradient", worst < tol, f"max relative error {worst:.1e} over {n_probes} probes")


def check_rendering(n_rays: int = 300, n_samples: int = 1000, seed: int = 0) -> CheckResult:
    scene = generate_scene(seed, SceneSpec(resolution=32, n_primitives=4))
    cam_pose = look_at(np.array([0.5, 0.3, 0.45]), np.array([0.5, 0.6, 0.3]))
    rng = np.random.default_rng(seed)
    cam = Camera.from_fov(32, 32, 60.0, cam_pose)
    px = rng.uniform(0, 32, size=(n_rays, 2))
    rays = generate_rays(cam, px)
    gray, depth, _, opacity = oracle_render_rays(scene, rays.origins, rays.directions, rays.near, rays.far, n_samples)
    u = (np.arange(n_samples) + 0.5) / n_samples
    t = rays.near[:, None] + (rays.far - rays.near)[:, None] * u
    pts = rays.origins[:, None] + t[..., None] * rays.directions[:, None]
    vox = scene.voxel_index(pts)
    batch = RaySampleBatch(torch.from_numpy(t), torch.from_numpy(np.broadcast_to(
        ((rays.far - rays.near) / n_samples)[:, None], t.shape).copy()))
    sigma = torch.from_numpy(scene.density[vox].astype(np.float64))
    payload = torch.from_numpy(scene.shade[vox].astype(np.float64))[..., None]
    rgb, acc, dsum, _ = render(batch, payload, sigma)
    hit = opacity > 0.5
    rel_g = np.abs(rgb[:, 0].numpy() - gray) / np.maximum(np.abs(gray), 1e-6)
    rel_d = np.abs(dsum.numpy()[hit] / acc.numpy()[hit] - depth[hit]) / depth[hit]
    worst = float(max(rel_g.max(), rel_d.max() if hit.any() else 0.0))
    return CheckResult("rendering vs oracle", worst < 1e-3, f"max relative error {worst:.2e}")


def quaternion_angle(r: np.ndarray) -> float:
    """Rotation angle (radians) via a unit quaternion, largest-component branch."""
    tr = np.trace(r)
    cands = [tr, r[0, 0], r[1, 1], r[2, 2]]
    i = int(np.argmax(cands))
    if i == 0:
        w = np.sqrt(1.0 + tr) / 2
        v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / (4 * w)
    else:
        a = i - 1
        b, c = (a + 1) % 3, (a + 2) % 3
        va = np.sqrt(1.0 + 2 * r[a, a] - tr) / 2
        w = (r[c, b] - r[b, c]) / (4 * va)
        v = np.zeros(3)
        v[a], v[b], v[c] = va, (r[a, b] + r[b, a]) / (4 * va), (r[a, c] + r[c, a]) / (4 * va)
    return float(2 * np.arctan2(np.linalg.norm(v), abs(w)))


def check_se3(n: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_rt = worst_err = 0.0
    for _ in range(n):
        xi = np.concatenate([rng.normal(size=3) * rng.uniform(0, 3) / np.sqrt(3), rng.normal(size=3)])
        p = se3_exp(xi)
        worst_rt = max(worst_rt, float(np.abs(se3_log(p) - xi).max()) if np.linalg.norm(xi[:3]) < np.pi - 1e-3 else 0.0)
        q = se3_exp(np.concatenate([rng.normal(size=3) * 0.5, rng.normal(size=3)]))
        te, re = pose_error(p, q)
        angle = quaternion_angle(q.rotation.T @ p.rotation)
        worst_err = max(worst_err, abs(np.radians(re) - angle),
                        abs(te - np.linalg.norm(p.translation - q.translation)))
    pose = Pose.identity()
    step = se3_exp(np.array([0.01, -0.02, 0.015, 0.001, 0.0, -0.002]))
    for _ in range(10_000):
        pose = pose @ step
    drift = float(np.abs(pose.rotation.T @ pose.rotation - np.eye(3)).max())
    ok = worst_rt < 1e-9 and worst_err < 1e-9 and drift < 1e-7
    return CheckResult("se3", ok, f"roundtrip {worst_rt:.1e}, pose_error {worst_err:.1e}, drift {drift:.1e}")


def check_hierarchy(seed: int = 0) -> CheckResult:
    gen = torch.Generator().manual_seed(seed)
    bank = PrototypeBank.random(20, 5, 16, seed=seed)
    f2d = _unit(torch.randn(1024, 16, generator=gen, dtype=torch.float64))
    f3d = _unit(torch.randn(1024, 16, generator=gen, dtype=torch.float64))
    _, coarse = derive_coarse_targets(f2d, f3d, bank)
    _, fine = derive_fine_targets(f2d, f3d, bank, coarse)
    frac = float((fine // bank.n_sub == coarse).double().mean())
    return CheckResult("hierarchy containment", frac == 1.0, f"{frac:.2%} of fine labels inside parent")


CHECKS = (check_sinkhorn, check_loss_gradients, check_pose_gradient, check_rendering, check_se3, check_hierarchy)


def run_all(checks=CHECKS) -> list[CheckResult]:
    results = []
    for check in checks:
        t0 = time.time()
        try:
            res = check()
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(check.__name__, False, f"{type(exc).__name__}: {exc}")
        res.seconds = time.time() - t0
        results.append(res)
    return results
