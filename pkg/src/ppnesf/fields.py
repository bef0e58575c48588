"""The neural segmentation field and alpha-composition rendering.

Branches
--------
* geometric field: hash grid + MLP -> density (softplus) and a geometric
  feature ``g``; ``g`` is the internal representation the privacy attack reads.
* segmentation field: coarse and fine heads on ``cat[g, enc(x)]``, with the
  position encoding reused read-only: the heads never train the grid table,
  but stay differentiable in position for pose refinement.
* feature field: separate grid + MLP producing the training-only embedding,
  rendered with detached weights so it never shapes the geometry.
* rgb head: optional one-channel head on ``g`` for the privacy baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffcore import HashGridEncoding, Mlp
from .geometry import Camera, generate_rays

PAYLOAD_KINDS = ("seg_coarse", "seg_fine", "feature", "geo_feature", "rgb", "depth")


@dataclass(frozen=True)
class FieldConfig:
    n_coarse: int = 20
    n_fine: int = 100
    geo_dim: int = 32
    feature_dim: int = 16
    hidden: int = 64
    grid_levels: int = 6
    grid_features: int = 4
    log2_table: int = 14
    grid_min_res: int = 16
    grid_max_res: int = 256
    density_scale: float = 10.0
    density_bias: float = -1.0


class FieldModel(nn.Module):
    def __init__(self, cfg: FieldConfig = FieldConfig(), with_feature_field: bool = True,
                 with_rgb: bool = False, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        grid_kw = dict(n_levels=cfg.grid_levels, features=cfg.grid_features, log2_table_size=cfg.log2_table,
                       min_res=cfg.grid_min_res, max_res=cfg.grid_max_res)
        self.psi_grid = HashGridEncoding(**grid_kw, generator=gen)
        enc = self.psi_grid.output_dim
        self.psi_mlp = Mlp([enc, cfg.hidden, 1 + cfg.geo_dim], generator=gen)
        self.omega_coarse = Mlp([cfg.geo_dim + enc, cfg.hidden, cfg.n_coarse], generator=gen)
        self.omega_fine = Mlp([cfg.geo_dim + enc, cfg.hidden, cfg.n_fine], generator=gen)
        # Optional branches draw from their own streams so Psi/Omega init does not depend on them.
        gen_aux = torch.Generator().manual_seed(seed + 1_000_003)
        self.gamma_grid = self.gamma_mlp = self.rgb_head = None
        if with_feature_field:
            self.gamma_grid = HashGridEncoding(**grid_kw, generator=gen_aux)
            self.gamma_mlp = Mlp([self.gamma_grid.output_dim, cfg.hidden, cfg.feature_dim], generator=gen_aux)
        if with_rgb:
            self.rgb_head = Mlp([cfg.geo_dim, cfg.hidden, 1], generator=gen_aux)

    @property
    def has_feature_field(self) -> bool:
        return self.gamma_grid is not None

    @property
    def has_rgb(self) -> bool:
        return self.rgb_head is not None

    def strip_feature_field(self) -> "FieldModel":
        self.gamma_grid = self.gamma_mlp = None
        return self

    def strip_rgb(self) -> "FieldModel":
        self.rgb_head = None
        return self

    def core_parameters(self) -> list[nn.Parameter]:
        """Parameters of the geometric and segmentation fields."""
        mods = (self.psi_grid, self.psi_mlp, self.omega_coarse, self.omega_fine)
        return [p for m in mods for p in m.parameters()]

    def geometry(self, x: torch.Tensor):
        """Density, geometric feature and read-only position encoding at points (..., 3).

        The returned encoding is computed from a detached grid table.
        """
        enc, enc_ro = self.psi_grid(x, frozen_copy=True)
        raw = self.psi_mlp(enc)
        sigma = F.softplus(raw[..., 0] + self.cfg.density_bias) * self.cfg.density_scale
        return sigma, raw[..., 1:], enc_ro

    def density(self, x: torch.Tensor) -> torch.Tensor:
        raw = self.psi_mlp(self.psi_grid(x))
        return F.softplus(raw[..., 0] + self.cfg.density_bias) * self.cfg.density_scale

    def segmentation(self, g: torch.Tensor, enc: torch.Tensor):
        h = torch.cat([g, enc], dim=-1)
        return self.omega_coarse(h), self.omega_fine(h)

    def feature(self, x: torch.Tensor) -> torch.Tensor:
        if not self.has_feature_field:
            raise ValueError("this model has no feature field")
        return self.gamma_mlp(self.gamma_grid(x))

    def rgb(self, g: torch.Tensor) -> torch.Tensor:
        if not self.has_rgb:
            raise ValueError("this model has no rgb head")
        return torch.sigmoid(self.rgb_head(g))


# --------------------------------------------------------------------------- sampling


@dataclass
class RaySampleBatch:
    """Samples along R rays: positions ``t`` (R, S) and widths ``deltas``."""

    t: torch.Tensor
    deltas: torch.Tensor
    sigma: torch.Tensor | None = None
    payload: dict[str, torch.Tensor] = field(default_factory=dict)


def stratified_t(near: torch.Tensor, far: torch.Tensor, n: int, generator: torch.Generator | None,
                 perturb: bool = True) -> torch.Tensor:
    u = torch.arange(n, dtype=near.dtype).expand(near.shape[0], n)
    if perturb:
        u = u + torch.rand(near.shape[0], n, generator=generator, dtype=near.dtype)
    else:
        u = u + 0.5
    return near[:, None] + (far - near)[:, None] * (u / n)


def sample_pdf(edges: torch.Tensor, weights: torch.Tensor, n: int,
               generator: torch.Generator | None) -> torch.Tensor:
    """Inverse-CDF draws from piecewise-constant densities over bins ``edges`` (R, B+1)."""
    w = weights + 1e-5
    pdf = w / w.sum(dim=-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, dim=-1)], dim=-1)
    cdf[:, -1] = 1.0
    u = torch.rand(edges.shape[0], n, generator=generator, dtype=edges.dtype)
    idx = torch.searchsorted(cdf.contiguous(), u.contiguous(), right=True).clamp(1, cdf.shape[1] - 1)
    c0, c1 = cdf.gather(1, idx - 1), cdf.gather(1, idx)
    e0, e1 = edges.gather(1, idx - 1), edges.gather(1, idx)
    frac = (u - c0) / torch.clamp(c1 - c0, min=1e-12)
    return e0 + frac * (e1 - e0)


def deltas_from_t(t: torch.Tensor, far: torch.Tensor) -> torch.Tensor:
    d = torch.diff(t, dim=-1)
    last = torch.clamp(far[:, None] - t[:, -1:], min=1e-6)
    return torch.cat([d, last], dim=-1).clamp_min(1e-9)


def sample_ray(origins: torch.Tensor, directions: torch.Tensor, near: torch.Tensor, far: torch.Tensor,
               n_coarse: int, n_importance: int, density_fn=None, generator: torch.Generator | None = None,
               perturb: bool = True) -> RaySampleBatch:
    """Stratified samples plus one round of importance sampling, merged and sorted.

    ``density_fn`` is only called when ``n_importance > 0``; it runs without
    gradients since sample placement is not differentiated.
    """
    with torch.no_grad():
        t = stratified_t(near, far, n_coarse, generator, perturb)
        if n_importance > 0:
            if density_fn is None:
                raise ValueError("importance sampling needs a density function")
            pts = origins[:, None, :] + t[..., None] * directions[:, None, :]
            sigma = density_fn(pts)
            w = render_weights(sigma, deltas_from_t(t, far))
            edges = torch.cat([near[:, None], 0.5 * (t[:, 1:] + t[:, :-1]), far[:, None]], dim=-1)
            t_imp = sample_pdf(edges, w, n_importance, generator)
            t, _ = torch.sort(torch.cat([t, t_imp], dim=-1), dim=-1)
        return RaySampleBatch(t, deltas_from_t(t, far))


# --------------------------------------------------------------------------- compositing


def render_weights(sigma: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Alpha-composition weights ``T_i * alpha_i``."""
    tau = sigma * deltas
    alpha = 1.0 - torch.exp(-tau)
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(tau[..., :1]), tau[..., :-1]], dim=-1), dim=-1))
    return trans * alpha


def render(batch: RaySampleBatch, payload: torch.Tensor | None = None, sigma: torch.Tensor | None = None):
    """Composite per-sample payloads (R, S, C) along rays.

    Returns ``(rendered (R, C) or None, opacity (R,), depth (R,), weights (R, S))``;
    depth is ``sum_i w_i t_i`` (not normalised by opacity).
    """
    sigma = batch.sigma if sigma is None else sigma
    w = render_weights(sigma, batch.deltas)
    rendered = None if payload is None else (w.unsqueeze(-1) * payload).sum(dim=-2)
    return rendered, w.sum(dim=-1), (w * batch.t).sum(dim=-1), w


# --------------------------------------------------------------------------- full passes


def rays_to_tensors(rays, dtype=torch.float32):
    return tuple(torch.as_tensor(a, dtype=dtype) for a in (rays.origins, rays.directions, rays.near, rays.far))


def render_rays(model: FieldModel, origins: torch.Tensor, directions: torch.Tensor, near: torch.Tensor,
                far: torch.Tensor, kinds=("seg_coarse", "seg_fine", "depth"), n_coarse: int = 32,
                n_importance: int = 16, generator: torch.Generator | None = None, perturb: bool = True):
    """Differentiable rendering of the requested payloads for a batch of rays.

    The returned dict always holds ``weights``, ``t``, ``deltas``, ``opacity``
    and ``depth``; feature rendering uses detached weights.
    """
    kinds = tuple(kinds)
    for k in kinds:
        if k not in PAYLOAD_KINDS:
            raise ValueError(f"unknown payload kind {k!r}")
    if "rgb" in kinds and not model.has_rgb:
        raise ValueError("rgb requested but the model has no rgb branch")
    if "feature" in kinds and not model.has_feature_field:
        raise ValueError("feature requested but the model has no feature field")
    batch = sample_ray(origins.detach(), directions.detach(), near, far, n_coarse, n_importance,
                       model.density, generator, perturb)
    pts = origins[:, None, :] + batch.t[..., None] * directions[:, None, :]
    sigma, g, enc = model.geometry(pts)
    batch.sigma = sigma
    w = render_weights(sigma, batch.deltas)
    out = {"weights": w, "t": batch.t, "deltas": batch.deltas, "opacity": w.sum(-1),
           "depth": (w * batch.t).sum(-1)}

    def comp(x, weights=w):
        return (weights.unsqueeze(-1) * x).sum(dim=-2)

    if "seg_coarse" in kinds or "seg_fine" in kinds:
        lc, lf = model.segmentation(g, enc)
        if "seg_coarse" in kinds:
            out["seg_coarse"] = comp(lc)
        if "seg_fine" in kinds:
            out["seg_fine"] = comp(lf)
    if "feature" in kinds:
        out["feature"] = comp(model.feature(pts), w.detach())
    if "geo_feature" in kinds:
        out["geo_feature"] = comp(g)
    if "rgb" in kinds:
        out["rgb"] = comp(model.rgb(g))
    return out


@torch.no_grad()
def render_view(model: FieldModel, camera: Camera, pixels=None, payload_kind: str = "seg_coarse",
                n_coarse: int = 32, n_importance: int = 16, chunk: int = 4096, seed: int = 0,
                perturb: bool = False) -> np.ndarray:
    """Render one payload for a camera.

    With ``pixels=None`` the full image is rendered and the result has shape
    (C, H, W) (depth: (H, W)); otherwise (N, C) / (N,).
    """
    full = pixels is None
    px = camera.pixel_centers() if full else np.asarray(pixels, dtype=np.float64)
    rays = generate_rays(camera, px)
    dtype = next(model.parameters()).dtype
    o, d, n, f = rays_to_tensors(rays, dtype)
    gen = torch.Generator().manual_seed(seed)
    parts = []
    for s in range(0, len(px), chunk):
        sl = slice(s, s + chunk)
        out = render_rays(model, o[sl], d[sl], n[sl], f[sl], (payload_kind,), n_coarse, n_importance, gen, perturb)
        parts.append(out[payload_kind])
    res = torch.cat(parts).cpu().numpy()
    if not full:
        return res
    if res.ndim == 1:
        return res.reshape(camera.height, camera.width)
    return res.T.reshape(res.shape[1], camera.height, camera.width)
