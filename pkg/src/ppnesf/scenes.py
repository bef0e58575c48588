"""Synthetic voxel scenes, camera trajectories and the quadrature oracle renderer.

A scene is a closed room inside the unit cube: floor, ceiling and walls plus a
handful of textured boxes and spheres. Every voxel carries a density, a class
id (-1 for empty space) and an albedo. Texture lives only in the albedo, so it
is the part of the scene a segmentation never sees.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, Pose, generate_rays, look_at

BACKGROUND = -1
LIGHT_DIR = np.array([0.35, 0.5, 0.8]) / np.linalg.norm([0.35, 0.5, 0.8])
AMBIENT = 0.35
SCENE_MAGIC = b"SCNE"
SCENE_VERSION = 1
DEPTH_PNG_SCALE = 20000.0


@dataclass(frozen=True)
class SceneSpec:
    n_primitives: int = 8
    n_classes: int = 8
    resolution: int = 64
    density: float = 150.0
    wall_voxels: int = 2


@dataclass
class Scene:
    density: np.ndarray  # (V, V, V) float32, indexed [x, y, z]
    labels: np.ndarray  # (V, V, V) int16, BACKGROUND where empty
    albedo: np.ndarray  # (V, V, V) float32 in [0, 1]
    n_classes: int
    scene_id: str
    shade: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.shade = _lambert_shade(self.density, self.albedo)

    @property
    def resolution(self) -> int:
        return self.density.shape[0]

    def voxel_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.resolution
        idx = np.clip(np.floor(np.asarray(points) * v).astype(np.int64), 0, v - 1)
        return idx[..., 0], idx[..., 1], idx[..., 2]

    def density_at(self, points: np.ndarray) -> np.ndarray:
        return self.density[self.voxel_index(points)]

    def shade_at(self, points: np.ndarray) -> np.ndarray:
        return self.shade[self.voxel_index(points)]

    def labels_at(self, points: np.ndarray) -> np.ndarray:
        return self.labels[self.voxel_index(points)]

    def free_space(self, point, radius: float = 0.03) -> bool:
        offsets = np.array(np.meshgrid(*[[-radius, 0.0, radius]] * 3)).reshape(3, -1).T
        return bool(np.all(self.density_at(np.asarray(point) + offsets) == 0))


def _lambert_shade(density: np.ndarray, albedo: np.ndarray) -> np.ndarray:
    occ = (density > 0).astype(np.float32)
    pad = np.pad(occ, 1, mode="edge")
    smooth = sum(
        pad[1 + dx : pad.shape[0] - 1 + dx, 1 + dy : pad.shape[1] - 1 + dy, 1 + dz : pad.shape[2] - 1 + dz]
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
    ) / 27.0
    grad = np.stack(np.gradient(smooth), axis=-1)
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    normal = -grad / np.maximum(norm, 1e-6)
    lambert = np.clip(normal @ LIGHT_DIR, 0.0, 1.0)
    return (albedo * (AMBIENT + (1.0 - AMBIENT) * lambert)).astype(np.float32)


# --------------------------------------------------------------------------- generation


def _pattern(rng: np.random.Generator, coords: np.ndarray) -> np.ndarray:
    """A zero-mean texture in [-1, 1] over voxel coordinates (N, 3)."""
    kind = rng.integers(3)
    period = float(rng.choice([3.0, 4.0, 6.0]))
    if kind == 0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        return np.sign(np.sin(2 * np.pi * (coords @ axis) / period + rng.uniform(0, 2 * np.pi)))
    if kind == 1:
        cells = np.floor(coords / period).astype(np.int64).sum(axis=1)
        return np.where(cells % 2 == 0, 1.0, -1.0)
    lattice = rng.uniform(-1, 1, size=(8, 8, 8))
    idx = np.floor(coords / period).astype(np.int64) % 8
    return lattice[idx[:, 0], idx[:, 1], idx[:, 2]]


def generate_scene(seed: int, spec: SceneSpec | None = None, scene_id: str | None = None) -> Scene:
    """Procedural room with textured primitives; deterministic per seed."""
    spec = spec or SceneSpec()
    v, wall = spec.resolution, spec.wall_voxels
    if spec.n_classes < 2:
        raise ValueError("a scene needs at least 2 classes")
    if v < 16:
        raise ValueError("resolution must be at least 16")
    max_prims = ((v - 2 * wall) // 8) ** 2
    if not 0 <= spec.n_primitives <= max_prims:
        raise ValueError(f"{spec.n_primitives} primitives do not fit a {v}^3 grid (max {max_prims})")
    rng = np.random.default_rng(seed)
    density = np.zeros((v, v, v), dtype=np.float32)
    labels = np.full((v, v, v), BACKGROUND, dtype=np.int16)
    albedo = np.zeros((v, v, v), dtype=np.float32)
    grid = np.stack(np.meshgrid(*[np.arange(v)] * 3, indexing="ij"), axis=-1).reshape(-1, 3) + 0.5

    def paint(mask: np.ndarray, cls: int):
        flat = mask.reshape(-1)
        coords = grid[flat]
        base = rng.uniform(0.3, 0.7)
        amp = rng.uniform(0.2, 0.3)
        vals = np.clip(base + amp * _pattern(rng, coords), 0.05, 0.95)
        density.reshape(-1)[flat] = spec.density
        labels.reshape(-1)[flat] = cls % spec.n_classes
        albedo.reshape(-1)[flat] = vals

    x, y, z = (grid[:, i].reshape(v, v, v) for i in range(3))
    shell = [
        (z < wall, 0),  # floor
        (z > v - wall, 1),  # ceiling
        ((x < wall) | (x > v - wall), 2),
        ((y < wall) | (y > v - wall), 3),
    ]
    for mask, cls in shell:
        paint(mask & (labels == BACKGROUND), cls)

    first_obj_class = min(4, spec.n_classes - 1)
    n_obj_classes = max(spec.n_classes - first_obj_class, 1)
    c = v / 2.0
    for p in range(spec.n_primitives):
        cls = first_obj_class + p % n_obj_classes
        central = p % 2 == 0
        for _ in range(100):
            ang = rng.uniform(0, 2 * np.pi)
            r = rng.uniform(0.0, 0.16) * v if central else rng.uniform(0.38, 0.42) * v
            cx, cy = c + r * np.cos(ang), c + r * np.sin(ang)
            if wall + 4 < cx < v - wall - 4 and wall + 4 < cy < v - wall - 4:
                break
        if rng.uniform() < 0.5:
            hx, hy = rng.uniform(0.04, 0.08, size=2) * v
            h = rng.uniform(0.12, 0.35) * v
            mask = (np.abs(x - cx) < hx) & (np.abs(y - cy) < hy) & (z < wall + h)
        else:
            rad = rng.uniform(0.05, 0.08) * v
            cz = wall + rad + rng.uniform(0.0, 0.15) * v
            mask = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 < rad**2
        paint(mask & (labels == BACKGROUND), cls)

    scene = Scene(density, labels, albedo, spec.n_classes, scene_id or f"scene-{seed}")
    if len(np.unique(labels[labels != BACKGROUND])) < 2:
        raise ValueError("generated scene has fewer than 2 classes")
    return scene


# --------------------------------------------------------------------------- oracle


def oracle_render_rays(scene: Scene, origins, directions, near, far, n_samples: int = 1000,
                       chunk: int = 256):
    """Dense uniform quadrature with nearest-voxel lookups.

    Returns (gray, depth, labels, opacity) per ray. Depth is the expected
    termination distance along the ray, normalised by opacity; rays with
    opacity below 0.5 get ``inf`` depth and the background label.
    """
    n = len(origins)
    gray = np.zeros(n)
    depth = np.full(n, np.inf)
    label = np.full(n, BACKGROUND, dtype=np.int64)
    opacity = np.zeros(n)
    u = (np.arange(n_samples) + 0.5) / n_samples
    for s in range(0, n, chunk):
        sl = slice(s, min(s + chunk, n))
        lo, hi = near[sl, None], far[sl, None]
        t = lo + (hi - lo) * u[None, :]
        delta = np.broadcast_to((hi - lo) / n_samples, t.shape)
        pts = origins[sl, None, :] + t[..., None] * directions[sl, None, :]
        vox = np.ravel_multi_index(scene.voxel_index(pts), scene.density.shape)
        sigma = scene.density.reshape(-1)[vox].astype(np.float64)
        alpha = 1.0 - np.exp(-sigma * delta)
        trans = np.cumprod(np.concatenate([np.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1]], axis=1), axis=1)
        w = trans * alpha
        acc = w.sum(axis=1)
        gray[sl] = (w * scene.shade.reshape(-1)[vox]).sum(axis=1)
        opacity[sl] = acc
        hit = acc > 0.5
        depth[sl] = np.where(hit, (w * t).sum(axis=1) / np.maximum(acc, 1e-12), np.inf)
        lab = scene.labels.reshape(-1)[vox].astype(np.int64)
        m = lab.shape[0]
        keys = (np.arange(m)[:, None] * scene.n_classes + np.clip(lab, 0, None)).ravel()
        votes = np.bincount(keys, weights=(w * (lab >= 0)).ravel(), minlength=m * scene.n_classes)
        label[sl] = np.where(hit, votes.reshape(m, scene.n_classes).argmax(axis=1), BACKGROUND)
    return gray, depth, label, opacity


def oracle_render(scene: Scene, camera: Camera, n_samples: int = 1000):
    """Ground-truth grayscale image, depth and label map for a camera."""
    rays = generate_rays(camera, camera.pixel_centers())
    gray, depth, label, _ = oracle_render_rays(
        scene, rays.origins, rays.directions, rays.near, rays.far, n_samples
    )
    shape = (camera.height, camera.width)
    return gray.reshape(shape), depth.reshape(shape), label.reshape(shape)


# --------------------------------------------------------------------------- views


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # (H, W) grayscale in [0, 1]
    depth: np.ndarray  # (H, W) ray distance, inf on misses
    labels: np.ndarray  # (H, W) class ids
    split: str = "train"


@dataclass
class ViewSet:
    scene_id: str
    views: list[View]

    @property
    def train(self) -> list[View]:
        return [v for v in self.views if v.split == "train"]

    @property
    def test(self) -> list[View]:
        return [v for v in self.views if v.split == "test"]


@dataclass(frozen=True)
class TrajectorySpec:
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0
    radius: float = 0.30
    height_z: float = 0.42
    target_z: float = 0.28
    test_every: int = 5


def orbit_poses(scene: Scene, n_views: int, seed: int, spec: TrajectorySpec) -> list[Pose]:
    rng = np.random.default_rng(seed + 7919)
    poses = []
    for i in range(n_views):
        for _ in range(50):
            ang = 2 * np.pi * i / n_views + rng.normal(0, 0.02)
            r = spec.radius + rng.uniform(-0.02, 0.02)
            eye = np.array([0.5 + r * np.cos(ang), 0.5 + r * np.sin(ang), spec.height_z + rng.uniform(-0.04, 0.04)])
            if scene.free_space(eye):
                break
        target = np.array([0.5, 0.5, spec.target_z]) + rng.uniform(-0.03, 0.03, size=3)
        poses.append(look_at(eye, target))
    return poses


def generate_trajectory(scene: Scene, n_views: int = 100, seed: int = 0,
                        spec: TrajectorySpec | None = None, n_samples: int = 1000) -> ViewSet:
    """Orbit-with-jitter cameras; every ``test_every``-th view is held out."""
    spec = spec or TrajectorySpec()
    views = []
    for i, pose in enumerate(orbit_poses(scene, n_views, seed, spec)):
        cam = Camera.from_fov(spec.width, spec.height, spec.fov_deg, pose)
        img, depth, lab = oracle_render(scene, cam, n_samples)
        split = "test" if i % spec.test_every == spec.test_every // 2 else "train"
        views.append(View(cam, img.astype(np.float32), depth.astype(np.float32), lab.astype(np.int16), split))
    return ViewSet(scene.scene_id, views)


# --------------------------------------------------------------------------- file formats


def save_scene(scene: Scene, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sid = scene.scene_id.encode("utf-8")
    header = SCENE_MAGIC + struct.pack("<IIII", SCENE_VERSION, scene.resolution, scene.n_classes, len(sid)) + sid
    rec = np.zeros(scene.density.size, dtype=[("density", "<f4"), ("label", "<i4"), ("albedo", "<f4")])
    rec["density"] = scene.density.reshape(-1)
    rec["label"] = scene.labels.reshape(-1)
    rec["albedo"] = scene.albedo.reshape(-1)
    path.write_bytes(header + rec.tobytes())
    return path


def load_scene(path) -> Scene:
    blob = Path(path).read_bytes()
    if blob[:4] != SCENE_MAGIC:
        raise ValueError(f"{path}: not a scene file")
    version, v, c, n = struct.unpack_from("<IIII", blob, 4)
    if version != SCENE_VERSION:
        raise ValueError(f"{path}: unsupported scene version {version}")
    sid = blob[20 : 20 + n].decode("utf-8")
    rec = np.frombuffer(blob, dtype=[("density", "<f4"), ("label", "<i4"), ("albedo", "<f4")], offset=20 + n)
    shape = (v, v, v)
    return Scene(
        rec["density"].reshape(shape).copy(),
        rec["label"].reshape(shape).astype(np.int16),
        rec["albedo"].reshape(shape).copy(),
        c,
        sid,
    )


def save_viewset(viewset: ViewSet, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"scene_id": viewset.scene_id, "views": []}
    for i, v in enumerate(viewset.views):
        stem = f"view_{i:04d}"
        Image.fromarray(np.round(np.clip(v.image, 0, 1) * 65535).astype(np.uint16)).save(directory / f"{stem}_image.png")
        d = np.where(np.isfinite(v.depth), v.depth * DEPTH_PNG_SCALE, 0)
        Image.fromarray(np.round(np.clip(d, 0, 65535)).astype(np.uint16)).save(directory / f"{stem}_depth.png")
        Image.fromarray(np.where(v.labels < 0, 255, v.labels).astype(np.uint8)).save(directory / f"{stem}_labels.png")
        cam = v.camera
        index["views"].append({
            "stem": stem,
            "split": v.split,
            "intrinsics": [cam.fx, cam.fy, cam.cx, cam.cy],
            "resolution": [cam.width, cam.height],
            "pose": cam.pose.to_flat12().tolist(),
        })
    (directory / "index.json").write_text(json.dumps(index, indent=1))
    return directory


def load_viewset(directory) -> ViewSet:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    views = []
    for entry in index["views"]:
        fx, fy, cx, cy = entry["intrinsics"]
        w, h = entry["resolution"]
        cam = Camera(fx, fy, cx, cy, w, h, Pose.from_flat12(entry["pose"]))
        stem = directory / entry["stem"]
        img = np.asarray(Image.open(f"{stem}_image.png"), dtype=np.float32) / 65535.0
        d = np.asarray(Image.open(f"{stem}_depth.png"), dtype=np.float32)
        depth = np.where(d > 0, d / DEPTH_PNG_SCALE, np.inf).astype(np.float32)
        lab = np.asarray(Image.open(f"{stem}_labels.png")).astype(np.int16)
        lab = np.where(lab == 255, BACKGROUND, lab).astype(np.int16)
        views.append(View(cam, img, depth, lab, entry["split"]))
    return ViewSet(index["scene_id"], views)
