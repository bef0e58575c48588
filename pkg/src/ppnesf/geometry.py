"""SE(3) poses, pinhole cameras and ray generation.

Conventions
-----------
* Twists are 6-vectors ``(omega, v)`` with the rotation part first.
* ``Camera.pose`` is camera-to-world. Cameras look down their local ``-z``
  axis with ``+y`` up and ``+x`` right (OpenGL style); image rows grow
  downwards, so the image ``v`` axis maps to camera ``-y``.
* Continuous pixel coordinates put the centre of pixel ``(i, j)`` at
  ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

logger = logging.getLogger(__name__)

DIAGNOSTICS: Counter = Counter()

_SMALL_ANGLE = 1e-5
_NEAR_PI = 1e-6


def hat(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]], dtype=np.float64
    )


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]], dtype=np.float64)


def _so3_coeffs(theta: float) -> tuple[float, float, float]:
    """Return sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with Taylor fallbacks."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def orthonormalized(self) -> "Pose":
        """Project the rotation back onto SO(3) (nearest in Frobenius norm)."""
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] *= -1
            r = u @ vt
        return Pose(r, self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (
            bool(np.all(np.isfinite(r)) and np.all(np.isfinite(self.translation)))
            and np.abs(r.T @ r - np.eye(3)).max() < tol
            and abs(np.linalg.det(r) - 1.0) < tol
        )

    def to_flat12(self) -> np.ndarray:
        """Row-major rotation followed by translation."""
        return np.concatenate([self.rotation.reshape(-1), self.translation])

    @classmethod
    def from_flat12(cls, values) -> "Pose":
        v = np.asarray(values, dtype=np.float64).reshape(12)
        return cls(v[:9].reshape(3, 3), v[9:])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _so3_coeffs(theta)
    w = hat(omega)
    return np.eye(3) + a * w + b * (w @ w)


def so3_log(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    skew = vee(r - r.T) / 2.0  # sin(theta) * axis
    s = float(np.linalg.norm(skew))
    c = (np.trace(r) - 1.0) / 2.0
    theta = float(np.arctan2(s, np.clip(c, -1.0, 1.0)))
    if np.pi - theta < _NEAR_PI:
        # R + R^T - 2cI = 2(1-c) a a^T; read the axis off the dominant column.
        DIAGNOSTICS["so3_log_near_pi"] += 1
        logger.debug("so3_log: angle within %.1e of pi, using stabilized branch", _NEAR_PI)
        b = (r + r.T) / 2.0 - c * np.eye(3)
        col = int(np.argmax(np.diag(b)))
        axis = b[:, col] / np.sqrt(max(b[col, col], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ skew < 0:
            axis = -axis
        return theta * axis
    if theta < _SMALL_ANGLE:
        return skew * (1.0 + theta * theta / 6.0)
    return skew * (theta / s)


def se3_exp(twist) -> Pose:
    """Exponential map from a rotation-first twist to a Pose."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    omega, v = twist[:3], twist[3:]
    theta = float(np.linalg.norm(omega))
    a, b, cc = _so3_coeffs(theta)
    w = hat(omega)
    ww = w @ w
    rot = np.eye(3) + a * w + b * ww
    vmat = np.eye(3) + b * w + cc * ww
    return Pose(rot, vmat @ v)


def se3_log(pose: Pose) -> np.ndarray:
    omega = so3_log(pose.rotation)
    theta = float(np.linalg.norm(omega))
    w = hat(omega)
    if theta < _SMALL_ANGLE:
        coef = 1.0 / 12.0 + theta * theta / 720.0
    else:
        coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
    vinv = np.eye(3) - 0.5 * w + coef * (w @ w)
    return np.concatenate([omega, vinv @ pose.translation])


def pose_error(estimate: Pose, gt: Pose) -> tuple[float, float]:
    """Translation distance and rotation angle (degrees) between two poses."""
    dt = float(np.linalg.norm(estimate.translation - gt.translation))
    rel = gt.rotation.T @ estimate.rotation
    s = np.linalg.norm(vee(rel - rel.T)) / 2.0
    c = (np.trace(rel) - 1.0) / 2.0
    return dt, float(np.degrees(np.arctan2(s, c)))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``eye`` whose -z axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("eye and target coincide")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        # Looking along ``up``: any perpendicular will do.
        right = np.cross(forward, np.eye(3)[np.argmin(np.abs(forward))])
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    rot = np.stack([right, true_up, -forward], axis=1)
    return Pose(rot, eye)


# --------------------------------------------------------------------------- cameras


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float, pose: Pose | None = None) -> "Camera":
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height, pose or Pose.identity())

    def with_pose(self, pose: Pose) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def pixel_centers(self) -> np.ndarray:
        """All pixel centres in row-major order, shape (H*W, 2) as (u, v)."""
        jj, ii = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([ii.ravel() + 0.5, jj.ravel() + 0.5], axis=1).astype(np.float64)

    def camera_directions(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        x = (pixels[:, 0] - self.cx) / self.fx
        y = -(pixels[:, 1] - self.cy) / self.fy
        return np.stack([x, y, -np.ones_like(x)], axis=1)

    def project(self, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points -> (pixels (N, 2), depth along the optical axis (N,))."""
        pc = self.pose.inverse().apply(np.asarray(points_world, dtype=np.float64).reshape(-1, 3))
        depth = -pc[:, 2]
        u = self.fx * pc[:, 0] / depth + self.cx
        v = -self.fy * pc[:, 1] / depth + self.cy
        return np.stack([u, v], axis=1), depth

    def unproject(self, pixels: np.ndarray, depth) -> np.ndarray:
        """Pixels with optical-axis depth -> world points."""
        d = self.camera_directions(pixels) * np.asarray(depth, dtype=np.float64).reshape(-1, 1)
        return self.pose.apply(d)


# --------------------------------------------------------------------------- rays


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


@dataclass(frozen=True)
class Rays:
    """A batch of rays stored as arrays; iterating yields :class:`Ray`."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i], float(self.near[i]), float(self.far[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def unit_cube_interval(origins: np.ndarray, directions: np.ndarray, near: float = 0.0):
    """Slab intersection of rays with [0, 1]^3, clipped below by ``near``.

    Rays that miss the cube get a degenerate but valid interval of length 1e-6.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (0.0 - origins) * inv
        t1 = (1.0 - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    lo = np.maximum(tmin, near)
    miss = ~(tmax > lo)
    hi = np.where(miss, lo + 1e-6, tmax)
    return lo, hi


def generate_rays(camera: Camera, pixels, near: float = 0.0, far: float | None = None) -> Rays:
    """Rays through continuous pixel coordinates under the pinhole model.

    With ``far=None`` the far bound is the exit distance from the unit cube
    the scenes live in.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    oob = (
        (pixels[:, 0] < 0)
        | (pixels[:, 0] > camera.width)
        | (pixels[:, 1] < 0)
        | (pixels[:, 1] > camera.height)
    )
    if np.any(oob):
        raise ValueError(f"{int(oob.sum())} pixel(s) outside the {camera.width}x{camera.height} image")
    d = camera.camera_directions(pixels) @ camera.pose.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.pose.translation, d.shape).copy()
    if far is None:
        lo, hi = unit_cube_interval(o, d, near)
    else:
        if not 0 <= near < far:
            raise ValueError("need 0 <= near < far")
        lo, hi = np.full(len(d), float(near)), np.full(len(d), float(far))
    return Rays(o, d, lo, hi)


# --------------------------------------------------------------------------- torch twins


def hat_torch(w: torch.Tensor) -> torch.Tensor:
    z = torch.zeros((), dtype=w.dtype)
    return torch.stack(
        [
            torch.stack([z, -w[2], w[1]]),
            torch.stack([w[2], z, -w[0]]),
            torch.stack([-w[1], w[0], z]),
        ]
    )


def se3_exp_torch(twist: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable exponential map; returns (R, t)."""
    omega, v = twist[:3], twist[3:]
    theta2 = (omega * omega).sum()
    # Series everywhere below 1e-4 rad keeps gradients finite at zero.
    small = theta2 < 1e-8
    # The unused branch must stay finite too, or where() leaks NaN into the backward pass.
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    c = torch.where(small, 1.0 / 6.0 - theta2 / 120.0, (theta - torch.sin(theta)) / (safe2 * theta))
    w = hat_torch(omega)
    ww = w @ w
    eye = torch.eye(3, dtype=twist.dtype)
    rot = eye + a * w + b * ww
    vmat = eye + b * w + c * ww
    return rot, vmat @ v
