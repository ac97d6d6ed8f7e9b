"""Pinhole cameras, rays and depth quadrature.

Conventions: the camera frame is x right, y down, z forward. Pixel (i, j)
has its center at continuous coordinate (i + 0.5, j + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from featfield.errors import NonPositiveDepth

MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world-to-camera
    translation: np.ndarray  # world-to-camera
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("camera rotation must be orthonormal with det +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.rotation.T + self.translation

    def with_size(self, width: int, height: int) -> "Camera":
        """Same pose, intrinsics rescaled to a new image size."""
        sx, sy = width / self.width, height / self.height
        return Camera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                      self.rotation, self.translation, width, height)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
            "width": int(self.width), "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["rotation"]).reshape(3, 3),
                   np.array(d["translation"]), int(d["width"]), int(d["height"]))

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *, focal: float, width: int,
            height: int) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(fwd @ up) > 1 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    # re-orthonormalize to keep det/orthogonality within 1e-9
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return Camera(focal, focal, width / 2.0, height / 2.0, R, -R @ eye, width, height)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.near < self.far):
            raise ValueError(f"ray bounds must satisfy 0 <= near < far, got {self.near}, {self.far}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class DepthSamples:
    depths: np.ndarray
    deltas: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.depths)


def project(camera: Camera, x) -> np.ndarray:
    """Continuous pixel coordinate (u, v) of world point ``x``; not clamped to the image."""
    p = camera.to_camera(np.asarray(x, dtype=np.float64).reshape(3))
    if p[2] <= MIN_DEPTH:
        raise NonPositiveDepth(f"point {tuple(np.asarray(x).tolist())} has camera depth {p[2]:.3g}")
    return np.array([camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy])


def project_points(camera: Camera, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched projection. Returns (uv, z); entries with z <= MIN_DEPTH are flagged by the caller.

    Points behind the camera are pushed to a huge coordinate so later border
    clamping picks an edge cell instead of producing inf/nan.
    """
    p = camera.to_camera(np.asarray(x, dtype=np.float64).reshape(-1, 3))
    z = p[:, 2]
    zs = np.where(z > MIN_DEPTH, z, MIN_DEPTH)
    uv = np.stack([camera.fx * p[:, 0] / zs + camera.cx, camera.fy * p[:, 1] / zs + camera.cy], -1)
    uv = np.clip(uv, -1e9, 1e9)
    return uv.reshape(np.shape(x)[:-1] + (2,)), z.reshape(np.shape(x)[:-1])


def pixel_directions(camera: Camera, pixels: np.ndarray) -> np.ndarray:
    """Unit world-space directions through continuous pixel coordinates (..., 2)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    d = np.stack(
        [(pixels[..., 0] - camera.cx) / camera.fx, (pixels[..., 1] - camera.cy) / camera.fy,
         np.ones(pixels.shape[:-1])], -1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ camera.rotation


def ray_for_pixel(camera: Camera, pixel, t_n: float, t_f: float) -> Ray:
    d = pixel_directions(camera, np.asarray(pixel, dtype=np.float64).reshape(1, 2))[0]
    return Ray(camera.center, d, t_n, t_f)


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(H, W, 2) array of (u, v) pixel-center coordinates."""
    u, v = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([u, v], -1)


def sample_depths(ray: Ray, n: int, stratified: bool = False,
                  rng: Optional[np.random.Generator] = None) -> DepthSamples:
    t, dt = sample_depths_batch(np.array([ray.near]), np.array([ray.far]), n, stratified, rng)
    return DepthSamples(t[0], dt[0])


def sample_depths_batch(near: np.ndarray, far: np.ndarray, n: int, stratified: bool = False,
                        rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray]:
    """Depths (R, n) and deltas (R, n) for R rays binned into n equal intervals.

    Deterministic mode returns bin midpoints, stratified mode one uniform draw
    per bin. The last delta runs to the far bound.
    """
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    near = np.asarray(near, dtype=np.float64).reshape(-1, 1)
    far = np.asarray(far, dtype=np.float64).reshape(-1, 1)
    width = (far - near) / n
    lower = near + width * np.arange(n)
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random((near.shape[0], n))
    else:
        u = np.full((near.shape[0], n), 0.5)
    t = lower + u * width
    deltas = np.concatenate([np.diff(t, axis=1), far - t[:, -1:]], axis=1)
    return t, deltas
