"""Quadrature volume rendering of colors and features.

Color and feature channels are composited with one shared weight vector
w_i = T_i * alpha_i, with alpha_i = 1 - exp(-sigma_i * delta_i) and
T_i = exp(-sum_{j<i} sigma_j * delta_j).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

import featfield.diffengine as de
from featfield.diffengine import Tensor
from featfield.errors import EmptySamples, EmptyViewList
from featfield.fields import FeatureGrid, FieldNetwork, FieldOutput, conditioning_matrix
from featfield.geometry import Camera, DepthSamples, Ray, pixel_centers, pixel_directions, sample_depths_batch

WHITE = 1.0


@dataclass
class CompositeResult:
    color: Tensor  # (R, 3), no background
    feature: Tensor  # (R, D)
    opacity: Tensor  # (R,)
    depth: Tensor  # (R,) expected depth sum w_i t_i
    weights: Tensor  # (R, S)
    transmittance: Tensor  # (R,) left after the last sample

    def with_background(self, background: float = WHITE) -> Tensor:
        return self.color + de.reshape(1.0 - self.opacity, (-1, 1)) * background


def composite(depths, deltas, sigma, color, feature) -> CompositeResult:
    """Composite per-sample quantities along rays.

    Shapes: depths/deltas/sigma (R, S), color (R, S, 3), feature (R, S, D).
    Single-ray inputs without the leading R axis are accepted as well.
    """
    sigma = de.as_tensor(sigma)
    color = de.as_tensor(color, dtype=sigma.dtype)
    feature = de.as_tensor(feature, dtype=sigma.dtype)
    if sigma.ndim == 1:
        sigma = de.reshape(sigma, (1,) + sigma.shape)
        color = de.reshape(color, (1,) + color.shape)
        feature = de.reshape(feature, (1,) + feature.shape)
    R, S = sigma.shape
    if S == 0:
        raise EmptySamples("cannot composite a ray without samples")
    if np.any(sigma.data < 0):
        raise ValueError("densities must be non-negative")
    dt = sigma.dtype
    deltas = np.asarray(deltas, dtype=dt).reshape(R, S)
    depths = np.asarray(depths, dtype=dt).reshape(R, S)

    tau = sigma * deltas
    alpha = 1.0 - de.exp(-tau)
    trans = de.exp(-de.cumsum(tau, axis=1, exclusive=True))
    w = trans * alpha
    w3 = de.reshape(w, (R, S, 1))
    return CompositeResult(
        color=de.sum(w3 * color, axis=1),
        feature=de.sum(w3 * feature, axis=1),
        opacity=de.sum(w, axis=1),
        depth=de.sum(w * depths, axis=1),
        weights=w,
        transmittance=de.exp(-de.sum(tau, axis=1)),
    )


def composite_samples(samples: DepthSamples, out: FieldOutput) -> CompositeResult:
    """Single-ray convenience wrapper."""
    return composite(samples.depths, samples.deltas, out.sigma, out.color, out.feature)


@dataclass
class Conditioning:
    """Encoded conditioning views: grids stacked view-major per object."""

    grids: Tensor  # (G, h, w, C)
    cameras: list  # cameras[b] -> list of Camera for object b

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.grids.shape[1], self.grids.shape[2]

    def flat(self) -> Tensor:
        G, h, w, C = self.grids.shape
        return de.reshape(self.grids, (G * h * w, C))


def condition(net: FieldNetwork, images: Sequence, cameras: Sequence) -> Conditioning:
    """Encode conditioning images. ``images[b]`` is a list/array of views for object b."""
    flat_imgs, cams = [], []
    for imgs, cs in zip(images, cameras):
        imgs = np.asarray(imgs)
        if imgs.ndim == 3:
            imgs = imgs[None]
        cs = [cs] if isinstance(cs, Camera) else list(cs)
        if len(cs) == 0 or len(cs) != len(imgs):
            raise EmptyViewList("each object needs as many cameras as conditioning images (>= 1)")
        flat_imgs.extend(imgs)
        cams.append(cs)
    return Conditioning(net.encode(np.stack(flat_imgs)), cams)


def conditioning_from_grids(grids: Sequence[FeatureGrid], cameras: Sequence[Camera]) -> Conditioning:
    if len(grids) == 0:
        raise EmptyViewList("need at least one conditioning view")
    stacked = de.concat([de.reshape(g.values, (1,) + g.values.shape) for g in grids], axis=0)
    return Conditioning(stacked, [list(cameras)])


def condition_features(net: FieldNetwork, cond: Conditioning, points: np.ndarray,
                       obj_index: Optional[np.ndarray] = None) -> Tensor:
    """Pixel-aligned, view-averaged encoder features for world points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if obj_index is None:
        obj_index = np.zeros(len(points), dtype=np.int64)
    m = conditioning_matrix(points, obj_index, cond.cameras, cond.grid_hw)
    return de.sparse_matmul(m, cond.flat())


@dataclass
class RayRender:
    result: CompositeResult
    rgb: Tensor  # (R, 3) background composited
    points: np.ndarray  # (R, S, 3)
    depths: np.ndarray  # (R, S)
    field: FieldOutput  # flattened over (R*S)


def render_rays(net: FieldNetwork, cond: Conditioning, origins, directions, near, far,
                n_samples: int, obj_index=None, stratified: bool = False,
                rng: Optional[np.random.Generator] = None,
                background: float = WHITE) -> RayRender:
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    R = origins.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (R,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (R,))
    t, deltas = sample_depths_batch(near, far, n_samples, stratified, rng)
    pts = origins[:, None, :] + t[..., None] * directions[:, None, :]
    flat_pts = pts.reshape(-1, 3)
    flat_dirs = np.repeat(directions, n_samples, axis=0)
    obj = np.zeros(R, dtype=np.int64) if obj_index is None else np.asarray(obj_index)
    feats = condition_features(net, cond, flat_pts, np.repeat(obj, n_samples))
    out = net.forward(feats, flat_pts, flat_dirs)
    S = n_samples
    res = composite(
        t, deltas,
        de.reshape(out.sigma, (R, S)),
        de.reshape(out.color, (R, S, 3)),
        de.reshape(out.feature, (R, S, out.feature.shape[-1])),
    )
    return RayRender(res, res.with_background(background), pts, t, out)


def render_ray(net: FieldNetwork, grids: Sequence[FeatureGrid], cameras: Sequence[Camera], ray: Ray,
               n_samples: int, stratified: bool = False,
               rng: Optional[np.random.Generator] = None) -> CompositeResult:
    cond = conditioning_from_grids(grids, cameras)
    return render_rays(net, cond, ray.origin, ray.direction, ray.near, ray.far, n_samples,
                       stratified=stratified, rng=rng).result


@dataclass
class RenderedImage:
    rgb: np.ndarray  # (H, W, 3), background composited
    feature: np.ndarray  # (H, W, D)
    opacity: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W)


def render_pixels(net: FieldNetwork, cond: Conditioning, camera: Camera, pixels: np.ndarray,
                  near: float, far: float, n_samples: int, chunk: int = 2048,
                  background: float = WHITE) -> RenderedImage:
    """Forward-only render of arbitrary pixel coordinates (N, 2) -> arrays with leading N."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    dirs = pixel_directions(camera, pixels)
    origin = camera.center
    rgb, feat, opa, dep = [], [], [], []
    for s in range(0, len(pixels), chunk):
        d = dirs[s : s + chunk]
        r = render_rays(net, cond, np.broadcast_to(origin, d.shape), d, near, far, n_samples,
                        background=background)
        rgb.append(r.rgb.data)
        feat.append(r.result.feature.data)
        opa.append(r.result.opacity.data)
        dep.append(r.result.depth.data)
    return RenderedImage(np.concatenate(rgb), np.concatenate(feat), np.concatenate(opa),
                         np.concatenate(dep))


def render_image(net: FieldNetwork, cond: Conditioning, camera: Camera, n_samples: int,
                 near: float, far: float, chunk: int = 2048,
                 background: float = WHITE) -> RenderedImage:
    H, W = camera.height, camera.width
    r = render_pixels(net, cond, camera, pixel_centers(W, H).reshape(-1, 2), near, far,
                      n_samples, chunk, background)
    return RenderedImage(r.rgb.reshape(H, W, 3), r.feature.reshape(H, W, -1),
                         r.opacity.reshape(H, W), r.depth.reshape(H, W))


def save_png(path, rgb: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, optimize=False)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
