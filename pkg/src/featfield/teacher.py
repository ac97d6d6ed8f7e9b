"""Per-pixel teacher feature maps.

Maps are stored in a small self-describing binary format ("FTFM"), so
features exported by any external model can be dropped in. A synthetic
teacher derives features from ground-truth part ids and surface
coordinates for procedural scenes.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from featfield.errors import BadMagic, TruncatedFile, VersionUnsupported

MAGIC = b"FTFM"
VERSION = 1
FLAG_NORMALIZED = 1
_HEADER = struct.Struct("<4sIIIII")


@dataclass
class TeacherFeatureMap:
    data: np.ndarray  # (H, W, D) float32
    normalized: bool = False

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"teacher map must be (H, W, D), got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def normalized_copy(self) -> "TeacherFeatureMap":
        return TeacherFeatureMap(l2_normalize(self.data), True)


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Unit-norm along the last axis; zero vectors stay zero."""
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > eps, x / np.maximum(n, eps), 0.0).astype(x.dtype)


def write_teacher_map(tmap: TeacherFeatureMap, path) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    H, W, D = tmap.data.shape
    header = _HEADER.pack(MAGIC, VERSION, FLAG_NORMALIZED if tmap.normalized else 0, H, W, D)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(tmap.data.astype("<f4", copy=False).tobytes(order="C"))
    os.replace(tmp, path)


def read_teacher_map(path) -> TeacherFeatureMap:
    raw = Path(path).read_bytes()
    if len(raw) >= 4 and raw[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFile(path, _HEADER.size, len(raw))
    _, version, flags, H, W, D = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionUnsupported(f"{path}: FTFM version {version} (supported: {VERSION})")
    expected = _HEADER.size + 4 * H * W * D
    if len(raw) != expected:
        raise TruncatedFile(path, expected, len(raw))
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(H, W, D)
    return TeacherFeatureMap(data.astype(np.float32), bool(flags & FLAG_NORMALIZED))


@dataclass
class SyntheticTeacherConfig:
    part_channels: int = 3
    coord_channels: int = 3
    noise_sigma: float = 0.05
    blur_radius: float = 2.0

    def __post_init__(self):
        if self.part_channels < 1:
            raise ValueError("part_channels must be >= 1")
        if self.coord_channels != 3:
            raise ValueError("coord_channels is fixed at 3")
        if self.blur_radius < 0 or self.noise_sigma < 0:
            raise ValueError("blur_radius and noise_sigma must be non-negative")

    @property
    def channels(self) -> int:
        return self.part_channels + self.coord_channels

    def to_dict(self) -> dict:
        return {"part_channels": self.part_channels, "coord_channels": self.coord_channels,
                "noise_sigma": self.noise_sigma, "blur_radius": self.blur_radius}


def raw_teacher_features(part_map: np.ndarray, hit_points: np.ndarray, part_channels: int) -> np.ndarray:
    """One-hot part id followed by hit coordinates mapped from [-0.5, 0.5] to [0, 1]."""
    H, W = part_map.shape
    mask = part_map >= 0
    out = np.zeros((H, W, part_channels + 3))
    ys, xs = np.nonzero(mask)
    out[ys, xs, part_map[mask]] = 1.0
    out[ys, xs, part_channels:] = hit_points[mask] + 0.5
    return out


def synth_teacher_from_view(view, cfg: SyntheticTeacherConfig, rng: np.random.Generator) -> TeacherFeatureMap:
    mask = view.part_map >= 0
    feats = raw_teacher_features(view.part_map, view.hit_points, cfg.part_channels)
    if cfg.blur_radius > 0:
        sigma = cfg.blur_radius / 2.0
        feats = gaussian_filter(feats, sigma=(sigma, sigma, 0), mode="nearest", truncate=2.0)
    # noise is drawn for every pixel so the stream does not depend on the mask
    noise = rng.normal(0.0, cfg.noise_sigma, feats.shape) if cfg.noise_sigma > 0 else 0.0
    feats = np.where(mask[..., None], feats + noise, 0.0)
    return TeacherFeatureMap(l2_normalize(feats).astype(np.float32), True)


def synth_teacher(scene, camera, cfg: SyntheticTeacherConfig, rng: np.random.Generator) -> TeacherFeatureMap:
    from featfield.synthscene import render_ground_truth

    return synth_teacher_from_view(render_ground_truth(scene, camera), cfg, rng)
