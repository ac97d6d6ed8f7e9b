"""Procedural part-labeled objects built from SDF primitives.

Objects are unions of spheres, boxes and capsules. Each category template
places primitives with jittered proportions, tags them with part ids and
attaches semantic keypoints shared across instances. A sphere tracer produces
ground-truth RGB, mask, part, hit-point and depth maps.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from featfield.geometry import Camera, look_at, pixel_centers, pixel_directions

BACKGROUND = -1
HIT_EPS = 1e-4
MAX_STEPS = 128
AMBIENT = 0.3
LIGHTS = (
    (np.array([0.4, -0.6, 0.7]) / np.linalg.norm([0.4, -0.6, 0.7]), 0.55),
    (np.array([-0.7, 0.3, 0.4]) / np.linalg.norm([-0.7, 0.3, 0.4]), 0.3),
)
CAMERA_RADIUS = 2.0
FOCAL_SCALE = 1.4  # focal length in units of image width; keeps the unit cube in frame
KINDS = ("sphere", "box", "capsule")


@dataclass
class Primitive:
    kind: str
    translation: np.ndarray
    scale: np.ndarray  # sphere: (r, ., .); box: half extents; capsule: (r, half length, .)
    albedo: np.ndarray
    part_id: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # local-to-world

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.any(self.scale <= 0):
            raise ValueError("primitive scales must be positive")

    def local(self, x: np.ndarray) -> np.ndarray:
        return (x - self.translation) @ self.rotation

    def sdf(self, x: np.ndarray) -> np.ndarray:
        p = self.local(np.asarray(x, dtype=np.float64).reshape(-1, 3))
        s = self.scale
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=1) - s[0]
        if self.kind == "box":
            q = np.abs(p) - s
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            return outside + np.minimum(q.max(axis=1), 0.0)
        z = np.clip(p[:, 2], -s[1], s[1])
        return np.linalg.norm(p - np.stack([np.zeros_like(z), np.zeros_like(z), z], 1), axis=1) - s[0]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        s, R, t = self.scale, self.rotation, self.translation
        if self.kind == "sphere":
            ext = np.full(3, s[0])
        elif self.kind == "box":
            ext = np.abs(R) @ s
        else:
            ext = np.abs(R[:, 2]) * s[1] + s[0]
        return t - ext, t + ext

    def area(self) -> float:
        s = self.scale
        if self.kind == "sphere":
            return 4 * np.pi * s[0] ** 2
        if self.kind == "box":
            return 8 * (s[0] * s[1] + s[1] * s[2] + s[0] * s[2])
        return 4 * np.pi * s[0] ** 2 + 4 * np.pi * s[0] * s[1]

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        s = self.scale
        if self.kind == "sphere":
            p = _unit_vectors(rng, n) * s[0]
        elif self.kind == "box":
            areas = np.array([s[1] * s[2], s[0] * s[2], s[0] * s[1]])
            axis = rng.choice(3, size=n, p=areas / areas.sum())
            p = rng.uniform(-1, 1, (n, 3)) * s
            sign = rng.choice([-1.0, 1.0], size=n)
            p[np.arange(n), axis] = sign * s[axis]
        else:
            r, h = s[0], s[1]
            on_side = rng.random(n) < (4 * np.pi * r * h) / self.area()
            p = _unit_vectors(rng, n) * r
            p[:, 2] += np.where(p[:, 2] >= 0, h, -h)
            ang = rng.uniform(0, 2 * np.pi, n)
            side = np.stack([r * np.cos(ang), r * np.sin(ang), rng.uniform(-h, h, n)], 1)
            p = np.where(on_side[:, None], side, p)
        return p @ self.rotation.T + self.translation

    def transformed(self, scale: float, offset: np.ndarray) -> "Primitive":
        return Primitive(self.kind, (self.translation + offset) * scale, self.scale * scale,
                         self.albedo.copy(), self.part_id, self.rotation.copy())

    def to_dict(self) -> dict:
        return {"kind": self.kind, "translation": self.translation.tolist(),
                "scale": self.scale.tolist(), "albedo": self.albedo.tolist(),
                "part_id": int(self.part_id), "rotation": self.rotation.reshape(-1).tolist()}


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class SceneInstance:
    category: str
    primitives: list
    keypoints: list  # (keypoint_id, xyz)
    seed: int
    part_names: tuple = ()

    @property
    def part_ids(self) -> list[int]:
        return sorted({p.part_id for p in self.primitives})

    @property
    def num_parts(self) -> int:
        return len(self.part_names) if self.part_names else max(self.part_ids) + 1

    def keypoint_array(self) -> tuple[np.ndarray, np.ndarray]:
        ids = np.array([k for k, _ in self.keypoints], dtype=np.int64)
        xyz = np.array([p for _, p in self.keypoints], dtype=np.float64).reshape(-1, 3)
        return ids, xyz

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = zip(*(p.bounds() for p in self.primitives))
        return np.min(lo, axis=0), np.max(hi, axis=0)


def signed_distance(scene: SceneInstance, x) -> tuple[np.ndarray, np.ndarray]:
    """Union SDF and the part id of the closest primitive (ties -> lowest index).

    Accepts a single point (returns scalars) or an (N, 3) batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    d = np.stack([p.sdf(x) for p in scene.primitives])
    idx = np.argmin(d, axis=0)
    dist = d[idx, np.arange(d.shape[1])]
    parts = np.array([p.part_id for p in scene.primitives])[idx]
    if single:
        return float(dist[0]), int(parts[0])
    return dist, parts


def _closest_primitive(scene: SceneInstance, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.stack([p.sdf(x) for p in scene.primitives])
    idx = np.argmin(d, axis=0)
    return d[idx, np.arange(d.shape[1])], idx


def normalize_scene(primitives: list, keypoints: list) -> tuple[list, list]:
    """Center the bounding box at the origin and scale its longest edge to 1."""
    lo, hi = zip(*(p.bounds() for p in primitives))
    lo, hi = np.min(lo, axis=0), np.max(hi, axis=0)
    offset = -(lo + hi) / 2
    scale = 1.0 / np.max(hi - lo)
    prims = [p.transformed(scale, offset) for p in primitives]
    kps = [(k, (np.asarray(v, dtype=np.float64) + offset) * scale) for k, v in keypoints]
    return prims, kps


# -- category templates -----------------------------------------------------

def _legs(rng, half_x, half_y, inset, radius, top_z, part_id, albedo):
    prims, kps = [], []
    # keypoint ids 0..3: front-left, front-right, back-left, back-right leg tips
    for kid, (sx, sy) in enumerate(((-1, -1), (1, -1), (-1, 1), (1, 1))):
        x, y = sx * (half_x - inset), sy * (half_y - inset)
        z0, z1 = radius, top_z
        prims.append(Primitive("capsule", [x, y, (z0 + z1) / 2], [radius, (z1 - z0) / 2, 1.0],
                               albedo, part_id))
        kps.append((kid, np.array([x, y, 0.0])))
    return prims, kps


def _part_albedos(rng, n):
    return [rng.uniform(0.1, 0.85, 3) for _ in range(n)]


def chair_template(rng: np.random.Generator):
    seat_c, back_c, leg_c = _part_albedos(rng, 3)
    w = rng.uniform(0.8, 1.1)
    dp = rng.uniform(0.7, 1.0)
    th = rng.uniform(0.08, 0.14)
    h = rng.uniform(0.7, 1.0)
    bh = rng.uniform(0.6, 1.0)
    bt = rng.uniform(0.08, 0.12)
    r = rng.uniform(0.04, 0.07)
    inset = r + rng.uniform(0.0, 0.05)
    top = h + th / 2
    prims = [
        Primitive("box", [0, 0, h], [w / 2, dp / 2, th / 2], seat_c, 0),
        Primitive("box", [0, dp / 2 - bt / 2, top + bh / 2], [w / 2, bt / 2, bh / 2], back_c, 1),
    ]
    legs, kps = _legs(rng, w / 2, dp / 2, inset, r, h - th / 2, 2, leg_c)
    prims += legs
    kps += [
        (4, np.array([-w / 2, -dp / 2, top])),
        (5, np.array([w / 2, -dp / 2, top])),
        (6, np.array([-w / 2, dp / 2, top + bh])),
        (7, np.array([w / 2, dp / 2, top + bh])),
        (8, np.array([0.0, -dp / 4, top])),
    ]
    return prims, kps


def table_template(rng: np.random.Generator):
    top_c, leg_c, shelf_c = _part_albedos(rng, 3)
    w = rng.uniform(1.0, 1.4)
    dp = rng.uniform(0.6, 1.0)
    th = rng.uniform(0.06, 0.1)
    h = rng.uniform(0.7, 0.9)
    r = rng.uniform(0.035, 0.06)
    inset = r + rng.uniform(0.02, 0.08)
    shelf_z = h * rng.uniform(0.25, 0.4)
    prims = [Primitive("box", [0, 0, h - th / 2], [w / 2, dp / 2, th / 2], top_c, 0)]
    legs, kps = _legs(rng, w / 2, dp / 2, inset, r, h - th, 1, leg_c)
    prims += legs
    prims.append(Primitive("box", [0, 0, shelf_z], [w / 2 - inset, dp / 2 - inset, 0.02],
                           shelf_c, 2))
    kps += [
        (4, np.array([-w / 2, -dp / 2, h])),
        (5, np.array([w / 2, -dp / 2, h])),
        (6, np.array([-w / 2, dp / 2, h])),
        (7, np.array([w / 2, dp / 2, h])),
        (8, np.array([0.0, 0.0, h])),
    ]
    return prims, kps


@dataclass(frozen=True)
class CategoryTemplate:
    name: str
    build: Callable
    part_names: tuple


TEMPLATES = {
    "chair": CategoryTemplate("chair", chair_template, ("seat", "back", "legs")),
    "table": CategoryTemplate("table", table_template, ("top", "legs", "shelf")),
}


def generate_scene(category, seed: int) -> SceneInstance:
    tmpl = TEMPLATES[category] if isinstance(category, str) else category
    rng = np.random.default_rng(seed)
    prims, kps = tmpl.build(rng)
    prims, kps = normalize_scene(prims, kps)
    return SceneInstance(tmpl.name, prims, kps, int(seed), tmpl.part_names)


# -- rendering --------------------------------------------------------------

@dataclass
class RenderedView:
    camera: Camera
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) bool
    part_map: np.ndarray  # (H, W) int, BACKGROUND off-object
    hit_points: np.ndarray  # (H, W, 3), nan off-object
    depth: np.ndarray  # (H, W) ray distance, inf off-object


def _sdf_normals(scene: SceneInstance, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    n = np.zeros_like(x)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        n[:, k] = signed_distance(scene, x + e)[0] - signed_distance(scene, x - e)[0]
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)


def sphere_trace(scene: SceneInstance, origins: np.ndarray, dirs: np.ndarray,
                 bound_radius: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """Returns (t, hit) per ray; t is only meaningful where hit."""
    n = len(dirs)
    b = np.einsum("ij,ij->i", origins, dirs)
    c = np.einsum("ij,ij->i", origins, origins) - bound_radius ** 2
    disc = b * b - c
    t = np.maximum(-b - np.sqrt(np.maximum(disc, 0.0)), 0.0)
    t_max = -b + np.sqrt(np.maximum(disc, 0.0))
    active = disc > 0
    hit = np.zeros(n, dtype=bool)
    for _ in range(MAX_STEPS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        d, _ = signed_distance(scene, origins[idx] + t[idx, None] * dirs[idx])
        done = d < HIT_EPS
        hit[idx[done]] = True
        t[idx[~done]] += d[~done]
        escaped = t[idx] > t_max[idx]
        active[idx[done | escaped]] = False
    return t, hit


def render_ground_truth(scene: SceneInstance, camera: Camera,
                        image_size: Optional[int] = None) -> RenderedView:
    if image_size is not None and (camera.width, camera.height) != (image_size, image_size):
        camera = camera.with_size(image_size, image_size)
    H, W = camera.height, camera.width
    dirs = pixel_directions(camera, pixel_centers(W, H).reshape(-1, 2))
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    t, hit = sphere_trace(scene, origins, dirs)
    x = origins + t[:, None] * dirs

    rgb = np.ones((H * W, 3))
    part = np.full(H * W, BACKGROUND, dtype=np.int64)
    hits = np.full((H * W, 3), np.nan)
    depth = np.full(H * W, np.inf)
    if hit.any():
        xh = x[hit]
        _, prim_idx = _closest_primitive(scene, xh)
        albedo = np.stack([p.albedo for p in scene.primitives])[prim_idx]
        normals = _sdf_normals(scene, xh)
        # two-sided so grazing normals never turn black
        shade = np.full(len(xh), AMBIENT)
        for ldir, strength in LIGHTS:
            shade += strength * np.abs(normals @ ldir)
        rgb[hit] = np.clip(albedo * shade[:, None], 0.0, 1.0)
        part[hit] = np.array([p.part_id for p in scene.primitives])[prim_idx]
        hits[hit] = xh
        depth[hit] = t[hit]
    return RenderedView(camera, rgb.reshape(H, W, 3), hit.reshape(H, W), part.reshape(H, W),
                        hits.reshape(H, W, 3), depth.reshape(H, W))


def sample_surface_points(scene: SceneInstance, n: int, rng: np.random.Generator,
                          tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted samples on the union surface with their SDF part ids."""
    areas = np.array([p.area() for p in scene.primitives])
    pts = []
    total = 0
    while total < n:
        m = 2 * n
        counts = rng.multinomial(m, areas / areas.sum())
        cand = np.concatenate([p.sample_surface(c, rng) for p, c in zip(scene.primitives, counts)])
        d, _ = signed_distance(scene, cand)
        keep = cand[d > -tol]  # drop samples buried inside another primitive
        pts.append(keep)
        total += len(keep)
    pts = np.concatenate(pts)
    pts = pts[rng.permutation(len(pts))[:n]]
    return pts, signed_distance(scene, pts)[1]


# -- cameras ----------------------------------------------------------------

def random_hemisphere_cameras(n: int, rng: np.random.Generator, size: int,
                              radius: float = CAMERA_RADIUS, focal_scale: float = FOCAL_SCALE) -> list:
    cams = []
    for _ in range(n):
        z = rng.uniform(0.0, 1.0)
        phi = rng.uniform(0.0, 2 * np.pi)
        rxy = np.sqrt(1 - z * z)
        eye = radius * np.array([rxy * np.cos(phi), rxy * np.sin(phi), z])
        cams.append(look_at(eye, focal=focal_scale * size, width=size, height=size))
    return cams


def fixed_ring_cameras(n: int, size: int, radius: float = CAMERA_RADIUS,
                       focal_scale: float = FOCAL_SCALE) -> list:
    """Deterministic poses winding over three elevation bands of the upper hemisphere."""
    cams = []
    elevations = np.deg2rad([15.0, 35.0, 55.0])
    for k in range(n):
        el = elevations[k % 3]
        az = 2 * np.pi * k / n + 0.3
        eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(look_at(eye, focal=focal_scale * size, width=size, height=size))
    return cams


# -- dataset ----------------------------------------------------------------

def split_sizes(n: int) -> tuple[int, int, int]:
    """70/10/20 split with at least one instance in each split."""
    n_val = max(1, int(round(0.1 * n)))
    n_test = max(1, int(round(0.2 * n)))
    return n - n_val - n_test, n_val, n_test


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _npy_bytes(arr: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def generate_dataset(category: str, n_instances: int, n_views_train: int, out_dir, seed: int = 0,
                     image_size: int = 128, teacher_cfg=None, n_surface_points: int = 4096,
                     progress: Optional[Callable[[str], None]] = None) -> dict:
    """Write the multi-view dataset and return the root manifest."""
    from featfield import teacher as teacher_mod
    from featfield.rendering import save_png

    if category not in TEMPLATES:
        raise KeyError(category)
    if n_instances < 5:
        raise ValueError("need at least 5 instances for a train/val/test split")
    tmpl = TEMPLATES[category]
    out = Path(out_dir)
    n_train, n_val, n_test = split_sizes(n_instances)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    if teacher_cfg is None:
        teacher_cfg = teacher_mod.SyntheticTeacherConfig(part_channels=len(tmpl.part_names))
    seeds = np.random.SeedSequence(seed).spawn(n_instances)
    ring = fixed_ring_cameras(n_views_train, image_size)
    listing = {"train": [], "val": [], "test": []}
    for i, (split, ss) in enumerate(zip(splits, seeds)):
        inst_id = f"{category}_{i:03d}"
        listing[split].append(inst_id)
        scene_seed, cam_seed, teach_seed, pts_seed = (int(s.generate_state(1, np.uint64)[0])
                                                      for s in ss.spawn(4))
        scene = generate_scene(tmpl, scene_seed)
        cams = (random_hemisphere_cameras(n_views_train, np.random.default_rng(cam_seed), image_size)
                if split == "train" else ring)
        d = out / split / inst_id
        d.mkdir(parents=True, exist_ok=True)
        trng = np.random.default_rng(teach_seed)
        views = []
        for v, cam in enumerate(cams):
            view = render_ground_truth(scene, cam)
            stem = f"view_{v:03d}"
            save_png(d / f"{stem}.png", view.rgb)
            tmap = teacher_mod.synth_teacher_from_view(view, teacher_cfg, trng)
            teacher_mod.write_teacher_map(tmap, d / f"{stem}.ftfm")
            _atomic_write_bytes(d / f"{stem}.parts.npy", _npy_bytes(view.part_map.astype(np.int8)))
            _atomic_write_bytes(d / f"{stem}.depth.npy", _npy_bytes(view.depth.astype(np.float32)))
            _atomic_write_bytes(d / f"{stem}.meta.json", _json_bytes({"camera": cam.to_dict()}))
            views.append(stem)
        pts, parts = sample_surface_points(scene, n_surface_points, np.random.default_rng(pts_seed))
        lines = "".join(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {int(l)}\n" for p, l in zip(pts, parts))
        _atomic_write_bytes(d / "gt_parts.txt", lines.encode())
        kp = [{"id": int(k), "xyz": [float(c) for c in v]} for k, v in scene.keypoints]
        _atomic_write_bytes(d / "keypoints.json", _json_bytes(kp))
        _atomic_write_bytes(d / "scene.json", _json_bytes({
            "category": category, "seed": scene_seed,
            "primitives": [p.to_dict() for p in scene.primitives]}))
        _atomic_write_bytes(d / "manifest.json", _json_bytes({
            "instance_id": inst_id, "split": split, "category": category, "views": views}))
        if progress:
            progress(inst_id)
    manifest = {
        "category": category, "seed": int(seed), "n_instances": n_instances,
        "n_views": n_views_train, "image_size": image_size,
        "part_names": list(tmpl.part_names), "teacher": teacher_cfg.to_dict(),
        "splits": listing,
    }
    _atomic_write_bytes(out / "manifest.json", _json_bytes(manifest))
    return manifest


def load_scene(path) -> SceneInstance:
    """Rebuild a SceneInstance from an instance directory."""
    d = Path(path)
    meta = json.loads((d / "scene.json").read_text())
    prims = [Primitive(p["kind"], p["translation"], p["scale"], p["albedo"], p["part_id"],
                       np.array(p["rotation"]).reshape(3, 3)) for p in meta["primitives"]]
    kps = [(k["id"], np.array(k["xyz"])) for k in json.loads((d / "keypoints.json").read_text())]
    tmpl = TEMPLATES.get(meta["category"])
    return SceneInstance(meta["category"], prims, kps, meta["seed"],
                         tmpl.part_names if tmpl else ())


def manifest_hash(root) -> str:
    """SHA-256 over every dataset file, path-sorted; run manifests are excluded."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run_manifest.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
