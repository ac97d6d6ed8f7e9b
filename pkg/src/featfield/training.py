"""Optimization loop over a generated multi-view dataset."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

import featfield.diffengine as de
from featfield.checkpoint import load_checkpoint, save_checkpoint
from featfield.diffengine import Adam, AdamState
from featfield.errors import ConfigError, InsufficientViews, NonFiniteLoss
from featfield.fields import FieldConfig, FieldNetwork
from featfield.geometry import Camera, pixel_directions
from featfield.losses import LossBreakdown, LossLog, loss_coord, loss_distill, loss_rec, total_loss
from featfield.rendering import condition, load_png, render_rays
from featfield.teacher import l2_normalize, read_teacher_map

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    objects_per_batch: int = 4
    rays_per_object: int = 1024
    n_samples: int = 64
    lr: float = 1e-4
    steps: int = 20000
    lambda_distill: float = 0.25
    lambda_coord: float = 0.25
    seed: int = 0
    distill_on: bool = True
    coord_on: bool = True
    use_internal_features: bool = True  # matching feature used downstream
    coord_weighted: bool = False  # weight coordinate loss by compositing weights
    near: float = 0.5
    far: float = 3.5
    stratified: bool = True
    log_every: int = 50
    ckpt_every: int = 1000
    field: Optional[FieldConfig] = None

    def __post_init__(self):
        if self.field is None:
            self.field = FieldConfig()
        elif isinstance(self.field, dict):
            self.field = FieldConfig(**self.field)
        for name in ("objects_per_batch", "rays_per_object", "n_samples", "steps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_samples < 2:
            raise ConfigError("n_samples must be at least 2")
        if self.lambda_distill < 0 or self.lambda_coord < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0 <= self.near < self.far:
            raise ConfigError("need 0 <= near < far")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dc_fields(self) if f.name != "field"}
        d["field"] = self.field.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        field_d = dict(d.get("field") or {})
        fknown = {f.name for f in dc_fields(FieldConfig)}
        if set(field_d) - fknown:
            raise ConfigError(f"unknown field config keys: {sorted(set(field_d) - fknown)}")
        try:
            return cls(**{**d, "field": FieldConfig(**field_d)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


# -- dataset ----------------------------------------------------------------

@dataclass
class InstanceData:
    instance_id: str
    path: Path
    images: np.ndarray  # (V, H, W, 3) float32
    cameras: list
    teacher: Optional[np.ndarray]  # (V, H, W, D) float32, unit norm per pixel

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def part_map(self, view: int) -> np.ndarray:
        return np.load(self.path / f"view_{view:03d}.parts.npy").astype(np.int64)

    def depth(self, view: int) -> np.ndarray:
        return np.load(self.path / f"view_{view:03d}.depth.npy").astype(np.float64)

    def surface_points(self) -> tuple[np.ndarray, np.ndarray]:
        arr = np.loadtxt(self.path / "gt_parts.txt", ndmin=2)
        return arr[:, :3], arr[:, 3].astype(np.int64)

    def keypoints(self) -> tuple[np.ndarray, np.ndarray]:
        kp = json.loads((self.path / "keypoints.json").read_text())
        return (np.array([k["id"] for k in kp], dtype=np.int64),
                np.array([k["xyz"] for k in kp], dtype=np.float64).reshape(-1, 3))


def load_instance(path, with_teacher: bool = True) -> InstanceData:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    imgs, cams, feats = [], [], []
    for stem in manifest["views"]:
        imgs.append(load_png(path / f"{stem}.png"))
        meta = json.loads((path / f"{stem}.meta.json").read_text())
        cams.append(Camera.from_dict(meta["camera"]))
        if with_teacher:
            tm = read_teacher_map(path / f"{stem}.ftfm")
            feats.append(tm.data if tm.normalized else l2_normalize(tm.data))
    return InstanceData(manifest["instance_id"], path, np.stack(imgs), cams,
                        np.stack(feats) if with_teacher else None)


@dataclass
class Dataset:
    root: Path
    manifest: dict
    instances: list

    @property
    def d_teacher(self) -> int:
        return self.instances[0].teacher.shape[-1]

    def by_id(self, instance_id: str) -> InstanceData:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)


def read_manifest(root) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def load_dataset(root, split: str = "train", with_teacher: bool = True) -> Dataset:
    root = Path(root)
    manifest = read_manifest(root)
    ids = manifest["splits"][split]
    return Dataset(root, manifest, [load_instance(root / split / i, with_teacher) for i in ids])


def find_instance(root, instance_id: str) -> Path:
    root = Path(root)
    for split, ids in read_manifest(root)["splits"].items():
        if instance_id in ids:
            return root / split / instance_id
    raise KeyError(instance_id)


# -- batches ----------------------------------------------------------------

@dataclass
class RayBatch:
    cond_images: np.ndarray  # (B, H, W, 3)
    cond_cameras: list  # B lists with one Camera each
    cond_views: np.ndarray  # (B,)
    target_views: np.ndarray  # (B,)
    instance_ids: list
    pixels: np.ndarray  # (B*R, 2)
    origins: np.ndarray  # (B*R, 3)
    directions: np.ndarray  # (B*R, 3)
    obj_index: np.ndarray  # (B*R,)
    gt_rgb: np.ndarray  # (B*R, 3)
    gt_feature: np.ndarray  # (B*R, D)

    def __len__(self) -> int:
        return len(self.obj_index)


def sample_ray_batch(dataset: Dataset, instance_ids, rng: np.random.Generator,
                     cfg: TrainConfig) -> RayBatch:
    """One conditioning view and rays_per_object target pixels from a different view per object."""
    R = cfg.rays_per_object
    imgs, cams, cviews, tviews, pix, org, dirs, obj, rgb, feat = ([] for _ in range(10))
    for b, idx in enumerate(instance_ids):
        inst = dataset.instances[idx] if isinstance(idx, (int, np.integer)) else dataset.by_id(idx)
        V = inst.n_views
        if V < 2:
            raise InsufficientViews(f"{inst.instance_id} has {V} view(s); need at least 2")
        t = int(rng.integers(V))
        c = int(rng.integers(V - 1))
        c += c >= t
        H, W = inst.images.shape[1:3]
        flat = rng.integers(0, H * W, R)
        ys, xs = np.divmod(flat, W)
        p = np.stack([xs + 0.5, ys + 0.5], 1)
        cam = inst.cameras[t]
        d = pixel_directions(cam, p)
        imgs.append(inst.images[c])
        cams.append([inst.cameras[c]])
        cviews.append(c)
        tviews.append(t)
        pix.append(p)
        org.append(np.broadcast_to(cam.center, d.shape))
        dirs.append(d)
        obj.append(np.full(R, b))
        rgb.append(inst.images[t][ys, xs])
        feat.append(inst.teacher[t][ys, xs])
    return RayBatch(np.stack(imgs), cams, np.array(cviews), np.array(tviews),
                    [dataset.instances[i].instance_id if isinstance(i, (int, np.integer)) else i
                     for i in instance_ids],
                    np.concatenate(pix), np.concatenate(org), np.concatenate(dirs),
                    np.concatenate(obj), np.concatenate(rgb), np.concatenate(feat))


# -- steps ------------------------------------------------------------------

def compute_losses(net: FieldNetwork, batch: RayBatch, cfg: TrainConfig,
                   rng: Optional[np.random.Generator] = None) -> LossBreakdown:
    """Forward pass and loss breakdown; call inside a Tape to get gradients."""
    cond = condition(net, batch.cond_images[:, None], batch.cond_cameras)
    stratified = cfg.stratified and rng is not None
    r = render_rays(net, cond, batch.origins, batch.directions, cfg.near, cfg.far, cfg.n_samples,
                    obj_index=batch.obj_index, stratified=stratified, rng=rng)
    rec = loss_rec(r.rgb, batch.gt_rgb)
    distill = loss_distill(r.result.feature, batch.gt_feature) if cfg.distill_on else None
    coord = None
    if cfg.coord_on:
        w = r.result.weights.data.reshape(-1) if cfg.coord_weighted else None
        coord = loss_coord(r.points.reshape(-1, 3), r.field.coord_pred, weights=w)
    return total_loss(rec, distill, coord, cfg.lambda_distill, cfg.lambda_coord)


def train_step(net: FieldNetwork, opt: Adam, batch: RayBatch, cfg: TrainConfig,
               rng: Optional[np.random.Generator] = None, step: int = 0,
               last_checkpoint=None) -> LossBreakdown:
    opt.zero_grad()
    with de.Tape() as tape:
        bd = compute_losses(net, batch, cfg, rng)
        if not np.isfinite(bd.total.data):
            raise NonFiniteLoss(step, last_checkpoint)
        tape.backward(bd.total)
        tape.clear()
    opt.step()
    return bd


@dataclass
class TrainResult:
    net: FieldNetwork
    state: AdamState
    losses: list = field(default_factory=list)  # per-step dicts
    checkpoint: Optional[Path] = None


def train(dataset: Dataset, cfg: TrainConfig, out_dir=None, net: Optional[FieldNetwork] = None,
          callback: Optional[Callable[[int, LossBreakdown], None]] = None) -> TrainResult:
    """Run cfg.steps optimization steps. Writes train_log.csv and checkpoints when out_dir is set."""
    if net is None:
        field_cfg = cfg.field
        if field_cfg.d_teacher != dataset.d_teacher:
            raise ConfigError(f"field d_teacher={field_cfg.d_teacher} but dataset teacher maps have "
                              f"{dataset.d_teacher} channels")
        net = FieldNetwork(field_cfg)
    opt = Adam(net.params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    logger = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logger = LossLog(out / "train_log.csv")
    ckpt_path = out / "checkpoint.ffck" if out is not None else None
    last_ckpt = None
    result = TrainResult(net, opt.state)
    n = len(dataset.instances)
    B = cfg.objects_per_batch
    try:
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            ids = rng.choice(n, size=B, replace=B > n)
            batch = sample_ray_batch(dataset, ids, rng, cfg)
            bd = train_step(net, opt, batch, cfg, rng, step, last_ckpt)
            wall_ms = 1e3 * (time.perf_counter() - t0)
            result.losses.append(bd.values())
            if logger is not None:
                logger.write(step, bd, wall_ms)
            if step % cfg.log_every == 0:
                v = bd.values()
                log.info("step %d rec %.5f distill %.5f coord %.5f total %.5f (%.0f ms)",
                         step, v["rec"], v["distill"], v["coord"], v["total"], wall_ms)
            if callback is not None:
                callback(step, bd)
            if ckpt_path is not None and (step % cfg.ckpt_every == 0 or step == cfg.steps):
                save_checkpoint(net, opt.state, ckpt_path, step, {"train_config": cfg.to_dict()})
                last_ckpt = ckpt_path
    finally:
        if logger is not None:
            logger.close()
    result.checkpoint = last_ckpt
    return result


def load_trained(path) -> tuple[FieldNetwork, Optional[TrainConfig]]:
    net, _, meta = load_checkpoint(path)
    tc = meta.get("train_config")
    return net, (TrainConfig.from_dict(tc) if tc else None)
