"""Zero-shot applications of learned features: matching, label transfer, editing, metrics.

All matching is exhaustive cosine nearest neighbour. Similarities within
TIE_TOL of the best are treated as ties and resolved toward the lowest
candidate index (row-major for images), so vectorized and per-pair
evaluations agree even when rounding differs in the last bits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from featfield.errors import EmptyCandidates, NoValidSourcePixels, NoValidTargetPixels, PartAbsent, ZeroVector
from featfield.fields import FieldNetwork
from featfield.geometry import Camera, pixel_centers, pixel_directions, project_points, sample_depths_batch
from featfield.rendering import Conditioning, composite, condition, condition_features, render_image

THRESHOLDS_2D = (2.5, 5.0, 7.5, 10.0)
THRESHOLDS_3D = (0.025, 0.05, 0.075, 0.1)
OPACITY_THRESHOLD = 0.5
TIE_TOL = 1e-9
CANONICAL_DIRECTION = np.array([0.0, 0.0, 1.0])
BACKGROUND = -1
TASKS = ("kp2d", "kp3d", "seg2d", "seg3d", "nvseg")


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def unit_rows(x) -> np.ndarray:
    """Row-normalize in f64; zero rows stay zero (similarity 0 to everything)."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def first_max(scores: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
    """Per row, the lowest column whose score is within ``tol`` of the row maximum."""
    m = scores.max(axis=1, keepdims=True)
    return np.argmax(scores >= m - tol, axis=1)


def cosine_argmax(queries, candidates, chunk: int = 2048) -> np.ndarray:
    """Index of the most cosine-similar candidate for every query."""
    q = unit_rows(np.atleast_2d(queries))
    c = unit_rows(np.atleast_2d(candidates))
    if c.shape[0] == 0:
        raise EmptyCandidates("no candidates to match against")
    out = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), chunk):
        out[s:s + chunk] = first_max(q[s:s + chunk] @ c.T)
    return out


def l2_argmin(queries, candidates, chunk: int = 2048) -> np.ndarray:
    """Index of the nearest candidate in Euclidean feature distance (ties -> lowest index)."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    c = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if c.shape[0] == 0:
        raise EmptyCandidates("no candidates to match against")
    cn = np.einsum("ij,ij->i", c, c)
    out = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), chunk):
        qs = q[s:s + chunk]
        d2 = np.einsum("ij,ij->i", qs, qs)[:, None] - 2 * qs @ c.T + cn[None]
        out[s:s + chunk] = first_max(-d2, tol=TIE_TOL * max(1.0, float(np.abs(d2).max())))
    return out


# -- 2D ---------------------------------------------------------------------

@dataclass
class FeatureImage:
    features: np.ndarray  # (H, W, D)
    mask: np.ndarray  # (H, W) bool

    @classmethod
    def from_render(cls, rendered, threshold: float = OPACITY_THRESHOLD) -> "FeatureImage":
        return cls(np.asarray(rendered.feature), np.asarray(rendered.opacity) > threshold)

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape[:2]

    def valid_pixels(self) -> np.ndarray:
        """(N, 2) integer (x, y) of valid pixels in row-major order."""
        ys, xs = np.nonzero(self.mask)
        return np.stack([xs, ys], 1)


def transfer_keypoints_2d(F_src: FeatureImage, F_tgt: FeatureImage, src_kps) -> np.ndarray:
    """Integer (x, y) source keypoints -> integer (x, y) predicted target pixels."""
    kps = np.asarray(src_kps, dtype=np.int64).reshape(-1, 2)
    tgt_pix = F_tgt.valid_pixels()
    if len(tgt_pix) == 0:
        raise NoValidTargetPixels("target feature map has no valid pixels")
    if len(kps) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    q = F_src.features[kps[:, 1], kps[:, 0]]
    c = F_tgt.features[tgt_pix[:, 1], tgt_pix[:, 0]]
    return tgt_pix[cosine_argmax(q, c)]


def transfer_labels_2d(F_src: FeatureImage, F_tgt: FeatureImage, src_label_map) -> np.ndarray:
    """Label every valid target pixel with the label of its most similar valid source pixel."""
    labels = np.asarray(src_label_map)
    src_pix = F_src.valid_pixels()
    if len(src_pix) == 0:
        raise NoValidSourcePixels("source feature map has no valid pixels")
    out = np.full(F_tgt.shape, BACKGROUND, dtype=np.int64)
    tgt_pix = F_tgt.valid_pixels()
    if len(tgt_pix) == 0:
        return out
    idx = cosine_argmax(F_tgt.features[tgt_pix[:, 1], tgt_pix[:, 0]],
                        F_src.features[src_pix[:, 1], src_pix[:, 0]])
    src = src_pix[idx]
    out[tgt_pix[:, 1], tgt_pix[:, 0]] = labels[src[:, 1], src[:, 0]]
    return out


# -- 3D ---------------------------------------------------------------------

def query_3d_features(net: FieldNetwork, cond: Conditioning, points, internal: bool = True,
                      chunk: int = 8192) -> np.ndarray:
    """Field features at world points: internal v_NeRF by default, head features otherwise.

    Head features consume a view direction; the canonical +z direction is used.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = []
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        feats = condition_features(net, cond, p)
        if internal:
            out.append(net.internal_features(feats, p).data)
        else:
            d = np.broadcast_to(CANONICAL_DIRECTION, p.shape)
            out.append(net.forward(feats, p, d).feature.data)
    dim = net.config.d_int if internal else net.config.d_teacher
    return np.concatenate(out) if out else np.zeros((0, dim), dtype=net.dtype)


def transfer_keypoints_3d(src_features, cand_features, cand_points) -> tuple[np.ndarray, np.ndarray]:
    """Returns (predicted points, candidate indices)."""
    cand_points = np.asarray(cand_points, dtype=np.float64).reshape(-1, 3)
    if len(cand_points) == 0:
        raise EmptyCandidates("candidate set is empty")
    idx = cosine_argmax(src_features, cand_features)
    return cand_points[idx], idx


def transfer_labels_3d(src_features, src_labels, tgt_features) -> np.ndarray:
    src_labels = np.asarray(src_labels)
    if len(src_labels) == 0:
        raise EmptyCandidates("source point set is empty")
    return src_labels[cosine_argmax(tgt_features, src_features)]


# -- metrics ----------------------------------------------------------------

def corr_acc(pred, gt, thresholds: Sequence[float]) -> list[float]:
    """Fraction of predictions within each distance threshold (inclusive)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if len(pred) == 0:
        return [float("nan")] * len(thresholds)
    dist = np.linalg.norm(pred - gt, axis=-1)
    return [float(np.mean(dist <= t)) for t in thresholds]


def miou(pred, gt, classes: Optional[Sequence[int]] = None) -> float:
    """Mean IoU over part classes; background (-1) is not a class.

    Classes absent from both prediction and ground truth are skipped.
    """
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if classes is None:
        classes = np.union1d(pred[pred != BACKGROUND], gt[gt != BACKGROUND])
    ious = []
    for c in classes:
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        if union:
            ious.append(np.count_nonzero(p & g) / union)
    return float(np.mean(ious)) if ious else float("nan")


@dataclass
class TransferMetrics:
    task: str
    category: str
    thresholds: list
    corr_acc: list
    miou: Optional[float]
    n_pairs: int
    seed: int
    per_pair: list = field(default_factory=list)

    def to_json(self) -> str:
        d = {"task": self.task, "category": self.category, "thresholds": list(self.thresholds),
             "corr_acc": [_r(v) for v in self.corr_acc], "miou": _r(self.miou),
             "n_pairs": self.n_pairs, "seed": self.seed}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())


def _r(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return None
    return round(float(v), 6)


# -- rendering helpers -------------------------------------------------------

def render_features(net, cond: Conditioning, camera: Camera, n_samples: int = 64,
                    near: float = 0.5, far: float = 3.5):
    """Rendered image plus its FeatureImage."""
    r = render_image(net, cond, camera, n_samples, near, far)
    return r, FeatureImage.from_render(r)


def visible_keypoints(camera: Camera, points: np.ndarray, depth_map: np.ndarray,
                      tol: float = 0.03) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates and visibility of 3D points given a ray-distance depth map."""
    uv, z = project_points(camera, points)
    H, W = depth_map.shape
    inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < W) & (uv[:, 1] >= 0) & (uv[:, 1] < H)
    vis = np.zeros(len(points), dtype=bool)
    ix = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, W - 1)
    iy = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, H - 1)
    dist = np.linalg.norm(points - camera.center, axis=1)
    vis[inside] = np.abs(depth_map[iy[inside], ix[inside]] - dist[inside]) < tol
    return uv, vis


# -- texture swap -----------------------------------------------------------

@dataclass
class SwapResult:
    rgb: np.ndarray  # (H, W, 3) edited render
    original: np.ndarray  # (H, W, 3) unedited render
    swapped_samples: int


def texture_swap(net: FieldNetwork, src_cond: Conditioning, tgt_cond: Conditioning,
                 src_points, src_labels, part_id: int, camera: Camera,
                 tgt_labels=None, n_samples: int = 64, near: float = 0.5, far: float = 3.5,
                 weight_eps: float = 1e-4, chunk: int = 4096) -> SwapResult:
    """Render the target with one part's colors taken from the source.

    Each target quadrature sample gets a part label from its cosine-nearest
    source point; samples labeled ``part_id`` take the color of the source
    point of that part nearest in internal-feature L2 distance, evaluated
    with the sample's view direction. Samples whose compositing weight is
    below ``weight_eps`` cannot change the image and are left untouched.
    """
    src_points = np.asarray(src_points, dtype=np.float64).reshape(-1, 3)
    src_labels = np.asarray(src_labels)
    if not np.any(src_labels == part_id):
        raise PartAbsent(f"part {part_id} is absent from the source")
    if tgt_labels is not None and not np.any(np.asarray(tgt_labels) == part_id):
        raise PartAbsent(f"part {part_id} is absent from the target")
    src_feat = query_3d_features(net, src_cond, src_points)
    part_mask = src_labels == part_id
    part_pts, part_feat = src_points[part_mask], src_feat[part_mask]

    H, W = camera.height, camera.width
    dirs_all = pixel_directions(camera, pixel_centers(W, H).reshape(-1, 2))
    rgb_new, rgb_old = [], []
    swapped_total = 0
    for s in range(0, len(dirs_all), chunk):
        dirs = dirs_all[s:s + chunk]
        R = len(dirs)
        t, deltas = sample_depths_batch(np.full(R, near), np.full(R, far), n_samples)
        pts = (camera.center + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
        d = np.repeat(dirs, n_samples, axis=0)
        feats = condition_features(net, tgt_cond, pts)
        out = net.forward(feats, pts, d)
        sigma = out.sigma.data.reshape(R, n_samples)
        color = out.color.data.reshape(R, n_samples, 3)
        base = composite(t, deltas, sigma, color, color[..., :1])
        w = base.weights.data.reshape(-1)
        active = np.flatnonzero(w > weight_eps)
        new_color = color.reshape(-1, 3).copy()
        if len(active):
            internal = out.internal.data[active]
            lab = transfer_labels_3d(src_feat, src_labels, internal)
            hit = active[lab == part_id]
            if len(hit):
                nn = l2_argmin(out.internal.data[hit], part_feat)
                xs = part_pts[nn]
                sf = condition_features(net, src_cond, xs)
                new_color[hit] = net.forward(sf, xs, d[hit]).color.data
                swapped_total += len(hit)
        edited = composite(t, deltas, sigma, new_color.reshape(R, n_samples, 3), color[..., :1])
        rgb_new.append(edited.with_background(1.0).data)
        rgb_old.append(base.with_background(1.0).data)
    return SwapResult(np.concatenate(rgb_new).reshape(H, W, 3),
                      np.concatenate(rgb_old).reshape(H, W, 3), swapped_total)


# -- evaluation -------------------------------------------------------------

@dataclass
class EvalConfig:
    task: str = "seg3d"
    n_pairs: int = 100
    seed: int = 0
    split: str = "test"
    internal: bool = True  # match internal features (3D); False -> head features
    n_samples: int = 64
    near: float = 0.5
    far: float = 3.5
    n_points: int = 2048  # labeled source/target points for seg3d

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")


def sample_pairs(instance_ids: Sequence[str], n_views: int, n_pairs: int,
                 rng: np.random.Generator, same_instance: bool = False) -> list:
    """(src_id, src_view, tgt_id, tgt_view, tgt_render_view) tuples.

    Cross-instance pairs use distinct instances; the last field is a second,
    different target pose used by the novel-view setting.
    """
    ids = list(instance_ids)
    if len(ids) < (1 if same_instance else 2):
        raise ValueError("not enough instances to form pairs")
    pairs = []
    for _ in range(n_pairs):
        a = int(rng.integers(len(ids)))
        b = a
        if not same_instance:
            b = int(rng.integers(len(ids) - 1))
            b += b >= a
        va = int(rng.integers(n_views))
        vb = int(rng.integers(n_views))
        vc = (vb + 1 + int(rng.integers(n_views - 1))) % n_views if n_views > 1 else vb
        pairs.append((ids[a], va, ids[b], vb, vc))
    return pairs


def _cond_single(net, inst, view: int) -> Conditioning:
    return condition(net, [inst.images[view][None]], [[inst.cameras[view]]])


def evaluate(dataset, net: FieldNetwork, cfg: EvalConfig) -> TransferMetrics:
    """Correspondence accuracy / mIoU over randomly sampled instance pairs of a split.

    Pairs are resampled (bounded attempts) until source and target share at
    least one visible keypoint (keypoint tasks) or one part label.
    """
    rng = np.random.default_rng(cfg.seed)
    ids = [inst.instance_id for inst in dataset.instances]
    n_views = min(inst.n_views for inst in dataset.instances)
    is_2d = cfg.task in ("kp2d", "seg2d", "nvseg")
    thresholds = THRESHOLDS_2D if cfg.task == "kp2d" else THRESHOLDS_3D
    hits, totals, mious, per_pair = np.zeros(len(thresholds)), 0, [], []
    kept = 0
    attempts = 0
    while kept < cfg.n_pairs and attempts < 20 * cfg.n_pairs:
        attempts += 1
        (src_id, va, tgt_id, vb, vc), = sample_pairs(ids, n_views, 1, rng)
        src, tgt = dataset.by_id(src_id), dataset.by_id(tgt_id)
        res = _eval_pair(net, cfg, src, va, tgt, vb, vc, rng, thresholds)
        if res is None:
            continue
        kept += 1
        per_pair.append({"src": src_id, "src_view": va, "tgt": tgt_id, "tgt_view": vb, **res})
        if "hits" in res:
            hits += np.array(res["hits"])
            totals += res["n"]
        if "miou" in res:
            mious.append(res["miou"])
    acc = [float(v) for v in hits / totals] if totals else [float("nan")] * len(thresholds)
    return TransferMetrics(cfg.task, dataset.manifest.get("category", ""), list(thresholds),
                           acc if cfg.task in ("kp2d", "kp3d") else [],
                           float(np.mean(mious)) if mious else None, kept, cfg.seed, per_pair)


def _eval_pair(net, cfg: EvalConfig, src, va, tgt, vb, vc, rng, thresholds):
    if cfg.task == "kp2d":
        d_src, d_tgt = src.depth(va), tgt.depth(vb)
        ids_s, xyz_s = src.keypoints()
        ids_t, xyz_t = tgt.keypoints()
        uv_s, vis_s = visible_keypoints(src.cameras[va], xyz_s, d_src)
        uv_t, vis_t = visible_keypoints(tgt.cameras[vb], xyz_t, d_tgt)
        common = [k for k in ids_s[vis_s] if k in set(ids_t[vis_t].tolist())]
        if not common:
            return None
        _, F_src = render_features(net, _cond_single(net, src, va), src.cameras[va], cfg.n_samples, cfg.near, cfg.far)
        _, F_tgt = render_features(net, _cond_single(net, tgt, vb), tgt.cameras[vb], cfg.n_samples, cfg.near, cfg.far)
        si = [int(np.flatnonzero(ids_s == k)[0]) for k in common]
        ti = [int(np.flatnonzero(ids_t == k)[0]) for k in common]
        if not F_tgt.mask.any():
            # nothing rendered on the target: every keypoint misses
            return {"hits": [0] * len(thresholds), "n": len(common)}
        kp_src = np.floor(uv_s[si]).astype(np.int64)
        pred = transfer_keypoints_2d(F_src, F_tgt, kp_src) + 0.5
        acc = np.array(corr_acc(pred, uv_t[ti], thresholds))
        return {"hits": (acc * len(common)).round().tolist(), "n": len(common)}
    if cfg.task in ("seg2d", "nvseg"):
        src_parts, tgt_parts = src.part_map(va), tgt.part_map(vc if cfg.task == "nvseg" else vb)
        shared = np.intersect1d(src_parts[src_parts >= 0], tgt_parts[tgt_parts >= 0])
        if len(shared) == 0:
            return None
        _, F_src = render_features(net, _cond_single(net, src, va), src.cameras[va], cfg.n_samples, cfg.near, cfg.far)
        tcam = tgt.cameras[vc] if cfg.task == "nvseg" else tgt.cameras[vb]
        _, F_tgt = render_features(net, _cond_single(net, tgt, vb), tcam, cfg.n_samples, cfg.near, cfg.far)
        if not F_src.mask.any():
            return {"miou": miou(np.full(tgt_parts.shape, BACKGROUND), tgt_parts)}
        pred = transfer_labels_2d(F_src, F_tgt, np.where(F_src.mask, src_parts, BACKGROUND))
        return {"miou": miou(pred, tgt_parts)}
    if cfg.task == "kp3d":
        ids_s, xyz_s = src.keypoints()
        ids_t, xyz_t = tgt.keypoints()
        common = np.intersect1d(ids_s, ids_t)
        if len(common) == 0:
            return None
        si = [int(np.flatnonzero(ids_s == k)[0]) for k in common]
        ti = [int(np.flatnonzero(ids_t == k)[0]) for k in common]
        cand, _ = tgt.surface_points()
        f_src = query_3d_features(net, _cond_single(net, src, va), xyz_s[si], cfg.internal)
        f_cand = query_3d_features(net, _cond_single(net, tgt, vb), cand, cfg.internal)
        pred, _ = transfer_keypoints_3d(f_src, f_cand, cand)
        acc = np.array(corr_acc(pred, xyz_t[ti], thresholds))
        return {"hits": (acc * len(common)).round().tolist(), "n": len(common)}
    # seg3d
    sp, sl = src.surface_points()
    tp, tl = tgt.surface_points()
    if len(np.intersect1d(sl, tl)) == 0:
        return None
    sp, sl = sp[: cfg.n_points], sl[: cfg.n_points]
    tp, tl = tp[: cfg.n_points], tl[: cfg.n_points]
    f_src = query_3d_features(net, _cond_single(net, src, va), sp, cfg.internal)
    f_tgt = query_3d_features(net, _cond_single(net, tgt, vb), tp, cfg.internal)
    pred = transfer_labels_3d(f_src, sl, f_tgt)
    return {"miou": miou(pred, tl)}
