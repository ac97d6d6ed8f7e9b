"""Command-line entry point: dataset generation, training, rendering, transfer and evaluation.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

import featfield
from featfield.errors import ConfigError, FormatError, NonFiniteLoss

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
log = logging.getLogger("featfield")


class UsageError(Exception):
    """Bad command-line input that argparse cannot catch."""


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: Optional[int]
    version: str
    wall_time_s: float
    outputs: list = field(default_factory=list)
    started: str = ""

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "run_manifest.json"
        payload = {"command": self.command, "config_hash": self.config_hash, "seed": self.seed,
                   "version": self.version, "wall_time_s": round(self.wall_time_s, 3),
                   "outputs": sorted(self.outputs), "started": self.started}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path


def version_string() -> str:
    """git-describe output when run from a checkout, otherwise the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{featfield.__version__}"


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


# -- helpers ----------------------------------------------------------------

def _load_net(ckpt):
    from featfield.training import load_trained

    net, tc = load_trained(ckpt)
    return net, tc


def _instance(data, instance_id, with_teacher=False):
    from featfield.training import find_instance, load_instance

    try:
        path = find_instance(data, instance_id)
    except KeyError:
        raise UsageError(f"instance {instance_id!r} not found in {data}") from None
    return load_instance(path, with_teacher=with_teacher)


def _camera_arg(inst, pose: str):
    from featfield.geometry import Camera

    if pose.isdigit():
        v = int(pose)
        if v >= inst.n_views:
            raise UsageError(f"view {v} out of range (instance has {inst.n_views} views)")
        return inst.cameras[v]
    return Camera.from_dict(json.loads(Path(pose).read_text())["camera"])


def _render_params(tc):
    if tc is None:
        return 64, 0.5, 3.5
    return tc.n_samples, tc.near, tc.far


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    from featfield.synthscene import TEMPLATES, generate_dataset, manifest_hash, split_sizes

    if args.category not in TEMPLATES:
        raise UsageError(f"unknown category {args.category!r}; templates: {', '.join(sorted(TEMPLATES))}")
    if args.instances < 5:
        raise UsageError("--instances must be at least 5")
    if args.views < 2:
        raise UsageError("--views must be at least 2")
    generate_dataset(args.category, args.instances, args.views, args.out, args.seed, args.size)
    tr, va, te = split_sizes(args.instances)
    print(f"train={tr} val={va} test={te}")
    print(f"dataset hash {manifest_hash(args.out)}")
    return {"outputs": [str(Path(args.out) / "manifest.json")], "seed": args.seed,
            "config": vars(args)}


def cmd_train(args) -> dict:
    from featfield.training import TrainConfig, load_dataset, train

    if args.dump_config:
        print(json.dumps(TrainConfig().to_dict(), indent=2, sort_keys=True))
        return {"no_manifest": True}
    if not args.data or not args.out:
        raise UsageError("train needs --data and --out (or --dump-config)")
    cfg_d = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.steps is not None:
        cfg_d["steps"] = args.steps
    cfg = TrainConfig.from_dict(cfg_d)
    ds = load_dataset(args.data, "train")
    cfg.field.d_teacher = ds.d_teacher
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    res = train(ds, cfg, args.out)
    last = res.losses[-1]
    print(f"trained {cfg.steps} steps; final total loss {last['total']:.5f}; checkpoint {res.checkpoint}")
    return {"outputs": [str(res.checkpoint), str(Path(args.out) / "train_log.csv"),
                        str(Path(args.out) / "config.json")],
            "seed": cfg.seed, "config": cfg.to_dict()}


def cmd_render(args) -> dict:
    from featfield.rendering import condition, render_image, save_png
    from featfield.teacher import TeacherFeatureMap, write_teacher_map

    net, tc = _load_net(args.ckpt)
    inst = _instance(args.data, args.instance)
    cam = _camera_arg(inst, args.view_pose)
    cv = args.cond_view
    cond = condition(net, [inst.images[cv][None]], [[inst.cameras[cv]]])
    n, near, far = _render_params(tc)
    r = render_image(net, cond, cam, n, near, far)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / "render.png", r.rgb)
    write_teacher_map(TeacherFeatureMap(r.feature), out / "features.ftfm")
    print(f"rendered {cam.width}x{cam.height} with {r.feature.shape[-1]} feature channels")
    return {"outputs": [str(out / "render.png"), str(out / "features.ftfm")], "config": vars(args)}


def _feature_image(net, tc, inst, cond_view, render_cam):
    from featfield.downstream import render_features
    from featfield.rendering import condition

    cond = condition(net, [inst.images[cond_view][None]], [[inst.cameras[cond_view]]])
    n, near, far = _render_params(tc)
    return render_features(net, cond, render_cam, n, near, far)[1]


def cmd_transfer(args) -> dict:
    from featfield import downstream as ds_
    from featfield.rendering import condition, save_png

    net, tc = _load_net(args.ckpt)
    src = _instance(args.data, args.src)
    tgt = _instance(args.data, args.tgt)
    sv, tv = args.src_view, args.tgt_view
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result: dict = {"task": args.command, "mode": args.mode, "src": args.src, "tgt": args.tgt}
    outputs = [str(out / "transfer.json")]
    if args.mode in ("2d", "novel-view"):
        F_src = _feature_image(net, tc, src, sv, src.cameras[sv])
        render_view = tv
        if args.mode == "novel-view":
            render_view = (tv + 1) % tgt.n_views if args.render_view is None else args.render_view
        F_tgt = _feature_image(net, tc, tgt, tv, tgt.cameras[render_view])
        result["tgt_render_view"] = render_view
        if args.command == "transfer-kp":
            ids, xyz = src.keypoints()
            uv, vis = ds_.visible_keypoints(src.cameras[sv], xyz, src.depth(sv))
            kp = np.floor(uv[vis]).astype(np.int64)
            pred = ds_.transfer_keypoints_2d(F_src, F_tgt, kp) if len(kp) else np.zeros((0, 2), int)
            result["keypoints"] = [{"id": int(i), "src_px": k.tolist(), "pred_px": p.tolist()}
                                   for i, k, p in zip(ids[vis], kp, pred)]
        else:
            labels = np.where(F_src.mask, src.part_map(sv), ds_.BACKGROUND)
            pred = ds_.transfer_labels_2d(F_src, F_tgt, labels)
            result["miou"] = ds_.miou(pred, tgt.part_map(render_view))
            np.save(out / "labels.npy", pred)
            save_png(out / "labels.png", _label_colors(pred))
            outputs += [str(out / "labels.npy"), str(out / "labels.png")]
    else:
        c_src = condition(net, [src.images[sv][None]], [[src.cameras[sv]]])
        c_tgt = condition(net, [tgt.images[tv][None]], [[tgt.cameras[tv]]])
        internal = tc.use_internal_features if tc else True
        if args.command == "transfer-kp":
            ids, xyz = src.keypoints()
            tids, txyz = tgt.keypoints()
            cand, _ = tgt.surface_points()
            f_s = ds_.query_3d_features(net, c_src, xyz, internal)
            f_c = ds_.query_3d_features(net, c_tgt, cand, internal)
            pred, _ = ds_.transfer_keypoints_3d(f_s, f_c, cand)
            result["keypoints"] = [{"id": int(i), "pred_xyz": p.tolist()} for i, p in zip(ids, pred)]
        else:
            sp, sl = src.surface_points()
            tp, tl = tgt.surface_points()
            pred = ds_.transfer_labels_3d(ds_.query_3d_features(net, c_src, sp, internal), sl,
                                          ds_.query_3d_features(net, c_tgt, tp, internal))
            result["miou"] = ds_.miou(pred, tl)
            np.savetxt(out / "labels.txt", np.column_stack([tp, pred]), fmt="%.6f %.6f %.6f %d")
            outputs.append(str(out / "labels.txt"))
    (out / "transfer.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    if "miou" in result:
        print(f"mIoU {result['miou']:.4f}")
    else:
        print(f"transferred {len(result['keypoints'])} keypoints")
    return {"outputs": outputs, "config": vars(args)}


_PALETTE = np.array([[0.9, 0.3, 0.2], [0.2, 0.6, 0.9], [0.3, 0.8, 0.3], [0.9, 0.8, 0.2],
                     [0.6, 0.3, 0.8], [0.2, 0.8, 0.8]])


def _label_colors(labels: np.ndarray) -> np.ndarray:
    img = np.ones(labels.shape + (3,))
    fg = labels >= 0
    img[fg] = _PALETTE[labels[fg] % len(_PALETTE)]
    return img


def cmd_swap(args) -> dict:
    from featfield import downstream as ds_
    from featfield.rendering import condition, save_png

    net, tc = _load_net(args.ckpt)
    src = _instance(args.data, args.src)
    tgt = _instance(args.data, args.tgt)
    sv, tv = args.src_view, args.tgt_view
    c_src = condition(net, [src.images[sv][None]], [[src.cameras[sv]]])
    c_tgt = condition(net, [tgt.images[tv][None]], [[tgt.cameras[tv]]])
    sp, sl = src.surface_points()
    tp, _ = tgt.surface_points()
    internal = True
    tgt_lab = ds_.transfer_labels_3d(ds_.query_3d_features(net, c_src, sp, internal), sl,
                                     ds_.query_3d_features(net, c_tgt, tp, internal))
    n, near, far = _render_params(tc)
    res = ds_.texture_swap(net, c_src, c_tgt, sp, sl, args.part, tgt.cameras[tv], tgt_labels=tgt_lab,
                           n_samples=n, near=near, far=far)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / "swapped.png", res.rgb)
    save_png(out / "original.png", res.original)
    print(f"recolored {res.swapped_samples} samples of part {args.part}")
    return {"outputs": [str(out / "swapped.png"), str(out / "original.png")], "config": vars(args)}


def cmd_eval(args) -> dict:
    from featfield.downstream import EvalConfig, TASKS, evaluate
    from featfield.training import load_dataset

    if args.task not in TASKS:
        raise UsageError(f"unknown task {args.task!r}; tasks: {', '.join(TASKS)}")
    net, tc = _load_net(args.ckpt)
    n, near, far = _render_params(tc)
    internal = tc.use_internal_features if tc else True
    if args.head_features:
        internal = False
    cfg = EvalConfig(task=args.task, n_pairs=args.pairs, seed=args.seed, split=args.split,
                     internal=internal, n_samples=n, near=near, far=far)
    ds = load_dataset(args.data, args.split, with_teacher=False)
    metrics = evaluate(ds, net, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"metrics_{args.task}.json"
    metrics.write(path)
    summary = f"mIoU {metrics.miou:.4f}" if metrics.miou is not None else \
        "corr_acc " + " ".join(f"{v:.3f}" for v in metrics.corr_acc)
    print(f"{args.task}: {metrics.n_pairs} pairs, {summary}")
    return {"outputs": [str(path)], "seed": args.seed, "config": vars(args)}


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="featfield", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS/numeric threads (default: all hardware threads)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a procedural multi-view dataset")
    g.add_argument("--category", required=True)
    g.add_argument("--instances", type=int, default=24)
    g.add_argument("--views", type=int, default=24)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a feature field")
    t.add_argument("--data")
    t.add_argument("--config", help="JSON file with TrainConfig overrides")
    t.add_argument("--out")
    t.add_argument("--steps", type=int, help="override the configured step count")
    t.add_argument("--dump-config", action="store_true", help="print the full default config and exit")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render RGB and features of an instance")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--instance", required=True)
    r.add_argument("--view-pose", required=True, help="view index or a view_*.meta.json file")
    r.add_argument("--cond-view", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    for name in ("transfer-kp", "coseg"):
        x = sub.add_parser(name, help="keypoint transfer" if name == "transfer-kp" else "part co-segmentation")
        x.add_argument("--ckpt", required=True)
        x.add_argument("--data", required=True)
        x.add_argument("--src", required=True)
        x.add_argument("--tgt", required=True)
        x.add_argument("--mode", choices=("2d", "3d", "novel-view"), default="2d")
        x.add_argument("--src-view", type=int, default=0)
        x.add_argument("--tgt-view", type=int, default=0)
        x.add_argument("--render-view", type=int, default=None, help="target pose for novel-view mode")
        x.add_argument("--out", required=True)
        x.set_defaults(func=cmd_transfer)

    s = sub.add_parser("swap-texture", help="copy one part's appearance from source to target")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--src", required=True)
    s.add_argument("--tgt", required=True)
    s.add_argument("--part", type=int, required=True)
    s.add_argument("--src-view", type=int, default=0)
    s.add_argument("--tgt-view", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_swap)

    e = sub.add_parser("eval", help="evaluate transfer metrics over random pairs")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--task", required=True)
    e.add_argument("--pairs", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--split", default="test")
    e.add_argument("--head-features", action="store_true", help="match head features instead of internal ones")
    e.add_argument("--out", default="eval_out")
    e.set_defaults(func=cmd_eval)
    return p


def _out_dir(args) -> Optional[Path]:
    out = getattr(args, "out", None)
    return Path(out) if out else None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or os.cpu_count() or 1
    from threadpoolctl import threadpool_limits

    start = time.time()
    try:
        with threadpool_limits(limits=threads):
            info = args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not info.get("no_manifest"):
        out = _out_dir(args)
        if out is not None:
            cfg = {k: v for k, v in info.get("config", {}).items() if k != "func"}
            RunManifest(args.command, config_hash(cfg), info.get("seed"), version_string(),
                        time.time() - start, info.get("outputs", []),
                        time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(start))).write(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
