"""Command-line entry point exposing the full pipeline.

Every subcommand is a thin orchestration of one library operation; all
artifacts land under --out with deterministic names, and each run writes a
``resolved_config.txt`` snapshot (same key = value format the --config file
uses). Randomness flows from the single --seed, split per subsystem.

Exit codes: 0 success, 2 usage error, 3 missing input, 4 validation or
invariant failure, 5 optimization divergence, 6 file-format error, 1 other.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bev as bev_mod
from . import sceneio
from .core import Scene
from .gradients import BufferGrads, finite_diff_check
from .losses import LossConfig, NormalizedDepth
from .optim import DivergenceError, FitConfig, fit_scene, write_loss_curve
from .rasterizer import RenderConfig, render
from .synth import (SceneSpec, bev_protocol_spec, degrade_scene,
                    generate_scene, rig_cameras)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_INVALID = 4
EXIT_DIVERGED = 5
EXIT_FORMAT = 6

EXIT_CODE_HELP = (
    "exit codes: 0 success; 2 usage error; 3 missing input; "
    "4 validation/invariant failure; 5 optimization divergence; "
    "6 file-format error; 1 other errors"
)

log = logging.getLogger("splatbev")

# SceneSpec fields reachable from config files, with their casts.
_SPEC_CASTS = {
    "seed": int, "n_vehicles": int, "n_pedestrians": int, "n_lanes": int,
    "clutter": bool, "feature_dim": int, "image_height": int,
    "image_width": int, "n_cameras": int, "ground_halfwidth": float,
    "ground_spacing": float, "placement_radius": float, "n_clutter": int,
}
_SPEC_KEYS = tuple(_SPEC_CASTS)


def _parse_config_file(path: Path) -> dict[str, str]:
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def _resolve(args, key, default, cast=str):
    """Precedence: built-in default < config file < CLI flag."""
    value = default
    if args.config_values and key in args.config_values:
        raw = args.config_values[key]
        value = raw.lower() in ("1", "true", "yes") if cast is bool else cast(raw)
    flag = getattr(args, key, None)
    if flag is not None:
        value = flag
    return value


def _write_snapshot(out: Path, values: dict) -> None:
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _spec_from(args) -> SceneSpec:
    seed = _resolve(args, "seed", 7, int)
    spec = SceneSpec(seed=seed)
    updates = {}
    for key in _SPEC_KEYS[1:]:
        updates[key] = _resolve(args, key, getattr(spec, key), _SPEC_CASTS[key])
    if getattr(args, "resolution", None):
        w, h = args.resolution.lower().split("x")
        updates["image_width"], updates["image_height"] = int(w), int(h)
    return replace(spec, **updates)


def _render_config(args) -> RenderConfig:
    return RenderConfig(workers=_resolve(args, "workers", 1, int))


def _out_dir(args) -> Path:
    out = Path(_resolve(args, "out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _spec_snapshot(spec: SceneSpec, extra: dict) -> dict:
    values = {k: getattr(spec, k) for k in _SPEC_KEYS}
    values.update(extra)
    return values


def _save_bundle(out: Path, scene, bundle) -> None:
    sceneio.save_scene(scene, out / "scene.spb")
    sceneio.save_map(bundle.embeddings[:, :, None], out / "embeddings.spm")
    if bundle.images is not None:
        for i in range(bundle.images.shape[0]):
            sceneio.save_image(bundle.images[i], out / f"image_{i:02d}.ppm")
            sceneio.save_map(bundle.depths[i], out / f"depth_{i:02d}.spm")
            sceneio.save_map(bundle.depth_valid[i].astype(np.float64),
                             out / f"depth_valid_{i:02d}.spm")
            sceneio.save_map(bundle.features[i], out / f"features_{i:02d}.spm")
    m = bundle.bev
    sceneio.save_map(np.moveaxis(m.class_masks, 0, -1), out / "bev_class.spm")
    sceneio.save_map(m.centerness, out / "bev_center.spm")
    sceneio.save_map(m.offsets, out / "bev_offset.spm")
    sceneio.save_map(m.instance_mask.astype(np.float64), out / "bev_instance.spm")


def _load_views(data: Path, k: int):
    images, depths, valid, feats = [], [], [], []
    for i in range(k):
        depths.append(sceneio.load_map(data / f"depth_{i:02d}.spm")[:, :, 0])
        valid.append(sceneio.load_map(data / f"depth_valid_{i:02d}.spm")[:, :, 0] > 0.5)
        feats.append(sceneio.load_map(data / f"features_{i:02d}.spm"))
        ppm = (data / f"image_{i:02d}.ppm").read_bytes()
        header_end = ppm.index(b"255\n") + 4
        w_, h_ = ppm.split(b"\n")[1].split()
        img = np.frombuffer(ppm, dtype=np.uint8, offset=header_end)
        images.append(img.reshape(int(h_), int(w_), 3) / 255.0)
    return (np.stack(images), np.stack(depths), np.stack(valid), np.stack(feats))


# --------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    out = _out_dir(args)
    spec = _spec_from(args)
    scene, bundle = generate_scene(spec, views=not args.no_views)
    _save_bundle(out, scene, bundle)
    _write_snapshot(out, _spec_snapshot(spec, {"command": "gen",
                                               "views": not args.no_views}))
    print(f"gen: wrote {len(scene)} Gaussians and references to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    data = Path(args.data)
    if not (data / "scene.spb").exists():
        raise FileNotFoundError(f"no scene.spb under {data}")
    out = _out_dir(args)
    cfg = dict(_parse_config_file(data / "resolved_config.txt"))
    spec = SceneSpec(seed=int(cfg["seed"]),
                     image_height=int(cfg["image_height"]),
                     image_width=int(cfg["image_width"]),
                     n_cameras=int(cfg["n_cameras"]),
                     feature_dim=int(cfg["feature_dim"]))
    cameras = rig_cameras(spec)
    images, depths, valid, feats = _load_views(data, spec.n_cameras)
    init = sceneio.load_scene(data / "scene.spb")
    seed = _resolve(args, "seed", int(cfg["seed"]), int)
    perturb = args.perturb
    if perturb > 0:
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        init = init.copy()
        init.means += rng.normal(0, perturb, init.means.shape)
    iters = _resolve(args, "iters", 500, int)
    result = fit_scene(images, depths, valid, feats, cameras, init,
                       FitConfig(iterations=iters, render=_render_config(args)))
    sceneio.save_scene(result.scene, out / "fitted.spb")
    write_loss_curve(out / "loss_curve.csv", result.curve)
    _write_snapshot(out, {"command": "fit", "seed": seed, "iters": iters,
                          "perturb": perturb, "data": data})
    final = result.curve[-1]
    print(f"fit: {iters} iterations, final render loss {final[1]:.6f}, "
          f"total {final[5]:.6f} -> {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    scene = sceneio.load_scene(Path(args.scene))
    out = _out_dir(args)
    spec = _spec_from(args)
    cameras = rig_cameras(spec)
    cfg = _render_config(args)
    for i, cam in enumerate(cameras):
        result = render(scene, cam, cfg)
        sceneio.save_image(result.color, out / f"render_{i:02d}.ppm")
        sceneio.save_map(result.depth, out / f"render_depth_{i:02d}.spm")
        sceneio.save_map(result.alpha, out / f"render_alpha_{i:02d}.spm")
    _write_snapshot(out, _spec_snapshot(spec, {"command": "render",
                                               "scene": args.scene}))
    print(f"render: {len(cameras)} views -> {out}")
    return EXIT_OK


def cmd_bev(args) -> int:
    scene = sceneio.load_scene(Path(args.scene))
    out = _out_dir(args)
    height = _resolve(args, "bev_height", 3.0, float)
    config = bev_mod.BevConfig(height=height)
    result = bev_mod.render_bev_features(scene, config, _render_config(args))
    sceneio.save_map(result.feature, out / "bev_features.spm")
    sceneio.save_map(result.depth, out / "bev_depth.spm")
    sceneio.save_map(result.alpha, out / "bev_alpha.spm")
    sceneio.save_image(result.color, out / "bev_color.ppm")
    _write_snapshot(out, {"command": "bev", "scene": args.scene,
                          "bev_height": height})
    print(f"bev: {config.resolution}x{config.resolution} feature map -> {out}")
    return EXIT_OK


def _protocol_scenes(seed: int, count: int, clutter: bool, offset: int = 0):
    """Degraded ground-truth scenes plus BEV targets for staged training.

    The degradation stands in for imperfect feed-forward reconstruction; it
    is what gives joint fine-tuning genuine error to repair.
    """
    scenes = []
    for i in range(count):
        scene_seed = seed * 1000 + offset + i
        spec = bev_protocol_spec(seed=scene_seed, clutter=clutter)
        scene, bundle = generate_scene(spec, views=False)
        scenes.append((degrade_scene(scene, seed=scene_seed + 77), bundle.bev))
    return scenes


def cmd_train(args) -> int:
    out = _out_dir(args)
    seed = _resolve(args, "seed", 0, int)
    clutter = bool(args.clutter)
    height = _resolve(args, "bev_height", 3.0, float)
    iters = _resolve(args, "iters", 400, int)
    train_scenes = _protocol_scenes(seed, args.train_scenes, clutter)
    eval_scenes = _protocol_scenes(seed, args.eval_scenes, clutter, offset=500)
    bev_config = bev_mod.BevConfig(height=height)
    rcfg = _render_config(args)

    head = bev_mod.SegHead.create(train_scenes[0][0].feature_dim, seed=seed)
    head, history = bev_mod.train_stage2(
        train_scenes, head, bev_config,
        bev_mod.HeadTrainConfig(iterations=iters, render=rcfg))
    stage2 = bev_mod.evaluate_head(head, eval_scenes, bev_config, rcfg)

    rows = [("stage2", iters, name, f"{iou:.6f}", f"{history[-1]:.6f}")
            for name, iou in stage2.items()]
    joint_iters = args.joint_iters
    if joint_iters > 0:
        per_scene = []
        for i, (scene, targets) in enumerate(eval_scenes):
            tuned_scene, tuned_head, jhist = bev_mod.train_stage3_joint(
                scene, targets, head, bev_config,
                bev_mod.JointTrainConfig(iterations=joint_iters, render=rcfg))
            scores = bev_mod.evaluate_head(tuned_head, [(tuned_scene, targets)],
                                           bev_config, rcfg)
            per_scene.append(scores)
            rows += [("stage3", joint_iters, f"{name}[scene{i}]", f"{iou:.6f}",
                      f"{jhist[-1]:.6f}") for name, iou in scores.items()]
        mean3 = {k: float(np.mean([s[k] for s in per_scene]))
                 for k in per_scene[0]}
        rows += [("stage3-mean", joint_iters, name, f"{iou:.6f}", "")
                 for name, iou in mean3.items()]
    bev_mod.write_metrics_csv(out / "metrics.csv", rows)
    for key, arr in head.params.items():
        sceneio.save_map(arr.reshape(arr.shape[0], -1)[:, :, None]
                         if arr.ndim > 0 else arr, out / f"head_{key}.spm")
    _write_snapshot(out, {"command": "train", "seed": seed, "clutter": clutter,
                          "bev_height": height, "iters": iters,
                          "joint_iters": joint_iters,
                          "train_scenes": args.train_scenes,
                          "eval_scenes": args.eval_scenes})
    print("train: stage-2 IoU " + ", ".join(f"{k}={v:.3f}" for k, v in stage2.items())
          + f" -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args)
    pred = sceneio.load_map(Path(args.pred))
    gt = sceneio.load_map(Path(args.gt))
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    rows = []
    from .synth import CLASS_NAMES
    names = list(CLASS_NAMES)[:pred.shape[2]] + \
        [f"class{k}" for k in range(len(CLASS_NAMES), pred.shape[2])]
    for k in range(pred.shape[2]):
        value = bev_mod.iou(pred[:, :, k] > 0.0, gt[:, :, k] > 0.5)
        rows.append(("eval", 0, names[k], f"{value:.6f}", ""))
    bev_mod.write_metrics_csv(out / "report.csv", rows)
    _write_snapshot(out, {"command": "eval", "pred": args.pred, "gt": args.gt})
    print("eval: " + ", ".join(f"{r[2]}={r[3]}" for r in rows))
    return EXIT_OK


def cmd_sweep_height(args) -> int:
    out = _out_dir(args)
    seed = _resolve(args, "seed", 0, int)
    heights = [float(h) for h in args.heights.split(",")]
    train_scenes = _protocol_scenes(seed, args.train_scenes, args.clutter)
    eval_scenes = _protocol_scenes(seed, args.eval_scenes, args.clutter, offset=500)
    iters = _resolve(args, "iters", 400, int)
    rows_out = bev_mod.height_sweep(
        train_scenes, eval_scenes, heights,
        head_config=bev_mod.HeadTrainConfig(iterations=iters,
                                            render=_render_config(args)),
        head_seed=seed)
    rows = []
    for height, scores, mean_iou in rows_out:
        for name, value in scores.items():
            rows.append((f"height={height}", iters, name, f"{value:.6f}", ""))
        rows.append((f"height={height}", iters, "mean", f"{mean_iou:.6f}", ""))
    bev_mod.write_metrics_csv(out / "sweep.csv", rows)
    _write_snapshot(out, {"command": "sweep-height", "seed": seed,
                          "heights": args.heights, "clutter": args.clutter,
                          "iters": iters})
    for height, scores, mean_iou in rows_out:
        print(f"height {height:4.1f} m: mean IoU {mean_iou:.3f}")
    return EXIT_OK


def cmd_check_grads(args) -> int:
    from .core import Camera, Gaussian, PERSPECTIVE, ORTHOGONAL

    rng = np.random.default_rng(_resolve(args, "seed", 0, int))
    gaussians = []
    for _ in range(12):
        gaussians.append(Gaussian(
            mean=rng.normal(0, 0.8, 3) + [0, 0, 5],
            scale_log=rng.normal(-1.2, 0.3, 3),
            rotation=rng.normal(0, 1, 4),
            opacity_logit=rng.normal(0, 0.8),
            color_coeffs=rng.normal(0, 0.3, (1, 3)),
            feature=rng.normal(0, 1, 8),
        ))
    scene = Scene.from_gaussians(gaussians)

    def loss_fn(out):
        value = 0.5 * float(np.sum(out.color**2) + np.sum(out.feature**2)
                            + np.sum(out.depth**2) + np.sum(out.alpha**2))
        return value, BufferGrads(color=out.color.copy(), feature=out.feature.copy(),
                                  depth=out.depth.copy(), alpha=out.alpha.copy())

    worst = 0.0
    for camera in (Camera(mode=PERSPECTIVE, fx=50, fy=55, cx=24, cy=20,
                          width=48, height=40),
                   Camera(mode=ORTHOGONAL, fx=8, fy=9, cx=24, cy=20,
                          width=48, height=40)):
        report = finite_diff_check(scene, camera, loss_fn,
                                   rng=np.random.default_rng(1))
        print(f"{camera.mode}: max rel error {report.max_rel_error:.3e} "
              f"(cutoff probe {report.cutoff_probe_error:.3e}, reported separately)")
        worst = max(worst, report.max_rel_error)
    print(f"check-grads: max relative error {worst:.3e}")
    if worst > 1e-4:
        print("check-grads: FAILED (threshold 1e-4)")
        return EXIT_INVALID
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatbev",
        description="Gaussian-splatting scene fitting with orthographic "
                    "BEV projection and segmentation.",
        epilog=EXIT_CODE_HELP)
    parser.add_argument("--config", type=Path, help="key = value config file")
    parser.add_argument("--seed", type=int, help="root seed (default 7 for gen)")
    parser.add_argument("--out", type=str, help="output directory")
    parser.add_argument("--workers", type=int, help="render/backward worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene bundle")
    p.add_argument("--no-views", action="store_true",
                   help="skip perspective reference views (BEV targets only)")
    p.add_argument("--clutter", action="store_true", default=None)
    p.add_argument("--resolution", type=str, help="view resolution WxH")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit", help="fit a scene to a generated bundle")
    p.add_argument("--data", required=True, help="directory produced by gen")
    p.add_argument("--iters", type=int)
    p.add_argument("--perturb", type=float, default=0.2,
                   help="stddev of mean perturbation applied to the init (m)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render rig views of a scene file")
    p.add_argument("--scene", required=True)
    p.add_argument("--resolution", type=str)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bev", help="project a scene into the BEV feature map")
    p.add_argument("--scene", required=True)
    p.add_argument("--bev-height", dest="bev_height", type=float)
    p.set_defaults(func=cmd_bev)

    p = sub.add_parser("train", help="stage-2 head training plus stage-3 joint "
                                     "fine-tuning on held-out scenes")
    p.add_argument("--iters", type=int)
    p.add_argument("--joint-iters", type=int, default=80)
    p.add_argument("--train-scenes", type=int, default=3)
    p.add_argument("--eval-scenes", type=int, default=2)
    p.add_argument("--clutter", action="store_true")
    p.add_argument("--bev-height", dest="bev_height", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="IoU of predicted vs ground-truth class maps")
    p.add_argument("--pred", required=True, help="SPM map of class logits/masks")
    p.add_argument("--gt", required=True, help="SPM map of ground-truth masks")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-height", help="retrain and evaluate per BEV height")
    p.add_argument("--heights", default="0,3,5")
    p.add_argument("--train-scenes", type=int, default=3)
    p.add_argument("--eval-scenes", type=int, default=2)
    p.add_argument("--clutter", action="store_true")
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_sweep_height)

    p = sub.add_parser("check-grads", help="finite-difference audit of the "
                                           "analytic gradients")
    p.set_defaults(func=cmd_check_grads)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SPLATBEV_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.config_values = _parse_config_file(args.config) if args.config else {}
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except sceneio.SceneFileError as exc:
        print(f"error: bad file format: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except DivergenceError as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
