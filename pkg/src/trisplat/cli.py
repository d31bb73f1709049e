"""Command-line interface: train, render, eval, export and bench.

Configuration precedence is flags over config-file values over built-in
defaults.  A manifest.json snapshot is written before training starts.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import TrainConfig, apply_option, load_config, preset
from .geometry import CameraIntrinsics, CameraPose, WindowMode
from .render import render
from .scene_io import (compute_metrics, export_mesh, init_triangles,
                       load_model, load_scene, load_train_views, save_model,
                       save_render)
from .soup import TriangleSoup
from .training import anneal_for_export, train
from .synthetic import look_at


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10,
                             cwd=Path(__file__).parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return "unknown"


def _config_snapshot(cfg: TrainConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {k: convert(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, WindowMode):
            return obj.value
        if isinstance(obj, (tuple, list)):
            return [convert(v) for v in obj]
        return obj
    out = {}
    for f in dataclasses.fields(cfg):
        out[f.name] = convert(getattr(cfg, f.name))
    return out


def _build_config(args) -> TrainConfig:
    cfg = preset("indoor" if args.indoor else "outdoor")
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.window:
        cfg.window = WindowMode(args.window)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got '{item}'")
        key, _, raw = item.partition("=")
        apply_option(cfg, key.strip(), raw.strip())
    return cfg


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _build_config(args)
    scene = load_scene(args.scene_dir)

    metrics_path = out_dir / "metrics.csv"
    model_path = out_dir / "model.npz"
    solid_path = out_dir / "model_solid.npz"
    manifest = {
        "config": _config_snapshot(cfg),
        "seed": cfg.seed,
        "git_describe": _git_describe(),
        "version": __version__,
        "metrics_path": str(metrics_path),
        "model_path": str(model_path),
        "solid_model_path": str(solid_path) if args.anneal else None,
        "scene_dir": str(args.scene_dir),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)

    rng = np.random.default_rng(cfg.seed)
    triangles = init_triangles(scene, cfg.init, rng)
    soup = TriangleSoup.from_triangles(triangles)
    views = load_train_views(scene, "train")
    print(f"training {len(soup)} triangles on {len(views)} views "
          f"for {cfg.iterations} iterations ({cfg.window.value} window)")

    def progress(row):
        if row["iteration"] % 100 == 0 or row["iteration"] == cfg.iterations:
            print(f"  iter {row['iteration']:6d}  n={row['n_triangles']:6d}  "
                  f"loss={row['loss']:.4f}  psnr={row['psnr']:.2f}")

    soup, _, _ = train(soup, views, cfg, metrics_path=metrics_path,
                       progress=progress)
    save_model(model_path, soup, scene)
    print(f"saved {model_path} ({len(soup)} triangles)")

    if args.anneal:
        print(f"annealing for {cfg.anneal_start} iterations")
        solid, _ = anneal_for_export(soup, views, cfg)
        save_model(solid_path, solid, scene)
        print(f"saved {solid_path} ({len(solid)} triangles, solid)")
    return 0


def _parse_pose(spec: str, views):
    """A saved view name, or a text file with 12 numbers (3x3 R then t)."""
    if views:
        for name, intr, pose, _split in views:
            if name == spec:
                return intr, pose
    path = Path(spec)
    if not path.exists():
        known = ", ".join(v[0] for v in views or []) or "none"
        raise ValueError(f"pose '{spec}' is neither a saved view (known: "
                         f"{known}) nor a matrix file")
    vals = [float(x) for x in path.read_text().split()]
    if len(vals) != 12:
        raise ValueError(f"{path}: expected 12 numbers (row-major 3x3 "
                         f"rotation then translation), got {len(vals)}")
    pose = CameraPose(rotation=np.array(vals[:9]).reshape(3, 3),
                      translation=np.array(vals[9:12]))
    if not views:
        raise ValueError("model has no saved cameras; cannot infer intrinsics")
    return views[0][1], pose


def cmd_render(args) -> int:
    soup, views = load_model(args.model)
    intr, pose = _parse_pose(args.pose, views)
    out = render(soup, intr, pose)
    save_render(out.image, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    soup, _ = load_model(args.model)
    scene = load_scene(args.scene_dir)
    held_out = load_train_views(scene, "test")
    if not held_out:
        print("error: scene has no held-out views", file=sys.stderr)
        return 1
    rows = []
    for view in held_out:
        out = render(soup, view.intr, view.pose)
        psnr, ssim_val = compute_metrics(out.image.rgb, view.image)
        rows.append((view.name, psnr, ssim_val))
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("view,psnr,ssim\n")
        for name, psnr, ssim_val in rows:
            f.write(f"{name},{psnr:.4f},{ssim_val:.6f}\n")
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    print(f"{len(rows)} held-out views: mean PSNR {mean_psnr:.2f} dB, "
          f"mean SSIM {mean_ssim:.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_export(args) -> int:
    soup, _ = load_model(args.model)
    if not soup.solid:
        print("error: model is not annealed; train with --anneal and export "
              "the solid model", file=sys.stderr)
        return 1
    export_mesh(soup, args.out, args.format)
    print(f"wrote {args.out} ({len(soup)} faces)")
    return 0


def cmd_bench(args) -> int:
    soup, views = load_model(args.model)
    try:
        w, h = (int(p) for p in args.resolution.lower().split("x"))
    except ValueError:
        print(f"error: --resolution expects WxH, got '{args.resolution}'",
              file=sys.stderr)
        return 2
    size = max(w, h)
    intr = CameraIntrinsics(fx=1.1 * size, fy=1.1 * size, cx=w / 2.0,
                            cy=h / 2.0, width=w, height=h)
    center = soup.vertices.reshape(-1, 3).mean(axis=0) if len(soup) else np.zeros(3)
    radius = 2.5 * max(1e-3, np.linalg.norm(
        soup.vertices.reshape(-1, 3) - center, axis=1).max() if len(soup) else 1.0)
    poses = []
    for i in range(args.frames):
        angle = 2.0 * np.pi * i / max(args.frames, 1)
        eye = center + radius * np.array([np.cos(angle), -0.3, np.sin(angle)])
        poses.append(look_at(eye, center))
    render(soup, intr, poses[0])  # warm-up excludes JIT compilation
    t0 = time.perf_counter()
    for pose in poses:
        render(soup, intr, pose)
    elapsed = time.perf_counter() - t0
    fps = args.frames / elapsed if elapsed > 0 else float("inf")
    print(f"{args.frames} frames at {w}x{h}, {len(soup)} triangles: "
          f"{elapsed * 1000 / args.frames:.1f} ms/frame ({fps:.1f} FPS)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trisplat",
        description="Differentiable triangle splatting: optimize a triangle "
                    "soup from posed images and export it as a mesh.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a soup against a scene")
    p.add_argument("scene_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value config file")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--indoor", action="store_true")
    group.add_argument("--outdoor", action="store_true")
    p.add_argument("--window", choices=["normalized", "sigmoid"])
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--anneal", action="store_true",
                   help="also produce a solid model for mesh export")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one view of a trained model")
    p.add_argument("model")
    p.add_argument("--pose", required=True,
                   help="saved view name or matrix file (9 R + 3 t numbers)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM on held-out views")
    p.add_argument("model")
    p.add_argument("scene_dir")
    p.add_argument("--out", required=True, help="per-view CSV output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write the solid soup as a mesh")
    p.add_argument("model")
    p.add_argument("--format", choices=["ply", "obj"], default="ply")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("bench", help="forward-only frame rate report")
    p.add_argument("model")
    p.add_argument("--resolution", default="256x256", metavar="WxH")
    p.add_argument("--frames", type=int, default=10)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
