"""Command-line interface: synth, render, train, split-step, experiment."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .adc import DensifyStats, accumulate_stats, adpsplit_step
from .images import write_image, write_index_png
from .raster import render, render_backward
from .scene import (
    AdpSplitConfig,
    InvariantError,
    SceneFormatError,
    load_cameras,
    load_scene,
    save_cameras,
    save_scene,
)


def _load_config(path) -> AdpSplitConfig:
    if path is None:
        return harness.desk_config()
    overrides = json.loads(Path(path).read_text())
    return harness.desk_config().with_overrides(overrides)


def _echo_run_config(out_dir: Path, args, cfg: AdpSplitConfig) -> None:
    """Write the effective run configuration so runs are replayable."""
    payload = {
        "argv": [a for a in sys.argv[1:]],
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "config": vars(cfg).copy(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(payload, indent=2) + "\n")


def _load_gt_images(gt_dir) -> list:
    paths = sorted(Path(gt_dir).glob("gt_*.npy"))
    if not paths:
        raise FileNotFoundError(f"no gt_*.npy images under {gt_dir}")
    return [np.load(p) for p in paths]


def cmd_synth(args):
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene, cameras, gt_images = harness.synth_scene(
        args.seed, args.k, args.cams, args.size
    )
    save_scene(scene, out / "gt_scene.txt")
    save_cameras(cameras, out / "cameras.txt")
    for i, img in enumerate(gt_images):
        np.save(out / f"gt_{i:03d}.npy", img)
        write_image(out / f"gt_{i:03d}.png", img)
    init = harness.init_from_gt(scene, args.seed)
    save_scene(init, out / "init_scene.txt")
    _echo_run_config(out, args, cfg)
    print(f"wrote {len(scene.gaussians)}-Gaussian scene, {len(cameras)} cameras "
          f"to {out}")
    return 0


def cmd_render(args):
    cfg = _load_config(args.config)
    scene = load_scene(args.scene)
    cameras = load_cameras(args.cameras)
    if not (0 <= args.view < len(cameras)):
        raise IndexError(f"view {args.view} out of range (have {len(cameras)})")
    out = render(scene, cameras[args.view], args.background)
    write_image(args.out, out.image)
    print(f"rendered view {args.view} -> {args.out}")
    return 0


def cmd_split_step(args):
    cfg = _load_config(args.config)
    scene = load_scene(args.scene)
    cameras = load_cameras(args.cameras)
    gt_images = _load_gt_images(args.gt)
    if len(gt_images) != len(cameras):
        raise ValueError(
            f"{len(gt_images)} gt images vs {len(cameras)} cameras"
        )
    cfg = cfg.with_overrides({"v_views": min(cfg.v_views, len(cameras))})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    # gradient statistics from one pass over all views
    stats = DensifyStats.zeros(len(scene.gaussians))
    bg = np.zeros(3)
    for cam, gt in zip(cameras, gt_images):
        img = render(scene, cam, bg).image
        dL_dI = np.sign(img - gt) / img.size
        accumulate_stats(stats, render_backward(scene, cam, bg, dL_dI))

    if args.dump_maps:
        from .error_partition import compute_maps

        for v, (cam, gt) in enumerate(zip(cameras, gt_images)):
            out = render(scene, cam, bg)
            maps = compute_maps(out.image, gt, cfg)
            write_image(out_dir / f"error_{v:03d}.png", np.repeat(
                maps.e[:, :, None], 3, axis=2))
            write_image(out_dir / f"metric_{v:03d}.png", np.repeat(
                maps.m.astype(float)[:, :, None], 3, axis=2))
            write_index_png(out_dir / f"band_{v:03d}.png", maps.b)
            write_index_png(out_dir / f"dominant_{v:03d}.png", out.dominant_map)

    rng = np.random.default_rng((args.seed, 0))
    scene, report = adpsplit_step(scene, cameras, gt_images, stats, cfg, rng)
    save_scene(scene, out_dir / "scene_after.txt")

    if args.dump_children:
        from .scene import Scene as SceneT

        new = [g for g, old in zip(scene.gaussians, report.index_map) if old < 0]
        if new:
            save_scene(SceneT(gaussians=new, extent=scene.extent),
                       out_dir / "children.txt")

    report_json = {
        "count_before": report.count_before,
        "count_after": report.count_after,
        "sampled_views": report.sampled_views,
        "clones": report.clones,
        "reset_indices": report.reset_indices,
        "merge_edges": report.merge_edges,
        "candidates": [
            {
                "index": c.index,
                "regions_per_view": c.regions_per_view,
                "proposals": c.proposals,
                "merged": c.merged,
                "children_inserted": c.children_inserted,
                "fallback": c.fallback,
                "reset": c.reset,
            }
            for c in report.candidates
        ],
    }
    (out_dir / "split_report.json").write_text(
        json.dumps(report_json, indent=2) + "\n"
    )
    _echo_run_config(out_dir, args, cfg)
    print(f"split step: {report.count_before} -> {report.count_after} Gaussians")
    return 0


def _cfg_overrides(path) -> dict:
    return {} if path is None else json.loads(Path(path).read_text())


def cmd_train(args):
    cfg = _load_config(args.config)
    data = Path(args.data)
    gt_scene = load_scene(data / "gt_scene.txt")
    cameras = load_cameras(data / "cameras.txt")
    gt_images = _load_gt_images(data)
    init_path = data / "init_scene.txt"
    init = load_scene(init_path) if init_path.exists() else gt_scene
    sched = harness.Schedule(
        total_iters=args.iters,
        densify_from=args.densify_from,
        densify_until=args.densify_until,
        t_interval=cfg.t_interval,
        split_mode=args.mode,
        seed=args.seed,
    )
    train_ids, _ = harness.split_cameras(len(cameras))
    cfg = cfg.with_overrides({"v_views": min(cfg.v_views, len(train_ids))})
    scene, log = harness.train(init, cameras, gt_images, sched, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out_dir / "trained_scene.txt")
    log.write_csv(out_dir / "metrics.csv")
    log.write_densify_csv(out_dir / "densify.csv")
    _echo_run_config(out_dir, args, cfg)
    final = log.rows[-1]
    print(f"trained {args.iters} iters: PSNR {final['psnr']:.2f} dB, "
          f"{final['gaussians']} Gaussians")
    return 0


def _parse_seeds(spec: str) -> list:
    if ".." in spec:
        lo, hi = spec.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in spec.split(",")]


def cmd_experiment(args):
    cfg = _load_config(args.config)
    seeds = _parse_seeds(args.seeds)
    budget = harness.Schedule(
        total_iters=args.iters,
        densify_from=args.densify_from,
        densify_until=args.densify_until,
        t_interval=cfg.t_interval,
        seed=args.seed,
    )
    out_dir = Path(args.out)
    rows = harness.compare_experiment(
        seeds, args.k, budget, cfg, out_dir=out_dir,
        cam_count=args.cams, image_size=args.size,
    )
    _echo_run_config(out_dir, args, cfg)
    print(f"wrote {len(rows)} comparison rows to {out_dir / 'comparison.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="adpsplit",
        description="Error-driven adaptive Gaussian splitting toolkit",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON file overriding config fields")
        sp.add_argument("--out", required=True, help="output path or directory")

    sp = sub.add_parser("synth", help="generate a synthetic scene")
    sp.add_argument("--k", type=int, default=harness.DESK_K)
    sp.add_argument("--cams", type=int, default=harness.DESK_CAMERAS)
    sp.add_argument("--size", type=int, default=harness.DESK_IMAGE_SIZE)
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("render", help="render one view of a saved scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--view", type=int, default=0)
    sp.add_argument("--background", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    common(sp)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("split-step", help="run one densification step")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--gt", required=True, help="directory with gt_*.npy images")
    sp.add_argument("--dump-maps", action="store_true")
    sp.add_argument("--dump-children", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_split_step)

    sp = sub.add_parser("train", help="train a scene from a synth directory")
    sp.add_argument("--data", required=True, help="directory from `synth`")
    sp.add_argument("--mode", default="adpsplit",
                    choices=["vanilla-binary", "vanilla-n(5)", "adpsplit"])
    sp.add_argument("--iters", type=int, default=harness.DESK_ITERS)
    sp.add_argument("--densify-from", type=int, default=100)
    sp.add_argument("--densify-until", type=int,
                    default=harness.DESK_DENSIFY_UNTIL)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("experiment", help="run the split-mode comparison")
    sp.add_argument("--seeds", default="1..10", help="e.g. 1..10 or 1,2,3")
    sp.add_argument("--k", type=int, default=harness.DESK_K)
    sp.add_argument("--cams", type=int, default=harness.DESK_CAMERAS)
    sp.add_argument("--size", type=int, default=harness.DESK_IMAGE_SIZE)
    sp.add_argument("--iters", type=int, default=harness.DESK_ITERS)
    sp.add_argument("--densify-from", type=int, default=100)
    sp.add_argument("--densify-until", type=int,
                    default=harness.DESK_DENSIFY_UNTIL)
    common(sp)
    sp.set_defaults(func=cmd_experiment)
    return p


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (SceneFormatError, InvariantError, FileNotFoundError, ValueError,
            IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(cli())


if __name__ == "__main__":
    main()
