"""Command-line entry point: synthesis, training, inference, fusion, evaluation, verify.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import fileio, fusion, pipeline, verify
from .evalmetrics import evaluate_clouds
from .fileio import DataFormatError

logger = logging.getLogger("attnmvs")

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


def _load_config(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    try:
        return config_mod.build_config(args.config, overrides)
    except config_mod.UnknownConfigKeyError as exc:
        valid = ", ".join(sorted(f.name for f in
                                 __import__("dataclasses").fields(config_mod.RunConfig)))
        raise UsageError(f"unknown config key {exc.args[0]!r}; valid keys: {valid}")
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}")


def _prepare_out(out_dir, run_config):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_mod.snapshot(run_config, out_dir / "config.txt")
    return out_dir


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_make_synthetic(args):
    cfg = _load_config(args)
    out = _prepare_out(args.out, cfg)
    names = pipeline.write_synthetic_dataset(
        out, args.count, cfg.seed, height=cfg.scene_height,
        width=cfg.scene_width, num_views=cfg.scene_views)
    print(f"wrote {len(names)} scenes under {out / 'scenes'}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    out = _prepare_out(args.out, cfg)
    samples = pipeline.training_samples(args.data, cfg.num_sources)
    steps = cfg.train_steps if cfg.train_steps > 0 else cfg.epochs * len(samples)

    state = pipeline.create_train_state(cfg.network_config())
    latest = out / "checkpoint_latest.ntar"
    if args.resume and latest.exists():
        start = pipeline.load_checkpoint(latest, state)
        print(f"resumed from step {start}")

    seq = np.random.SeedSequence([cfg.seed, 17])
    data_rng = np.random.default_rng(seq.spawn(1)[0])
    crop_rng = np.random.default_rng(seq.spawn(1)[0])
    crop = None
    if cfg.crop_height and cfg.crop_width:
        crop = (cfg.crop_height, cfg.crop_width)

    log_path = out / "loss_log.txt"
    consecutive_bad = 0
    with open(log_path, "a", encoding="ascii") as log:
        while state.step < steps:
            batch = []
            for _ in range(cfg.batch_size):
                sample = samples[int(data_rng.integers(len(samples)))]
                if crop:
                    sample = pipeline.crop_sample(sample, crop, crop_rng)
                batch.append(sample)
            summary = pipeline.train_step(state, batch)
            if summary.get("aborted"):
                consecutive_bad += 1
                if consecutive_bad >= 10:
                    raise NumericalFailure(
                        "training diverged: 10 consecutive non-finite losses")
                continue
            consecutive_bad = 0
            log.write(pipeline.format_loss_line(state.step, summary) + "\n")
            if state.step % cfg.checkpoint_every == 0 or state.step == steps:
                pipeline.save_checkpoint(out / f"checkpoint_{state.step:06d}.ntar",
                                         state)
                pipeline.save_checkpoint(latest, state)
        pipeline.save_checkpoint(latest, state)
    print(f"trained to step {state.step}; checkpoints in {out}")
    return 0


def _load_network(cfg, checkpoint):
    state = pipeline.create_train_state(cfg.network_config())
    pipeline.load_checkpoint(checkpoint, state)
    return state.network


def cmd_infer(args):
    cfg = _load_config(args)
    out = _prepare_out(args.out, cfg)
    network = _load_network(cfg, args.checkpoint)
    for scene_dir in pipeline.list_scenes(args.data):
        views = pipeline.infer_scene(network, scene_dir, out / scene_dir.name,
                                     num_sources=cfg.num_sources_test)
        print(f"{scene_dir.name}: wrote depth/confidence for views {views}")
    return 0


def _select_scene(data_root, name):
    scenes = pipeline.list_scenes(data_root)
    if name:
        for scene_dir in scenes:
            if scene_dir.name == name:
                return scene_dir
        raise DataFormatError(f"scene {name!r} not found under {data_root}; "
                              f"available: {[s.name for s in scenes]}")
    if len(scenes) != 1:
        raise DataFormatError(
            f"dataset has {len(scenes)} scenes; pick one with --scene "
            f"({[s.name for s in scenes]})")
    return scenes[0]


def cmd_fuse(args):
    cfg = _load_config(args)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    config_mod.snapshot(cfg, out_path.parent / "config.txt")
    thresholds = cfg.fusion_thresholds()
    scene_dir = _select_scene(args.data, args.scene)

    pairs = pipeline.read_pair_file(scene_dir / "pair.txt")
    view_ids = [ref for ref, _ in pairs]
    cams = [pipeline.load_camera(scene_dir / "cams" / f"{v:08d}_cam.txt")
            for v in view_ids]
    images = [pipeline.load_image(scene_dir / "images" / f"{v:08d}.png").numpy()
              for v in view_ids]

    if args.source == "gt":
        depths = [fileio.read_pfm(scene_dir / "depths" / f"{v:08d}.pfm")
                  for v in view_ids]
        photo = [d > 0 for d in depths]
    else:
        depth_root = Path(args.depths) / scene_dir.name
        depths = [fileio.read_pfm(depth_root / "depth_est" / f"{v:08d}.pfm")
                  for v in view_ids]
        confidences = [fileio.read_pfm(depth_root / "confidence" / f"{v:08d}.pfm")
                       for v in view_ids]
        photo = [fusion.photometric_filter(c, thresholds.prob_min)
                 for c in confidences]

    if len(view_ids) >= 2:
        geo = fusion.geometric_filter(depths, cams, thresholds)
        masks = [p & g for p, g in zip(photo, geo)]
    else:
        masks = [p & (d > 0) for p, d in zip(photo, depths)]
    cloud = fusion.fuse(depths, images, cams, masks, thresholds)
    fileio.write_ply(out_path, cloud.points, cloud.colors)
    print(f"fused {len(cloud)} points from {scene_dir.name} -> {out_path}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    out = _prepare_out(args.out, cfg)
    recon_points, _ = fileio.read_ply(args.recon)
    gt_points, _ = fileio.read_ply(args.gt)
    if len(recon_points) == 0 or len(gt_points) == 0:
        raise DataFormatError("cannot evaluate an empty point cloud")
    report = evaluate_clouds(recon_points, gt_points, args.tau, cfg.max_dist)
    print(f"{'method':<16s} {'Acc.':>8s}  {'Comp.':>9s}  {'Overall':>11s}")
    print(report.table_row(Path(args.recon).stem))
    lines = [f"{key} = {value!r}" for key, value in report.as_dict().items()]
    (out / "metrics.kv").write_text("\n".join(lines) + "\n", encoding="ascii")
    (out / "metrics.txt").write_text(
        report.table_row(Path(args.recon).stem) + "\n", encoding="ascii")
    return 0


def cmd_verify(args):
    try:
        results = verify.run_suite(args.suite)
    except KeyError:
        raise UsageError(f"unknown suite {args.suite!r}; choose from "
                         f"{sorted(verify.SUITES) + ['all']}")
    for result in results:
        print(result.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise NumericalFailure(f"{len(failed)} verification checks failed")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="attnmvs", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single config key (repeatable)")
        p.add_argument("--seed", type=int, help="root random seed")

    p = sub.add_parser("make-synthetic", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10, help="number of scenes")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", help="train on a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict depth/confidence maps")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("fuse", help="filter and fuse depth maps into a PLY cloud")
    common(p)
    p.add_argument("--data", required=True, help="dataset root (cams/images)")
    p.add_argument("--depths", help="inference output root (for --source pred)")
    p.add_argument("--out", required=True, help="output .ply path")
    p.add_argument("--scene", help="scene name (defaults to the only scene)")
    p.add_argument("--source", choices=("pred", "gt"), default="pred")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score a reconstruction against ground truth")
    common(p)
    p.add_argument("--recon", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tau", type=float, required=True,
                   help="F-score distance threshold (scene units)")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("--suite", default="all")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    # Single-threaded math: bitwise reproducible regardless of scheduling, and
    # measurably faster than 2 threads at these tensor sizes.
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "source", None) == "pred" and \
                getattr(args, "depths", None) is None and args.command == "fuse":
            raise UsageError("fuse --source pred requires --depths")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, pipeline.NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
