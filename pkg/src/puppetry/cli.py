"""Command-line surface tying the pipeline stages together.

    puppetry make-oracle-corpus --config cfg.yaml --output data/ --persons 3 --frames 300
    puppetry train-a2e          --config cfg.yaml --output runs/a2e
    puppetry fit-target         --config cfg.yaml --checkpoint runs/a2e/a2e_final.ckpt --output runs/target
    puppetry train-renderer     --config cfg.yaml --output runs/target
    puppetry infer              --config cfg.yaml --checkpoint ... (a2e, mapping, renderer) --logits in.lgt --output out/
    puppetry eval-self-reenactment --config cfg.yaml --checkpoint ... --output out/

Exit codes: 0 success, 2 config/dataset/argument validation error, 3 runtime
failure. Results are staged in temporary locations and moved into place only
on success.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import audio, dataset, oracle, pipeline, training
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_project_config
from .errors import ConfigError, FormatError, InvalidInputError, PuppetryError

log = logging.getLogger("puppetry")


def _write_json_atomic(path: Path, payload: dict):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path)


def _load_checkpoints(paths):
    """Load repeatable --checkpoint flags and index them by stage."""
    by_stage = {}
    for p in paths or []:
        p = Path(p)
        if not p.exists():
            raise InvalidInputError(f"checkpoint does not exist: {p}")
        ckpt = load_checkpoint(p)
        if ckpt.stage in by_stage:
            raise InvalidInputError(f"duplicate {ckpt.stage!r} checkpoint: {p}")
        by_stage[ckpt.stage] = ckpt
    return by_stage


def _require(by_stage, *stages):
    missing = [s for s in stages if s not in by_stage]
    if missing:
        raise InvalidInputError(
            "missing checkpoint(s) for stage(s): " + ", ".join(missing)
            + " (pass them with repeated --checkpoint flags)"
        )


def _apply_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.training.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.training.epochs = args.epochs
        cfg.training.decay_epochs = min(cfg.training.decay_epochs, args.epochs)
    return cfg


def cmd_make_oracle_corpus(args) -> int:
    cfg = load_project_config(args.config, require_data=False)
    _apply_overrides(cfg, args)
    out = Path(args.output) if args.output else Path(cfg.data_root)
    resolution = args.resolution or cfg.renderer.resolution
    spec = oracle.OracleSpec(seed=cfg.seed, resolution=resolution)
    staging = Path(tempfile.mkdtemp(prefix=".corpus-", dir=out.parent if out.parent.is_dir() else None))
    try:
        dirs = oracle.write_corpus(staging, spec, persons=args.persons,
                                   frames_per_person=args.frames,
                                   render=not args.no_frames)
        out.mkdir(parents=True, exist_ok=True)
        for d in dirs:
            dest = out / d.name
            if dest.exists():
                shutil.rmtree(dest)
            os.replace(d, dest)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    log.info("wrote %d sequences to %s", args.persons, out)
    return 0


def cmd_train_a2e(args) -> int:
    cfg = load_project_config(args.config)
    _apply_overrides(cfg, args)
    if not cfg.sequences:
        raise ConfigError("config lists no training sequences")
    sequences = [dataset.load_sequence_data(d) for d in cfg.sequence_dirs()]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    result = training.train_a2e(sequences, cfg.training, out_dir=out)
    final = result.history[-1]["train_loss"] if result.history else None
    log.info("stage-1 training done; final loss %s, best val %s", final, result.best_val)
    return 0


def cmd_fit_target(args) -> int:
    cfg = load_project_config(args.config)
    _apply_overrides(cfg, args)
    by_stage = _load_checkpoints(args.checkpoint)
    _require(by_stage, "a2e")
    net = training.a2e_from_checkpoint(by_stage["a2e"])
    target = dataset.load_target_data(cfg.target_dir())
    holdout = int(target.frame_count * cfg.holdout_fraction)
    fit_frames = target.frame_count - holdout
    windows = audio.windows_for_all_frames(target.logits, cfg.fps,
                                           n_frames=target.frame_count)
    mapping = training.adapt_new_target(net, windows[:fit_frames],
                                        target.visual_deltas[:fit_frames],
                                        ridge=args.ridge)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "mapping.ckpt",
                    training.mapping_to_checkpoint(mapping, target.name))
    log.info("fitted mapping for %s on %d frames (rank_deficient=%s)",
             target.name, fit_frames, mapping.rank_deficient)
    return 0


def cmd_train_renderer(args) -> int:
    cfg = load_project_config(args.config)
    _apply_overrides(cfg, args)
    target = dataset.load_target_data(cfg.target_dir())
    if args.resolution and tuple(target.resolution) != (args.resolution, args.resolution):
        raise InvalidInputError(
            f"--resolution {args.resolution} does not match dataset {target.resolution}"
        )
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    result = training.train_renderer(
        target, cfg.training,
        variant=args.variant or cfg.renderer.variant,
        erosion_radius=cfg.renderer.erosion_radius,
        perceptual=cfg.renderer.perceptual,
        train_frames=cfg.renderer.train_frames,
        out_dir=out,
    )
    log.info("stage-2 training done; final loss %s",
             result.history[-1]["train_loss"] if result.history else None)
    return 0


def cmd_infer(args) -> int:
    cfg = load_project_config(args.config)
    _apply_overrides(cfg, args)
    by_stage = _load_checkpoints(args.checkpoint)
    _require(by_stage, "a2e", "mapping", "renderer")
    net = training.a2e_from_checkpoint(by_stage["a2e"])
    mapping = training.mapping_from_checkpoint(by_stage["mapping"])
    renderer = training.renderer_from_checkpoint(by_stage["renderer"])
    target = dataset.load_target_data(cfg.target_dir())
    if list(by_stage["renderer"].arch["resolution"]) != list(target.resolution):
        raise InvalidInputError(
            f"renderer checkpoint was trained at {by_stage['renderer'].arch['resolution']}, "
            f"dataset is {list(target.resolution)}"
        )
    stream = audio.load_logit_stream(args.logits)

    frames, timing = pipeline.infer(net, mapping, renderer, target, stream, fps=cfg.fps)

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".frames-", dir=out))
    try:
        for i, frame in enumerate(frames):
            dataset.save_image(staging / f"{i:06d}.png", frame)
        frames_dir = out / "frames"
        if frames_dir.exists():
            shutil.rmtree(frames_dir)
        os.replace(staging, frames_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    _write_json_atomic(out / "timing.json", timing)
    if args.video:
        ok = pipeline.assemble_video(out / "frames", out / "video.mp4", fps=cfg.fps)
        log.info("video assembly %s", "succeeded" if ok else "skipped (no encoder)")
    log.info("wrote %d frames to %s (mapping %.2fms, raster %.2fms, render %.2fms per frame)",
             timing["frames"], out / "frames", timing["mapping_ms"],
             timing["rasterization_ms"], timing["rendering_ms"])
    return 0


def cmd_eval_self_reenactment(args) -> int:
    cfg = load_project_config(args.config)
    _apply_overrides(cfg, args)
    by_stage = _load_checkpoints(args.checkpoint)
    _require(by_stage, "a2e", "mapping", "renderer")
    net = training.a2e_from_checkpoint(by_stage["a2e"])
    mapping = training.mapping_from_checkpoint(by_stage["mapping"])
    renderer = training.renderer_from_checkpoint(by_stage["renderer"])
    target = dataset.load_target_data(cfg.target_dir())
    holdout = int(target.frame_count * cfg.holdout_fraction)
    if holdout < 1:
        raise InvalidInputError(
            f"holdout_fraction {cfg.holdout_fraction} leaves no held-out frames"
        )
    eval_frames = range(target.frame_count - holdout, target.frame_count)
    report = pipeline.eval_self_reenactment(net, mapping, renderer, target, eval_frames)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_json_atomic(out / "self_reenactment.json", report)
    log.info("self-reenactment over %d frames: visual %.6f, audio %.6f",
             report["frames"], report["visual"], report["audio"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="puppetry",
        description="Audio-driven facial reenactment pipeline (training, inference, evaluation).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, output_required=True):
        p.add_argument("--config", required=True, help="project config (YAML)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--epochs", type=int, default=None, help="override training epochs")
        p.add_argument("--resolution", type=int, default=None, help="override/validate image resolution")
        p.add_argument("--output", required=output_required, help="output directory")
        p.add_argument("--checkpoint", action="append", default=[],
                       help="checkpoint file; repeat for multiple stages")

    p = sub.add_parser("make-oracle-corpus", help="generate a synthetic ground-truth corpus")
    common(p, output_required=False)
    p.add_argument("--persons", type=int, default=3)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--no-frames", action="store_true",
                   help="skip image/uvmap rendering (stage-1-only corpora)")
    p.set_defaults(func=cmd_make_oracle_corpus)

    p = sub.add_parser("train-a2e", help="stage 1: train the audio-to-expression nets")
    common(p)
    p.set_defaults(func=cmd_train_a2e)

    p = sub.add_parser("fit-target", help="solve the person mapping for the target sequence")
    common(p)
    p.add_argument("--ridge", type=float, default=0.0)
    p.set_defaults(func=cmd_fit_target)

    p = sub.add_parser("train-renderer", help="stage 2: train the target's neural renderer")
    common(p)
    p.add_argument("--variant", choices=["dilated", "strided"], default=None)
    p.set_defaults(func=cmd_train_renderer)

    p = sub.add_parser("infer", help="synthesize frames for a logit stream")
    common(p)
    p.add_argument("--logits", required=True, help="driving logit stream file")
    p.add_argument("--video", action="store_true", help="also assemble a video if ffmpeg exists")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval-self-reenactment",
                       help="held-out re-rendering metric, visual- vs audio-driven")
    common(p)
    p.set_defaults(func=cmd_eval_self_reenactment)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    torch.use_deterministic_algorithms(True)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError, FormatError, FileNotFoundError) as e:
        log.error("%s", e)
        return 2
    except PuppetryError as e:
        log.error("%s", e)
        return 3
    except Exception as e:  # noqa: BLE001 - CLI boundary
        log.error("unexpected failure: %s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
