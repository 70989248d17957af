"""Command-line surface: gen-data, train, sample, schedule, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
single machine-parsable `error: ...` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .errors import ConfigError, DataError
from .pipeline import (RunConfig, conditions_from_scene, evaluate_video,
                       generate_dataset, load_dataset, load_model, sample_video,
                       train_model)
from .sampler import build_schedule, call_count, format_plan, video_length


class UsageError(Exception):
    pass


def _load_config(path, seed=None) -> RunConfig:
    try:
        config = RunConfig.from_json(path) if path else RunConfig()
    except (OSError, json.JSONDecodeError, ConfigError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    if seed is not None:
        config.seed = seed
    return config


def cmd_gen_data(args) -> int:
    config = _load_config(args.config, args.seed)
    manifest = generate_dataset(config, args.out)
    skipped = manifest["skipped_seeds"]
    if skipped:
        sys.stderr.write(f"skipped trapped-camera seeds: {skipped}\n")
    print(f"wrote {len(manifest['scenes'])} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config, args.seed)
    data_dir = args.data or config.data_dir
    _model, losses = train_model(config, data_dir, args.out, log_stream=sys.stderr)
    print(f"trained {len(losses)} steps; final loss {losses[-1]['loss']:.6f}; "
          f"checkpoint {Path(args.out) / 'checkpoint.x2vc'}")
    return 0


def _parse_ids(text):
    if not text:
        return ()
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"bad id list: {text!r}") from None


def cmd_sample(args) -> int:
    config, model, _step = load_model(args.checkpoint)
    data_dir = args.data or config.data_dir
    _manifest, scenes = load_dataset(data_dir)
    if not 0 <= args.scene < len(scenes):
        raise UsageError(f"scene index {args.scene} outside 0..{len(scenes) - 1}")
    data = scenes[args.scene]
    length = video_length(model.config.frames, args.levels)
    conditions = conditions_from_scene(
        data, length=length, reference=not args.no_reference,
        masked_ids=_parse_ids(args.masked_objects), with_prompts=args.with_prompts)
    video, plan = sample_video(model, conditions, args.levels, args.seed,
                               ddim_steps=config.ddim_steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video):
        dataio.write_tensor(dataio.frame_path(out, i, "rgb"), frame.astype(np.float32))
    (out / "plan.txt").write_text(format_plan(plan) + f"\ncalls: {len(plan.calls)}\n")
    print(f"wrote {len(video)} frames to {out}")
    return 0


def cmd_schedule(args) -> int:
    try:
        plan = build_schedule(args.frames, args.levels)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    print(format_plan(plan))
    print(f"calls: {call_count(args.frames, args.levels)}")
    return 0


def cmd_eval(args) -> int:
    _manifest, scenes = load_dataset(args.data)
    if not 0 <= args.scene < len(scenes):
        raise UsageError(f"scene index {args.scene} outside 0..{len(scenes) - 1}")
    data = scenes[args.scene]
    frames_dir = Path(args.frames_dir)
    paths = sorted(frames_dir.glob("frame_*.rgb.npyish"))
    if not paths:
        raise UsageError(f"no frame_*.rgb.npyish files under {frames_dir}")
    frames = np.stack([dataio.read_tensor(p) for p in paths])
    report = evaluate_video(frames, data, length=frames.shape[0])
    Path(args.out).write_text(report.to_json() + "\n")
    print(f"psnr {report.psnr_mean:.2f} dB, tc {report.tc_score:.4f} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="x2v",
        description="Intrinsic-channel video rendering toolkit: dataset "
                    "generation, training, recursive sampling, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the denoiser on a dataset")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--data", help="dataset directory (defaults to config data_dir)")
    p.add_argument("--out", required=True, help="checkpoint/log output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="sample a video with recursive sampling")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (defaults to config data_dir)")
    p.add_argument("--scene", type=int, default=0, help="scene index")
    p.add_argument("--levels", type=int, default=2, help="recursion levels K")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-reference", action="store_true",
                   help="sample without a reference frame")
    p.add_argument("--masked-objects", default="",
                   help="comma-separated object ids whose A/M/R are masked")
    p.add_argument("--with-prompts", action="store_true",
                   help="attach local prompts for the masked objects")
    p.add_argument("--out", required=True, help="frame output directory")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("schedule", help="print a recursive sampling plan")
    p.add_argument("--frames", type=int, default=5, help="frames per call N")
    p.add_argument("--levels", type=int, default=3, help="levels K")
    p.set_defaults(fn=cmd_schedule)

    p = sub.add_parser("eval", help="evaluate sampled frames against a dataset scene")
    p.add_argument("--frames-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except (ConfigError, DataError, OSError, Exception) as exc:  # noqa: BLE001
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
