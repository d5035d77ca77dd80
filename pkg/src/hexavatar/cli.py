"""Command-line front end tying the modules into workflows.

Subcommands: synth (generate a dataset), train (record an avatar from a
dataset), render (replay a recorded frame), animate (drive the avatar
with a novel pose track), retrieve (timestamp curve only, no rendering).

Exit codes: 0 success, 2 bad input or validation failure, 3 numeric
failure during optimization.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .archive import load_avatar, load_poses, save_avatar
from .avatar import frame_to_time, init_avatar, render_avatar
from .rasterizer import Camera, save_png
from .retrieval import (DEFAULT_TOP_K, DEFAULT_WINDOW, animate, build_index,
                        retrieve_track)
from .skinning import load_pose_track
from .synth import (SynthSceneSpec, default_split, generate, load_dataset,
                    load_split, save_dataset, training_set)
from .trainer import (AdamMoments, NonFiniteLossError, TrainingConfig,
                      TrainingError, train, write_loss_log)

# Sized for the bundled synthetic scene; override through the config file.
DEFAULT_MODEL = {
    "n_gaussians": 200,
    "spatial_resolutions": (16, 32),
    "time_resolution": 24,
    "channels": 8,
    "decoder_layers": 2,
    "decoder_width": 64,
    "lbs_layers": 2,
    "lbs_width": 32,
    "sh_degree": 0,
    "capsule_radius": 0.08,
    "bbox_margin": 0.4,
    "opacity_init": 0.25,
    "scale_init": 0.04,
    "max_offset": 0.2,
    "conditioning": "time",
}


def load_camera(path):
    with open(path) as fh:
        d = json.load(fh)
    if not isinstance(d, dict) or "rotation" not in d:
        raise ValueError(f"{path} is not a camera file")
    return Camera.from_dict(d)


def save_camera(cam, path):
    with open(path, "w") as fh:
        json.dump(cam.to_dict(), fh, indent=2)


def _write_image(rgb, path):
    path = str(path)
    if path.endswith(".png"):
        save_png(rgb, path)
    elif path.endswith(".npy"):
        np.save(path, rgb)
    else:
        raise ValueError("output image must end in .png or .npy")


def _load_train_config(path):
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("train config must be a JSON object")
    model = dict(DEFAULT_MODEL)
    overrides = raw.pop("model", {})
    unknown = set(overrides) - set(model)
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    model.update(overrides)
    model["spatial_resolutions"] = tuple(model["spatial_resolutions"])
    return TrainingConfig.from_dict(raw), model


def cmd_synth(args):
    with open(args.spec) as fh:
        spec = SynthSceneSpec.from_dict(json.load(fh))
    dataset = generate(spec)
    save_dataset(dataset, args.out)
    print(f"wrote {dataset.view_count} views x {dataset.frame_count} frames "
          f"to {args.out}")
    return 0


def cmd_train(args):
    dataset = load_dataset(args.dataset)
    cfg, model = _load_train_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if (Path(args.dataset) / "split.json").exists():
        ds_split = load_split(args.dataset)
    else:
        ds_split = default_split(dataset)
    ts = training_set(dataset, ds_split)
    rng = np.random.default_rng(cfg.seed)
    n_gaussians = model.pop("n_gaussians")
    avatar = init_avatar(dataset.skeleton, rng, n_gaussians,
                         frame_count=ts.frame_count, **model)
    optimizer = AdamMoments()
    avatar, rows = train(avatar, ts, cfg, optimizer=optimizer)
    track = [ts.poses[f] for f in sorted(ts.poses)]
    save_avatar(avatar, args.out, optimizer=optimizer, poses=track)
    log_path = args.log or str(Path(args.out).with_suffix(".loss.csv"))
    write_loss_log(log_path, rows)
    last = rows[-1] if rows else {"loss": float("nan")}
    print(f"recorded {avatar.n_gaussians} gaussians over {ts.frame_count} "
          f"frames, final loss {last['loss']:.6f}; archive at {args.out}")
    return 0


def cmd_render(args):
    avatar, _ = load_avatar(args.avatar)
    track = load_pose_track(args.pose_track)
    if not 0 <= args.frame < min(len(track), avatar.frame_count):
        raise ValueError(f"frame {args.frame} is outside the recorded range")
    cam = load_camera(args.camera)
    out = render_avatar(avatar, track[args.frame],
                        time_value=frame_to_time(args.frame, avatar.frame_count),
                        cam=cam)
    _write_image(out.rgb, args.out)
    print(f"rendered frame {args.frame} to {args.out}")
    return 0


def _load_retrieval_inputs(args):
    avatar, _ = load_avatar(args.avatar)
    recorded = load_poses(args.avatar)
    if recorded is None:
        raise ValueError("archive holds no recorded pose track; "
                         "re-train to produce one")
    index = build_index(recorded, avatar.skeleton)
    novel = load_pose_track(args.novel_poses)
    return avatar, index, novel


def cmd_animate(args):
    avatar, index, novel = _load_retrieval_inputs(args)
    cam = load_camera(args.camera)
    images, trace = animate(avatar, index, novel, cam, k=args.k,
                            window=args.window,
                            smoothing=not args.no_smoothing)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for n, img in zip(trace.frames(), images):
        save_png(img.rgb, outdir / f"frame{n:03d}.png")
    np.save(outdir / "frames.npy", np.stack([img.rgb for img in images]))
    trace.save(outdir / "trace.csv")
    print(f"animated {len(images)} frames into {outdir}")
    return 0


def cmd_retrieve(args):
    _, index, novel = _load_retrieval_inputs(args)
    trace = retrieve_track(index, novel, k=args.k, window=args.window)
    trace.save(args.emit_curve)
    print(f"wrote {len(trace.rows)} retrieval rows to {args.emit_curve}")
    return 0


def _retrieval_args(sub):
    sub.add_argument("--avatar", required=True)
    sub.add_argument("--novel-poses", required=True)
    sub.add_argument("--k", type=int, default=DEFAULT_TOP_K)
    sub.add_argument("--window", type=float, default=DEFAULT_WINDOW)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hexavatar",
        description="Record, replay, and animate splat avatars.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="scene spec JSON")
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="record an avatar from a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", required=True, help="trainer config JSON")
    p.add_argument("--out", required=True, help="output archive path")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--log", default=None,
                   help="loss CSV path (default: archive path, .loss.csv)")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("render", help="replay one recorded frame")
    p.add_argument("--avatar", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--pose-track", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True, help=".png or raw .npy dump")
    p.set_defaults(func=cmd_render)

    p = subs.add_parser("animate", help="drive the avatar with novel poses")
    _retrieval_args(p)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True, help="output frame directory")
    p.add_argument("--no-smoothing", action="store_true",
                   help="disable feature smoothing at jitter frames")
    p.set_defaults(func=cmd_animate)

    p = subs.add_parser("retrieve", help="emit the timestamp curve only")
    _retrieval_args(p)
    p.add_argument("--emit-curve", required=True, help="trace CSV path")
    p.set_defaults(func=cmd_retrieve)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NonFiniteLossError, TrainingError, np.linalg.LinAlgError) as exc:
        # LinAlgError subclasses ValueError, so this branch must come first
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
