"""Command line interface: synth / train / infer / eval.

Configuration comes from built-in defaults, then an optional `key = value`
config file, then command-line flags (flags win). Every run echoes the
fully resolved configuration into its output directory so it can be
reproduced from the echo plus the seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluate as eval_mod
from . import postprocess as post_mod
from .model import (
    GebdModel,
    ModelConfig,
    check_features_compatible,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from .train import TrainConfig, train, write_loss_curve
from .util import atomic_write_text, worker_count

PROG = "gebd"
ERROR_PREFIX = f"{PROG}: error: "


@dataclass
class RunConfig:
    # synthetic data
    num_videos: int = 10
    frames: int = 50
    fps: float = 5.0
    stage_dims: tuple[int, ...] = data_mod.DEFAULT_STAGE_DIMS
    snr: float = 4.0
    min_boundaries: int = 3
    max_boundaries: int = 6
    min_gap_seconds: float = 1.0
    seed: int = 0
    # model
    d_out: int = 256
    d_head: int = 128
    branch_count: int = 4
    decoder_blocks: int = 3
    fuse_distances: bool = True
    use_residual: bool = True
    use_depthwise: bool = True
    # training
    epochs: int = 10
    batch_size: int = 8
    lr_peak: float = 4e-4
    lr_final: float = 4e-6
    warmup_epochs: int = 2
    smooth_training: bool = True
    positive_radius_frames: int = 1
    # inference
    smooth_inference: bool = True
    clip_mode: bool = False
    clip_seconds: float = 10.0
    overlap_seconds: float = 5.0
    # evaluation
    taus: tuple[float, ...] = eval_mod.DEFAULT_TAUS
    eval_average: str = "micro"


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _parse_float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


_FIELD_PARSERS = {
    "num_videos": int,
    "frames": int,
    "fps": float,
    "stage_dims": _parse_int_tuple,
    "snr": float,
    "min_boundaries": int,
    "max_boundaries": int,
    "min_gap_seconds": float,
    "seed": int,
    "d_out": int,
    "d_head": int,
    "branch_count": int,
    "decoder_blocks": int,
    "fuse_distances": _parse_bool,
    "use_residual": _parse_bool,
    "use_depthwise": _parse_bool,
    "epochs": int,
    "batch_size": int,
    "lr_peak": float,
    "lr_final": float,
    "warmup_epochs": int,
    "smooth_training": _parse_bool,
    "positive_radius_frames": int,
    "smooth_inference": _parse_bool,
    "clip_mode": _parse_bool,
    "clip_seconds": float,
    "overlap_seconds": float,
    "taus": _parse_float_tuple,
    "eval_average": str,
}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def format_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def load_config_file(path: str | Path) -> dict:
    """Parse `key = value` lines; unknown keys are rejected."""
    overrides = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_PARSERS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            overrides[key] = _FIELD_PARSERS[key](value.strip())
        except ValueError as e:
            raise ValueError(f"{path}:{lineno}: bad value for {key!r}: {e}") from e
    return overrides


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            setattr(cfg, key, value)
    for name in _FIELD_PARSERS:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


def _echo_config(out_dir: Path, cfg: RunConfig) -> None:
    atomic_write_text(out_dir / "run_config.txt", format_config(cfg))


def _model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        stage_dims=cfg.stage_dims,
        branch_count=cfg.branch_count,
        decoder_blocks=cfg.decoder_blocks,
        d_out=cfg.d_out,
        d_head=cfg.d_head,
        neighbor_radius=max(1, round(cfg.fps)),
        fuse_distances=cfg.fuse_distances,
        use_residual=cfg.use_residual,
        use_depthwise=cfg.use_depthwise,
    )


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if any(d <= 0 for d in cfg.stage_dims):
        raise ValueError(f"stage_dims must be positive, got {cfg.stage_dims}")
    if not 0 <= cfg.min_boundaries <= cfg.max_boundaries:
        raise ValueError("need 0 <= min_boundaries <= max_boundaries")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValueError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    duration = cfg.frames / cfg.fps

    def build(i: int):
        video_seed = cfg.seed + i
        bound_rng = np.random.default_rng((video_seed, 1))
        count = int(bound_rng.integers(cfg.min_boundaries, cfg.max_boundaries + 1))
        times = data_mod.random_boundary_times(bound_rng, duration, count, cfg.min_gap_seconds)
        video, ann = data_mod.synth_video(
            video_seed, cfg.frames, cfg.fps, cfg.stage_dims, times,
            snr=cfg.snr, video_id=f"video{i:05d}",
        )
        filename = f"{video.video_id}.gebf"
        data_mod.save_features(out / filename, video)
        return i, ann, {"video_id": video.video_id, "file": filename,
                        "seed": video_seed, "num_frames": cfg.frames, "fps": cfg.fps}

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = sorted(pool.map(build, range(cfg.num_videos)), key=lambda r: r[0])
    data_mod.save_annotations(out / "annotations.json", [ann for _, ann, _ in results])
    manifest = {"seed": cfg.seed, "videos": [entry for _, _, entry in results]}
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    _echo_config(out, cfg)
    print(f"wrote {cfg.num_videos} feature files to {out}")
    return 0


def _load_dataset(features_dir: Path, annotations_path: Path, cfg: RunConfig):
    annotations = data_mod.load_annotations(annotations_path)
    files = sorted(features_dir.glob("*.gebf"))
    if not files:
        raise ValueError(f"no .gebf feature files in {features_dir}")
    missing = [f.stem for f in files if f.stem not in annotations]
    if missing:
        raise ValueError(f"no annotations for video ids: {', '.join(missing)}")
    dataset = []
    for f in files:
        ann = annotations[f.stem]
        video = data_mod.load_features(f, fps=ann.fps)
        labels = data_mod.frame_labels(ann, video.num_frames, ann.fps, cfg.positive_radius_frames)
        dataset.append((video, labels))
    return dataset, annotations


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, _ = _load_dataset(Path(args.features), Path(args.annotations), cfg)
    fps_values = {video.fps for video, _ in dataset}
    if len(fps_values) != 1:
        raise ValueError(f"training videos must share one fps, got {sorted(fps_values)}")
    cfg.fps = fps_values.pop()
    dims = {video.stage_dims for video, _ in dataset}
    if len(dims) != 1:
        raise ValueError(f"training videos must share stage dims, got {sorted(dims)}")
    cfg.stage_dims = dims.pop()
    model = GebdModel.build(_model_config(cfg), seed=cfg.seed)
    train_cfg = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr_peak=cfg.lr_peak,
        lr_final=cfg.lr_final,
        warmup_epochs=cfg.warmup_epochs,
        smooth_targets=cfg.smooth_training,
        smooth_inference=cfg.smooth_inference,
        seed=cfg.seed,
    )
    model, curve = train(dataset, model, train_cfg)
    save_checkpoint(out / "model.gebw", model)
    write_loss_curve(out / "loss.csv", curve)
    _echo_config(out, cfg)
    final = f", final loss {curve[-1][2]:.6f}" if curve else " (no training steps)"
    print(f"saved checkpoint to {out / 'model.gebw'}{final}")
    return 0


def _score_video(video, model: GebdModel, cfg: RunConfig) -> post_mod.BoundaryScores:
    clip_len = round(cfg.clip_seconds * video.fps)
    if cfg.clip_mode and video.num_frames > clip_len:
        clips = data_mod.split_clips(video, cfg.clip_seconds, cfg.overlap_seconds)
        scored = []
        for clip in clips:
            pred = model.forward(clip.stages)
            sc = post_mod.BoundaryScores(video.video_id, video.fps, pred.data[:, 0].copy())
            if cfg.smooth_inference:
                sc = post_mod.gaussian_smooth(sc)
            scored.append((clip, sc))
        return post_mod.merge_clip_scores(scored)
    scores = model_forward(video, model)
    if cfg.smooth_inference:
        scores = post_mod.gaussian_smooth(scores)
    return scores


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    features_path = Path(args.features)
    files = sorted(features_path.glob("*.gebf")) if features_path.is_dir() else [features_path]
    if not files:
        raise ValueError(f"no .gebf feature files in {features_path}")
    out = Path(args.out)
    (out / "scores").mkdir(parents=True, exist_ok=True)
    (out / "detections").mkdir(parents=True, exist_ok=True)

    def run(path: Path):
        video = data_mod.load_features(path, fps=cfg.fps)
        check_features_compatible(model.config, video)
        scores = _score_video(video, model, cfg)
        detections = post_mod.pick_peaks(scores)
        post_mod.save_scores(out / "scores" / f"{video.video_id}.json", scores)
        post_mod.save_detections(out / "detections" / f"{video.video_id}.json", detections)
        return video.video_id, len(detections.timestamps)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(run, files))
    _echo_config(out, cfg)
    total = sum(n for _, n in results)
    print(f"scored {len(results)} videos, {total} boundaries detected")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    annotations = data_mod.load_annotations(args.annotations)
    det_path = Path(args.detections)
    det_files = sorted(det_path.glob("*.json")) if det_path.is_dir() else [det_path]
    detections = {}
    for f in det_files:
        d = post_mod.load_detections(f)
        if d.video_id in detections:
            raise ValueError(f"duplicate detections for video id {d.video_id!r}")
        detections[d.video_id] = d
    missing_dets = sorted(set(annotations) - set(detections))
    missing_anns = sorted(set(detections) - set(annotations))
    if missing_dets or missing_anns:
        problems = []
        if missing_dets:
            problems.append(f"ids without detections: {', '.join(missing_dets)}")
        if missing_anns:
            problems.append(f"ids without annotations: {', '.join(missing_anns)}")
        raise ValueError("; ".join(problems))
    corpus = [
        (detections[vid].timestamps, list(annotations[vid].boundaries), annotations[vid].duration)
        for vid in sorted(annotations)
    ]
    report = eval_mod.f1_sweep(corpus, cfg.taus, cfg.eval_average)
    eval_mod.write_report_csv(args.out, report)
    print(f"avg F1 over {len(cfg.taus)} thresholds: {report.avg_f1:.4f}")
    return 0


def _add_config_flags(parser: argparse.ArgumentParser, names: list[str]) -> None:
    """Expose a subset of RunConfig keys as optional flags (None = not given)."""
    for name in names:
        flag = "--" + name.replace("_", "-")
        parser_fn = _FIELD_PARSERS[name]
        if parser_fn is _parse_bool:
            parser.add_argument(flag, default=None, action=argparse.BooleanOptionalAction)
        else:
            parser.add_argument(flag, default=None, type=parser_fn, metavar=name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG, description="Generic event boundary detection on feature streams"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic feature streams with planted boundaries")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    _add_config_flags(p, [
        "num_videos", "frames", "fps", "stage_dims", "snr",
        "min_boundaries", "max_boundaries", "min_gap_seconds", "seed",
    ])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on feature files + annotations")
    p.add_argument("--features", required=True, help="directory of .gebf files")
    p.add_argument("--annotations", required=True, help="annotation JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value config file")
    _add_config_flags(p, [
        "d_out", "d_head", "branch_count", "decoder_blocks",
        "fuse_distances", "use_residual", "use_depthwise",
        "epochs", "batch_size", "lr_peak", "lr_final", "warmup_epochs",
        "smooth_training", "positive_radius_frames", "seed",
    ])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="score videos and emit detections")
    p.add_argument("--checkpoint", required=True, help="model checkpoint file")
    p.add_argument("--features", required=True, help=".gebf file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--smooth", dest="smooth_inference", default=None,
                   action=argparse.BooleanOptionalAction,
                   help="Gaussian-smooth scores before peak picking (default on)")
    _add_config_flags(p, ["fps", "clip_mode", "clip_seconds", "overlap_seconds"])
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against annotations")
    p.add_argument("--detections", required=True, help="detection JSON file or directory")
    p.add_argument("--annotations", required=True, help="annotation JSON file")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--config", help="key = value config file")
    _add_config_flags(p, ["taus", "eval_average"])
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"{ERROR_PREFIX}{e}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
