"""Command-line surface for data generation, training, sampling, editing, and evaluation.

Subcommands: synth-data, train, finetune, sample, edit, eval,
sweep-guidance. Every run writes a manifest of its resolved settings and
content hashes of its inputs next to the outputs, and is deterministic
given (arguments, seed, inputs): rerunning a command reproduces its
outputs byte for byte.

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import diffusion, metrics
from .data import (
    DatasetManifest,
    TemplateMesh,
    load_split,
    read_afea,
    read_mseq,
    resample_features,
    synth_generate,
    write_mseq,
)
from .diffusion import (
    GUIDANCE_DEFAULT,
    KeyframeConstraint,
    SamplerConfig,
    StepVariant,
    load_keyframes,
    make_schedule,
)
from .errors import ConfigError, FaceMotionError
from .net import Condition, Denoiser
from .train import TrainConfig, finetune_personal, style_split, train_loop


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(target, command: str, settings: dict, inputs: dict):
    """Record resolved settings plus content hashes of the input files."""
    target = Path(target)
    if target.suffix:
        path = target.with_name(target.name + ".manifest.json")
    else:
        target.mkdir(parents=True, exist_ok=True)
        path = target / "run_manifest.json"
    payload = {
        "command": command,
        "settings": settings,
        "inputs": {str(k): _sha256(v) for k, v in sorted(inputs.items()) if v is not None},
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return payload


def _setting(args, config: dict, key: str, default):
    """Flag value if given, else config-file value, else default."""
    val = getattr(args, key.replace("-", "_"), None)
    if val is not None:
        return val
    if key in config:
        return config[key]
    return default


def _train_config(args, config: dict, **overrides) -> TrainConfig:
    fields = {
        "iterations": 5000, "lr": 1e-4, "batch_size": 64, "lambda_vel": 10.0,
        "cond_dropout_p": 0.1, "crop_len": 30, "diffusion_steps": 500,
        "schedule": "cosine", "seed": 0, "checkpoint_every": 1000,
    }
    resolved = {k: _setting(args, config, k, d) for k, d in fields.items()}
    resolved.update(overrides)
    try:
        return TrainConfig(**resolved)
    except TypeError as exc:
        raise ConfigError(f"bad training configuration: {exc}") from exc


def _sampler_schedule(args, config: dict):
    steps = int(_setting(args, config, "diffusion_steps", 500))
    kind = _setting(args, config, "schedule", "cosine")
    return make_schedule(steps, kind)


def _variant(args, config: dict) -> StepVariant:
    name = _setting(args, config, "variant", StepVariant.MARGINAL.value)
    try:
        return StepVariant(name)
    except ValueError as exc:
        raise ConfigError(
            f"unknown step variant {name!r}; choose from "
            f"{[v.value for v in StepVariant]}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    if args.split is None:
        if args.identities != 12:
            raise ConfigError(
                f"--identities {args.identities} requires an explicit --split "
                f"(default 8,2,2 covers 12 identities)")
        split = (8, 2, 2)
    else:
        try:
            split = tuple(int(x) for x in args.split.split(","))
        except ValueError as exc:
            raise ConfigError(f"--split must be three integers, got {args.split!r}") from exc
    out = Path(args.out)
    synth_generate(out, n_identities=args.identities,
                   seqs_per_identity=args.seqs_per_identity,
                   n_vertices=args.vertices, n_channels=args.channels,
                   fps=args.fps, seed=args.seed, split_counts=split,
                   min_frames=args.min_frames, max_frames=args.max_frames)
    _write_run_manifest(out, "synth-data", {
        "identities": args.identities, "seqs_per_identity": args.seqs_per_identity,
        "vertices": args.vertices, "channels": args.channels, "fps": args.fps,
        "seed": args.seed, "split": list(split),
        "min_frames": args.min_frames, "max_frames": args.max_frames,
    }, {})
    print(f"wrote dataset with {args.identities} identities to {out}")
    return 0


def cmd_train(args) -> int:
    config_file = _load_config_file(args.config)
    manifest = DatasetManifest.load(args.data)
    cfg = _train_config(args, config_file)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(done, stats):
        print(f"iter {done}: l_simple={stats.l_simple:.6f} l_vel={stats.l_vel:.6f} "
              f"l_total={stats.l_total:.6f}")

    train_loop(manifest, cfg, out_dir=out, resume_from=args.resume, log=log)
    _write_run_manifest(out, "train", {**cfg.__dict__},
                        {"data": args.data, "config": args.config,
                         "resume": args.resume})
    print(f"training finished; checkpoints under {out / 'checkpoints'}")
    return 0


def cmd_finetune(args) -> int:
    config_file = _load_config_file(args.config)
    manifest = DatasetManifest.load(args.data)
    base = Denoiser.load(args.checkpoint)
    cfg = _train_config(args, config_file)
    loaded = [s for s in load_split_any(manifest) if s.identity == args.identity]
    if not loaded:
        raise ConfigError(f"identity {args.identity!r} has no sequences in {args.data}")
    train_pool, _, _ = style_split(loaded)
    budget = args.budget_sequences or len(train_pool)
    if budget < 1 or budget > len(train_pool):
        raise ConfigError(f"--budget-sequences must be in 1..{len(train_pool)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    finetune_personal(base, train_pool[:budget], args.identity, cfg, out_dir=out)
    _write_run_manifest(out, "finetune",
                        {**cfg.__dict__, "identity": args.identity, "budget": budget},
                        {"data": args.data, "checkpoint": args.checkpoint,
                         "config": args.config})
    print(f"fine-tuned model for {args.identity} under {out / 'checkpoints'}")
    return 0


def load_split_any(manifest: DatasetManifest):
    out = []
    for split in ("train", "val", "test"):
        out.extend(load_split(manifest, split))
    return out


def _prepare_condition(args, model: Denoiser):
    """Resolve the condition and frame count for sample/edit."""
    n_frames = args.frames
    audio = None
    if args.unconditional:
        if args.features:
            print("note: --unconditional ignores the feature file", file=sys.stderr)
    elif args.features:
        features = read_afea(args.features)
        if features.rate != model.config.fps:
            features = resample_features(features, model.config.fps)
        if n_frames is not None and n_frames != features.n_frames:
            raise ConfigError(
                f"--frames {n_frames} conflicts with {features.n_frames} feature frames")
        n_frames = features.n_frames
        audio = model.audio_project(features).data
    else:
        raise ConfigError("need --features, or --unconditional with a frame count")
    if n_frames is None:
        raise ConfigError("need --frames for unconditional sampling")
    return Condition(audio=audio, style_id=args.style), n_frames


def _run_sampling(args, keyframes: KeyframeConstraint | None) -> int:
    config_file = _load_config_file(args.config)
    model = Denoiser.load(args.checkpoint)
    schedule = _sampler_schedule(args, config_file)
    cond, n_frames = _prepare_condition(args, model)
    if keyframes is not None:
        keyframes.check_length(n_frames)
    guidance = args.guidance if args.guidance is not None else float(
        config_file.get("guidance", GUIDANCE_DEFAULT))
    cfg = SamplerConfig(guidance_scale=guidance, seed=args.seed,
                        variant=_variant(args, config_file), keyframes=keyframes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sequences = diffusion.sample_many(model, schedule, cond, n_frames, cfg,
                                      args.n_samples)
    for k, seq in enumerate(sequences):
        write_mseq(out / f"sample_{k:03d}.mseq", seq)
    command = "edit" if keyframes is not None else "sample"
    _write_run_manifest(out, command, {
        "guidance": guidance, "seed": args.seed, "n_samples": args.n_samples,
        "frames": n_frames, "unconditional": bool(args.unconditional),
        "style": args.style, "variant": cfg.variant.value,
        "diffusion_steps": schedule.num_steps,
    }, {"checkpoint": args.checkpoint, "features": args.features,
        "keyframes": getattr(args, "keyframes", None), "config": args.config})
    print(f"wrote {len(sequences)} sequence(s) to {out}")
    return 0


def cmd_sample(args) -> int:
    return _run_sampling(args, None)


def cmd_edit(args) -> int:
    if not args.keyframes:
        raise ConfigError("edit requires --keyframes")
    return _run_sampling(args, load_keyframes(args.keyframes))


def cmd_eval(args) -> int:
    mesh = TemplateMesh.load(args.template)
    preds = [read_mseq(p) for p in args.pred]
    gts = [read_mseq(p) for p in args.gt]
    report = metrics.MetricReport(scale=args.scale)
    if len(gts) == 1 and len(preds) > 1:
        # Several samples of one ground truth: per-sample errors plus diversity.
        for path, pred in zip(args.pred, preds):
            report.add(Path(path).name, **metrics.evaluate_pair(pred, gts[0], mesh))
        report.per_sequence[0]["div_e"] = metrics.div_e(preds)
    elif len(gts) == len(preds):
        for path, pred, gt in zip(args.pred, preds, gts):
            report.add(Path(path).name, **metrics.evaluate_pair(pred, gt, mesh))
    else:
        raise ConfigError(
            f"{len(preds)} predictions vs {len(gts)} ground-truth files: counts "
            f"must match, or give exactly one ground truth for a sample set")
    header, body = report.rows()
    out = Path(args.out)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(body)
    inputs = {f"pred{i}": p for i, p in enumerate(args.pred)}
    inputs.update({f"gt{i}": p for i, p in enumerate(args.gt)})
    inputs["template"] = args.template
    _write_run_manifest(out, "eval", {"scale": args.scale}, inputs)
    print(f"wrote metric report to {out}")
    return 0


def cmd_sweep_guidance(args) -> int:
    config_file = _load_config_file(args.config)
    model = Denoiser.load(args.checkpoint)
    schedule = _sampler_schedule(args, config_file)
    manifest = DatasetManifest.load(args.data)
    mesh = manifest.template()
    sequences = load_split(manifest, args.split)
    if not sequences:
        raise ConfigError(f"split {args.split!r} of {args.data} is empty")
    if args.max_sequences:
        sequences = sequences[:args.max_sequences]
    items = [
        metrics.SweepItem(name=f"{seq.identity}_{i:03d}",
                          audio=model.audio_project(seq.features).data,
                          gt=_as_motion(seq), style_id=None)
        for i, seq in enumerate(sequences)
    ]
    rows = metrics.guidance_sweep(model, schedule, items, mesh,
                                  n_samples=args.n_samples, seed=args.seed,
                                  variant=_variant(args, config_file),
                                  progress=lambda name: print(f"swept {name}"))
    out = Path(args.out)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["s", "lip_sync", "div_e"])
        for row in rows:
            writer.writerow([repr(row["s"]), repr(row["lip_sync"]), repr(row["div_e"])])
    _write_run_manifest(out, "sweep-guidance", {
        "n_samples": args.n_samples, "seed": args.seed, "split": args.split,
        "max_sequences": args.max_sequences, "diffusion_steps": schedule.num_steps,
    }, {"checkpoint": args.checkpoint, "data": args.data, "config": args.config})
    print(f"wrote guidance sweep to {out}")
    return 0


def _as_motion(seq):
    from .data import MotionSequence
    return MotionSequence(values=seq.motion, fps=seq.fps)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facemotion",
        description="Diffusion-based synthesis and editing of 3D facial vertex motion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--identities", type=int, default=12)
    p.add_argument("--seqs-per-identity", type=int, default=40)
    p.add_argument("--vertices", type=int, default=40)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--split", default=None, help="train,val,test identity counts")
    p.add_argument("--min-frames", type=int, default=90)
    p.add_argument("--max-frames", type=int, default=150)
    p.set_defaults(func=cmd_synth_data)

    for name, func in (("train", cmd_train), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} a model")
        p.add_argument("--data", required=True, help="dataset manifest")
        p.add_argument("--out", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--iterations", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                       default=None)
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint to continue from")
        else:
            p.add_argument("--checkpoint", required=True, help="base model")
            p.add_argument("--identity", required=True)
            p.add_argument("--budget-sequences", type=int, default=None)
        p.set_defaults(func=func)

    for name, func in (("sample", cmd_sample), ("edit", cmd_edit)):
        p = sub.add_parser(name, help=f"{name} motion from a trained model")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--features", default=None, help="AFEA feature file")
        p.add_argument("--frames", type=int, default=None)
        p.add_argument("--n-samples", type=int, default=1)
        p.add_argument("--guidance", type=float, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--unconditional", action="store_true")
        p.add_argument("--style", default=None)
        p.add_argument("--config", default=None)
        if name == "edit":
            p.add_argument("--keyframes", default=None, help="keyframe spec (JSON)")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="compute metrics for prediction/ground-truth pairs")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-guidance", help="diversity/accuracy trade-off sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int, default=8)
    p.add_argument("--max-sequences", type=int, default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_sweep_guidance)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FaceMotionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
