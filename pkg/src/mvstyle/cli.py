"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import ablation, toy
from .backbone import build_backbone
from .imaging import ImageFormatError, load_image, resize, save_image
from .manifest import RunManifest
from .metrics import BlockMatchingFlow, SceneMismatchError, evaluate_scene, list_images
from .perceptual import ToyExtractor, ToyTokenEncoder
from .training import (
    Checkpoint,
    ConfigError,
    TrainConfig,
    apply_checkpoint,
    build_condition,
    build_dataset,
    load_config,
    resume,
    train,
)

log = logging.getLogger("mvstyle")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _models(profile: str):
    try:
        backbone = build_backbone(profile)
    except ValueError as exc:
        raise ConfigError("profile", str(exc)) from exc
    return backbone, ToyTokenEncoder(), ToyExtractor()


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig(resolution=32)
    overrides = {k: getattr(args, k) for k in ("steps", "seed", "resolution") if getattr(args, k, None) is not None}
    return cfg.replace(**overrides) if overrides else cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    if not args.style:
        raise ConfigError("style", "a style image is required")
    ds = build_dataset(args.scene, args.style, cfg.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    backbone, encoder, extractor = _models(cfg.profile)
    log_path = out / "losses.jsonl"
    if args.resume:
        ck = Checkpoint.load(args.resume)
        ck = resume(ck, ds, backbone, encoder, extractor, steps=args.steps, out_dir=out, log_path=log_path)
    else:
        log_path.unlink(missing_ok=True)
        ck = train(ds, cfg, backbone, encoder, extractor, out_dir=out, log_path=log_path)
    m = RunManifest(command=["train", *args.argv], config=ck.config.to_dict(), seed=ck.config.seed)
    m.add_inputs(args.scene, args.style, *([args.config] if args.config else []))
    m.add_artifacts(out, out / "checkpoint.npz", log_path)
    m.write(out)
    if ck.log:
        print(f"step {ck.log[-1]['step']}: total {ck.log[-1]['total']:.6g}")
    print(f"checkpoint written to {out / 'checkpoint.npz'}")
    return EXIT_OK


def _inputs(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        return list_images(p)
    if p.is_file():
        return [p]
    raise ConfigError("input", f"no such file or directory: {p}")


def cmd_stylize(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise ConfigError("checkpoint", f"file not found: {args.checkpoint}")
    ck = Checkpoint.load(args.checkpoint)
    backbone, encoder, _ = _models(ck.meta.get("profile", ""))
    condition = build_condition(ck.config, encoder, backbone)
    apply_checkpoint(ck, backbone, condition)
    style_path = Path(args.style or ck.meta.get("style_path", ""))
    if not style_path.is_file():
        raise ConfigError("style", f"style image not found: {style_path}")
    res = args.resolution or ck.config.resolution
    if res % backbone.profile.reduction:
        raise ConfigError("resolution", f"{res} is not divisible by {backbone.profile.reduction}")
    style = resize(load_image(style_path), (res, res))
    out = Path(args.out)
    paths = _inputs(args.input)
    with torch.no_grad():
        c = condition(style)
        for p in paths:
            img = resize(load_image(p), (res, res))
            save_image(backbone.stylize(img, c), out / (p.stem + ".png"))
    m = RunManifest(command=["stylize", *args.argv], config=ck.config.to_dict(), seed=ck.config.seed)
    m.add_inputs(args.checkpoint, style_path, *paths)
    m.add_artifacts(out, *[out / (p.stem + ".png") for p in paths])
    m.write(out)
    print(f"wrote {len(paths)} stylized image(s) to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    for name in ("stylized", "content"):
        if not Path(getattr(args, name)).is_dir():
            raise ConfigError(name, f"not a directory: {getattr(args, name)}")
    if not Path(args.style).is_file():
        raise ConfigError("style", f"style image not found: {args.style}")
    _, encoder, _ = _models(args.profile)
    style = load_image(args.style)
    report = evaluate_scene(args.stylized, args.content, style, encoder, BlockMatchingFlow(),
                            style_name=Path(args.style).stem)
    out = Path(args.out)
    pj, pc = report.write(out)
    m = RunManifest(command=["evaluate", *args.argv], config={"profile": args.profile})
    m.add_inputs(args.stylized, args.content, args.style)
    m.add_artifacts(out, pj, pc)
    m.write(out)
    print(f"CHD {report.mean_chd:.6f}  DSD {report.mean_dsd:.6f}  flow-L1 {report.mean_flow_l1:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    studies = ablation.STUDIES if args.study == "all" else (args.study,)
    results = []
    for study in studies:
        results += ablation.run_study(study, cfg, args.seeds, args.out, command=["ablate", *args.argv])
    ablation.write_table(results, args.out)
    print(ablation.format_table(results))
    for study, v in ablation.direction_votes(results).items():
        print(f"{study}: lower {v['metric']} with the term in {v['wins']}/{v['seeds']} seeds")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    scene, style = toy.write_scene(args.out, n=args.views, size=args.size, seed=args.seed)
    print(f"scene: {scene}\nstyle: {style}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvstyle", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="adapt LoRA + projector on one scene")
    p.add_argument("--config")
    p.add_argument("--scene", required=True)
    p.add_argument("--style")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stylize", help="stylize images with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--style", help="defaults to the style image recorded in the checkpoint")
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("evaluate", help="CHD / DSD / flow-L1 report for a stylized scene")
    p.add_argument("--stylized", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", default="toy-v1")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="toy-scale ablation studies")
    p.add_argument("--config")
    p.add_argument("--study", choices=(*ablation.STUDIES, "all"), default="all")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("make-toy", help="write a synthetic multi-view scene and style image")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    args.argv = argv[1:] if argv and argv[0] == args.command else argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SceneMismatchError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_RUNTIME
    except (FileNotFoundError, ImageFormatError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
