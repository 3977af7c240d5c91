"""Command-line entry points: gen-data, pretrain, adapt, eval, viz-deform, viz-gating.

Exit codes: 0 on success, 1 on an internal failure, 2 on bad input (missing files,
invalid config, refused overwrite).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .datamodel import ConfigError, DatasetError, load_config, load_dataset, read_rgb, to_uint8
from .deformation import warp_image
from .eval import MetricsError, evaluate_model, load_target_eval, markdown_table, write_metrics_csv
from .synthdata import SceneSpec, generate_benchmark, write_benchmark
from .trainer import (CheckpointError, load_checkpoint, load_model, run_adaptation, save_model,
                      source_pretrain)
from .usm import grayscale

log = logging.getLogger("panoda")

CLASS_NAMES = ("sky", "ground", "block", "pole", "blob")


class UsageError(Exception):
    """Bad input from the command line; reported with exit code 2."""


def _config(args, **extra):
    overrides = {k: v for k, v in extra.items() if v is not None}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, **overrides)


def _counts(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return parts


def _require_file(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} {path} not found")
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    spec = SceneSpec(seed=cfg.seed, num_classes=cfg.num_classes, height=cfg.height, width=cfg.width)
    bench = generate_benchmark(spec, args.counts)
    write_benchmark(bench, out)
    print(f"wrote {sum(args.counts)} images to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args, pretrain_iters=args.iters)
    ds = load_dataset(args.data, cfg.num_classes)

    def progress(it, losses):
        if it % 50 == 0:
            log.info("pretrain %d/%d %s", it, cfg.pretrain_iters,
                     " ".join(f"{k} {v:.4f}" for k, v in losses.items()))

    student, teacher = source_pretrain(cfg, ds, progress)
    save_model(student, args.out, cfg, teacher)
    print(f"saved pre-trained model to {args.out}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args, max_its=args.max_its, profile=args.profile)
    out = Path(args.out)
    resume = None
    if args.resume:
        last = out / "checkpoints" / "last.pt"
        _require_file(last, "checkpoint")
        resume = load_checkpoint(last)
        student = teacher = None
    else:
        student, teacher = load_model(_require_file(args.pretrained, "pretrained checkpoint"))
    ds = load_dataset(args.data, cfg.num_classes)

    def progress(state):
        if state.iteration % 50 == 0:
            row = state.ledger[-1]
            log.info("adapt %d/%d l_seg %s", state.iteration, cfg.max_its, row.get("l_seg"))

    if resume is not None:
        student, state = run_adaptation(resume.cfg, ds, out_dir=out, resume=resume, callback=progress)
    else:
        student, state = run_adaptation(cfg, ds, student, teacher, out_dir=out, callback=progress)
    save_model(student, out / "model.pt", state.cfg, state.teacher)
    print(f"adaptation finished after {state.iteration} iterations; model in {out / 'model.pt'}")
    return 0


def cmd_eval(args) -> int:
    images, labels = load_target_eval(args.data)
    reports = {}
    for spec in args.model:
        name, _, path = spec.rpartition("=")
        path = _require_file(path, "model")
        model, teacher = load_model(path)
        name = name or path.stem
        reports[name] = evaluate_model(model, images, labels, model.num_classes)
        if args.teacher:
            reports[name + "/teacher"] = evaluate_model(teacher.model, images, labels, model.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", reports)
    names = CLASS_NAMES if model.num_classes == len(CLASS_NAMES) else None
    table = markdown_table(reports, names)
    (out / "metrics.md").write_text(table)
    print(table, end="")
    return 0


def _load_images(paths, size=None):
    imgs = []
    for p in paths:
        img = read_rgb(_require_file(p, "input image"))
        if size is not None and img.shape[:2] != size:
            img = np.asarray(Image.fromarray(to_uint8(img)).resize((size[1], size[0]), Image.BILINEAR)) / 255.0
        imgs.append(torch.from_numpy(img).permute(2, 0, 1).float()[None])
    return imgs


def _to_pil(img: torch.Tensor) -> Image.Image:
    return Image.fromarray(to_uint8(img[0].permute(1, 2, 0).numpy()))


def _draw_field(panel: Image.Image, phi: torch.Tensor, scale: int, step: int = 8) -> None:
    """Arrows (dx, dy) on a coarse grid, drawn in place on an upscaled panel."""
    draw = ImageDraw.Draw(panel)
    dx, dy = phi[0, 0].numpy(), phi[0, 1].numpy()
    h, w = dx.shape
    for y in range(step // 2, h, step):
        for x in range(step // 2, w, step):
            x0, y0 = (x + 0.5) * scale, (y + 0.5) * scale
            x1, y1 = x0 + dx[y, x] * scale, y0 + dy[y, x] * scale
            draw.line([(x0, y0), (x1, y1)], fill=(255, 255, 0), width=1)
            draw.ellipse([x1 - 1, y1 - 1, x1 + 1, y1 + 1], fill=(255, 0, 0))


def deform_panels(x, ref, phi, scale: int = 2) -> Image.Image:
    """One strip: moving | fixed | moved | moving with the field drawn as arrows."""
    moved = warp_image(x, phi)
    h, w = x.shape[2:]
    panels = [_to_pil(t).resize((w * scale, h * scale), Image.NEAREST) for t in (x, ref, moved, x)]
    _draw_field(panels[3], phi, scale)
    strip = Image.new("RGB", (4 * w * scale, h * scale))
    for i, panel in enumerate(panels):
        strip.paste(panel, (i * w * scale, 0))
    return strip


def cmd_viz_deform(args) -> int:
    path = _require_file(args.checkpoint, "checkpoint")
    state = load_checkpoint(path)
    if state.F is None:
        raise UsageError(f"{path} has no deformation network (run without USM)")
    size = (state.cfg.height, state.cfg.width)
    moving = _load_images(args.inputs, size)
    fixed = _load_images([args.fixed], size)[0] if args.fixed else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for p, x in zip(args.inputs, moving):
            ref = x if fixed is None else fixed
            phi, _ = state.F.fields(grayscale(x), grayscale(ref))
            deform_panels(x, ref, phi).save(out / f"{Path(p).stem}_deform.png")
    print(f"wrote {len(moving)} images to {out}")
    return 0


def heat_map(weight: np.ndarray) -> np.ndarray:
    """Blue (0) to red (1) color map for a weight map in [0, 1]; returns H x W x 3 floats."""
    w = np.clip(weight, 0.0, 1.0)
    return np.stack([w, 1.0 - np.abs(2.0 * w - 1.0), 1.0 - w], axis=-1)


def cmd_viz_gating(args) -> int:
    path = _require_file(args.checkpoint, "checkpoint")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = load_checkpoint(path).student if "opt_S" in payload else load_model(path)[0]
    model.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for p, x in zip(args.inputs, _load_images(args.inputs)):
            w_pan = model(x).gate[0, 1].numpy()
            img = x[0].permute(1, 2, 0).numpy()
            blend = (1 - args.opacity) * img + args.opacity * heat_map(w_pan)
            Image.fromarray(to_uint8(blend)).save(out / f"{Path(p).stem}_gate.png")
    print(f"wrote {len(args.inputs)} heat maps to {out}")
    return 0


def cmd_viz(args) -> int:
    return cmd_viz_deform(args) if args.what == "deform" else cmd_viz_gating(args)


# ---------------------------------------------------------------------------
# parser

def _add_config(p, seed=True):
    p.add_argument("--config", help="config file of 'key = value' lines")
    if seed:
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")


def _add_viz_args(p):
    p.add_argument("--checkpoint", required=True, help="run checkpoint (deform) or model file (gating)")
    p.add_argument("--inputs", nargs="+", required=True, help="input PNG images")
    p.add_argument("--fixed", help="panoramic reference image for deform (default: the input itself)")
    p.add_argument("--out", required=True, help="output directory for PNG files")
    p.add_argument("--opacity", type=float, default=0.6, help="heat-map opacity for gating")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panoda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic benchmark")
    _add_config(p)
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--counts", type=_counts, default=(50, 50, 50),
                   help="images per domain as PIN,PAN,TARGET (default 50,50,50)")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="source-only pre-training")
    _add_config(p)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--iters", type=int, help="pre-training iterations (overrides the config)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="run the adaptation loop")
    _add_config(p)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--pretrained", help="pre-trained model file")
    p.add_argument("--out", required=True, help="run directory (ledger, checkpoints, model.pt)")
    p.add_argument("--max-its", type=int, help="adaptation iterations (overrides the config)")
    p.add_argument("--profile", choices=("desk", "published"), help="hyperparameter profile")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoints/last.pt")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="target mIoU and per-angle breakdown")
    p.add_argument("--data", required=True, help="dataset root with target_eval/labels")
    p.add_argument("--model", nargs="+", required=True, help="model files, optionally NAME=PATH")
    p.add_argument("--out", required=True, help="directory for metrics.csv and metrics.md")
    p.add_argument("--teacher", action="store_true", help="also evaluate the EMA teacher")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz-deform", help="moving/fixed/moved triptych and field arrows")
    _add_viz_args(p)
    p.set_defaults(func=cmd_viz_deform)

    p = sub.add_parser("viz-gating", help="heat map of the panoramic gate weight (red is high)")
    _add_viz_args(p)
    p.set_defaults(func=cmd_viz_gating)

    p = sub.add_parser("viz", help="either visualization, chosen with --what")
    p.add_argument("--what", choices=("deform", "gating"), required=True, help="which visualization")
    _add_viz_args(p)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "adapt" and not args.resume and not args.pretrained:
        parser.error("adapt needs --pretrained unless --resume is given")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, MetricsError, CheckpointError, FileNotFoundError) as exc:
        print(f"panoda {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"panoda {args.command}: internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
