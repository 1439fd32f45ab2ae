"""Command-line entry point: ``gsdmae <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes its artifacts under ``<output-dir>/<command>/``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import textwrap
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .eval import SCALES, FeatureSet, KnnReport, extract_features, multiscale_eval, report_from_features
from .imaging import RasterImage, build_targets, load_image, make_input, random_scaled_crop, resample, save_image
from .model import build_model, param_count, vanilla_param_count
from .patching import patchify
from .pipeline import (CheckpointError, load_checkpoint, pretrain, read_manifest, state_from_record,
                       synth_dataset)
from .posenc import positional_rows

log = logging.getLogger("gsdmae")

COMMANDS = ("pretrain", "extract", "knn-eval", "targets-preview", "posenc-dump", "param-report",
            "synth-data")


class UsageError(Exception):
    """Bad arguments, unknown config keys or missing inputs (exit status 2)."""


def _keys_epilog() -> str:
    keys = config_mod.override_keys()
    body = textwrap.fill(", ".join(keys), width=88, initial_indent="  ", subsequent_indent="  ")
    return f"config override keys (use --set KEY=VALUE):\n{body}"


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default="toy",
                        help=f"preset name {sorted(config_mod.PRESETS)} or YAML file (default: toy)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    parser.add_argument("--output-dir", default="runs", help="artifacts go to <output-dir>/<command>/")
    parser.add_argument("--seed", type=int, default=None, help="single source of randomness")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="gsdmae", description=__doc__, epilog=_keys_epilog(),
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=_keys_epilog(), formatter_class=fmt)
        _common(p)
        return p

    p = add("synth-data", "render a labelled synthetic scene dataset and its manifest")
    p.add_argument("--n-scenes", type=int, default=200)
    p.add_argument("--base-size", type=int, default=160)
    p.add_argument("--n-classes", type=int, default=2)
    p.add_argument("--gsd-range", type=float, nargs=2, default=(0.3, 1.2), metavar=("MIN", "MAX"))

    p = add("pretrain", "pretrain on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = add("extract", "write frozen-encoder FeatureSet files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scales", type=float, nargs="+", default=[100.0])
    p.add_argument("--pooling", choices=("mean", "cls"), default="mean")

    p = add("knn-eval", "kNN accuracy from FeatureSet files or from a checkpoint + manifests")
    p.add_argument("--train", help="training FeatureSet (.npz)")
    p.add_argument("--val", nargs="+", help="validation FeatureSet file(s)")
    p.add_argument("--checkpoint")
    p.add_argument("--train-manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--dataset-name", default=None)
    p.add_argument("--scales", type=float, nargs="+", default=list(SCALES))
    p.add_argument("--k", type=int, nargs="+", default=[20])
    p.add_argument("--pooling", choices=("mean", "cls"), default="mean")

    p = add("targets-preview", "write low/high/blur/reconstruction panels for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--gsd", type=float, required=True)
    p.add_argument("--checkpoint", default=None, help="also render model predictions")

    p = add("posenc-dump", "write a positional-encoding grid to CSV")
    p.add_argument("--grid-side", type=int, default=None)
    p.add_argument("--gsd", type=float, default=None, help="omit for the standard encoding")
    p.add_argument("--embed-dim", type=int, default=None)

    p = add("param-report", "print per-module parameter counts and the vanilla-decoder comparison")
    p.add_argument("--vanilla-depth", type=int, default=8)
    return parser


def _config(args) -> config_mod.TrainConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        return config_mod.load_config(args.config, overrides)
    except KeyError as exc:
        raise UsageError(f"unknown config key {exc.args[0]!r}; valid keys: "
                         f"{', '.join(config_mod.override_keys())}") from None
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _require(path, what) -> Path:
    if path is None:
        raise UsageError(f"missing {what}")
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} {path} does not exist")
    return path


def _load_model(path):
    try:
        record = load_checkpoint(_require(path, "checkpoint"))
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    return state_from_record(record).model, Path(path).stem


def cmd_synth_data(args, cfg, out: Path) -> None:
    seed = cfg.seed if args.seed is None else args.seed
    m = synth_dataset(args.n_scenes, args.base_size, seed, out, n_classes=args.n_classes,
                      gsd_range=tuple(args.gsd_range))
    print(f"wrote {len(m)} scenes to {out / 'manifest.csv'}")


def cmd_pretrain(args, cfg, out: Path) -> None:
    if args.steps is not None:
        cfg.steps = args.steps
    manifest = read_manifest(_require(args.manifest, "manifest"))
    state = pretrain(cfg, manifest, out, resume_from=args.resume and _require(args.resume, "checkpoint"))
    print(f"trained to step {state.step}; log {out / 'train_log.csv'}, checkpoint {out / 'final.ckpt'}")


def cmd_extract(args, cfg, out: Path) -> None:
    model, _ = _load_model(args.checkpoint)
    manifest = read_manifest(_require(args.manifest, "manifest"))
    for s in args.scales:
        if s not in SCALES:
            raise UsageError(f"scale {s} not in {SCALES}")
        fs = extract_features(model, manifest, s, args.pooling)
        if fs is None:
            continue
        path = out / f"{manifest.name}_{s:g}.npz"
        fs.save(path)
        print(f"wrote {path}")


def cmd_knn_eval(args, cfg, out: Path) -> None:
    if args.train:
        train = FeatureSet.load(_require(args.train, "train features"))
        if not args.val:
            raise UsageError("--val is required with --train")
        vals = [FeatureSet.load(_require(v, "val features")) for v in args.val]
        if args.dataset_name:
            for fs in [train, *vals]:
                fs.dataset_name = args.dataset_name
        report = report_from_features(train, vals, args.k, checkpoint=Path(args.train).stem)
    else:
        model, ckpt = _load_model(args.checkpoint)
        train_m = read_manifest(_require(args.train_manifest, "train manifest"))
        val_m = read_manifest(_require(args.val_manifest, "val manifest"))
        name = args.dataset_name or val_m.name
        report = multiscale_eval(model, {name: (train_m, val_m)}, args.k, tuple(args.scales), ckpt,
                                 args.pooling)
    path = out / "knn_report.csv"
    report.write_csv(path)
    for r in report.rows:
        print(f"{r['dataset']}\t{r['scale_pct']:g}%\tk={r['k']}\t{r['accuracy']:.4f}")
    print(f"wrote {path}")


def _display_signed(x: np.ndarray) -> np.ndarray:
    return 0.5 + x / (2 * max(np.abs(x).max(), 1e-8))


def cmd_targets_preview(args, cfg, out: Path) -> None:
    img = load_image(_require(args.image, "image"), args.gsd)
    if min(img.shape[:2]) < cfg.hr_crop:
        raise UsageError(f"image {img.height}x{img.width} is smaller than hr_crop={cfg.hr_crop}")
    hr = random_scaled_crop(img, cfg.hr_crop, [cfg.seed, 0])
    t = build_targets(hr, cfg.input_size, cfg.r_low, cfg.r_high_low)
    inp = make_input(hr, cfg.input_size)
    low_up = resample(t.low, cfg.hr_crop, cfg.hr_crop)
    panels = {
        "hr": hr.pixels, "input": inp.pixels, "low": t.low.pixels, "blur_hr": t.blur_hr.pixels,
        "high": _display_signed(t.high.pixels), "high_plus_blur": t.high.pixels + t.blur_hr.pixels,
        "low_plus_high": low_up.pixels + t.high.pixels,
    }
    if args.checkpoint:
        model, _ = _load_model(args.checkpoint)
        patches = torch.as_tensor(patchify(inp, model.encoder.cfg.patch_size).patches[None],
                                  dtype=torch.float32)
        n = patches.shape[1]
        with torch.no_grad():
            low, high = model(patches, torch.arange(n)[None], [inp.gsd])
        low, high = low[0].double().numpy(), high[0].double().numpy()
        panels["pred_low"] = low
        panels["pred_high"] = _display_signed(high)
        panels["pred_sum"] = resample(RasterImage(low, inp.gsd), cfg.hr_crop, cfg.hr_crop).pixels + high
    for name, px in panels.items():
        save_image(px, out / f"{name}.png")
    print(f"wrote {len(panels)} panels to {out}")


def cmd_posenc_dump(args, cfg, out: Path) -> None:
    side = args.grid_side or cfg.encoder.grid_side
    dim = args.embed_dim or cfg.encoder.embed_dim
    try:
        values = positional_rows(side, dim, args.gsd, reference_gsd=cfg.encoder.reference_gsd,
                                 orientation=cfg.encoder.gsd_factor_orientation)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tag = "standard" if args.gsd is None else f"gsd{args.gsd:g}"
    path = out / f"posenc_{tag}_side{side}_dim{dim}.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token", "row", "col"] + [f"f{i}" for i in range(dim)])
        for t, row in enumerate(values):
            w.writerow([t, t // side, t % side] + [repr(float(v)) for v in row])
    print(f"wrote {path}")


def cmd_param_report(args, cfg, out: Path) -> None:
    model = build_model(cfg, device="meta")
    counts = param_count(model)
    vanilla = vanilla_param_count(cfg, args.vanilla_depth)
    rows = [(k, v) for k, v in counts.items()]
    rows += [(f"vanilla{args.vanilla_depth}.decoder.total", vanilla["decoder.total"]),
             (f"vanilla{args.vanilla_depth}.total", vanilla["total"])]
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v:>14,d}")
    smaller = counts["total"] < vanilla["total"]
    print(f"laplacian-decoder total {counts['total']:,} vs {args.vanilla_depth}-block MAE decoder total "
          f"{vanilla['total']:,}: {'smaller' if smaller else 'NOT smaller'}")
    with (out / "param_report.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["module", "params"])
        w.writerows(rows)


HANDLERS = {
    "synth-data": cmd_synth_data, "pretrain": cmd_pretrain, "extract": cmd_extract,
    "knn-eval": cmd_knn_eval, "targets-preview": cmd_targets_preview,
    "posenc-dump": cmd_posenc_dump, "param-report": cmd_param_report,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(args.output_dir) / args.command
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"gsdmae {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"gsdmae {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> None:
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
