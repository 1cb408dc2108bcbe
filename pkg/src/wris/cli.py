"""Command-line entry point.

Subcommands: gen-synth, train-step1, gen-pseudo, train-step2, eval, visualize.
Every RunConfig field is also a ``--key value`` flag; precedence is
preset < config file (``--config`` or $WRIS_CONFIG) < flags.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import CONFIG_ENV_VAR, ConfigError, RunConfig, desk_config, from_dict, structural_mismatch
from .data import DatasetError, SyntheticSceneSpec, dataset_digest, generate_synthetic, load_dataset

logger = logging.getLogger("wris")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

MAX_SKIPPED_FRACTION = 0.10
MAX_DEGENERATE_FRACTION = 0.50


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


class CommandFailed(Exception):
    """The command ran but its outcome is unacceptable; maps to exit code 1."""


# ------------------------------------------------------------------ config


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    group.add_argument("--config", help=f"JSON/YAML config file (default: ${CONFIG_ENV_VAR})")
    group.add_argument("--preset", choices=("full", "desk"), default=None, help="base values before file and flags")
    for f in fields(RunConfig):
        group.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", default=None, metavar=type(f.default).__name__.upper())


def _flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {f.name: getattr(args, f"cfg_{f.name}") for f in fields(RunConfig) if getattr(args, f"cfg_{f.name}") is not None}


def _file_values(args: argparse.Namespace) -> dict[str, Any]:
    path = args.config or os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return {}
    if not Path(path).exists():
        raise UsageError(f"config file {path} does not exist")
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        values = yaml.safe_load(text) or {}
    else:
        values = json.loads(text)
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return values


def resolve_config(args: argparse.Namespace, base: dict[str, Any] | None = None) -> tuple[RunConfig, set[str]]:
    """Build the effective config; also returns the keys set explicitly by file or flags."""
    if base is None:
        base = (desk_config() if args.preset == "desk" else RunConfig()).to_dict()
    explicit = {**_file_values(args), **_flag_overrides(args)}
    return from_dict({**base, **explicit}), set(explicit)


def _checkpoint_config(args: argparse.Namespace, path: str, kind: str | None = None) -> tuple[RunConfig, dict]:
    """Config for a command that loads a checkpoint: the snapshot, overlaid with explicit values.

    Presets are ignored; explicit values that contradict a structural key are
    refused unless ``--force``.
    """
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    _, header = load_checkpoint(path)
    if kind is not None and header["kind"] != kind:
        raise UsageError(f"{path} is a {header['kind']} checkpoint, expected {kind}")
    snapshot = header["config"]
    cfg, explicit = resolve_config(args, base=dict(snapshot))
    mismatch = structural_mismatch(cfg.to_dict(), snapshot)
    if mismatch:
        if not getattr(args, "force", False):
            raise UsageError(f"checkpoint snapshot disagrees on structural keys {mismatch}; pass --force to use the snapshot values")
        logger.warning("structural keys %s differ from the checkpoint; using the snapshot values", mismatch)
        cfg = cfg.replace(**{k: snapshot[k] for k in mismatch})
    return cfg, header


def _data_root(cfg: RunConfig) -> str:
    root = cfg.data_root
    if not root:
        raise UsageError("no dataset given (use --data_root)")
    if not Path(root).exists():
        raise UsageError(f"dataset root {root} does not exist")
    return root


# ------------------------------------------------------------------ commands


def cmd_gen_synth(args: argparse.Namespace) -> int:
    cfg, _ = resolve_config(args)
    spec = SyntheticSceneSpec(
        canvas=cfg.image_size,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        shapes=tuple(args.shapes.split(",")),
        colors=tuple(args.colors.split(",")),
        min_size=args.min_size,
        max_size=args.max_size,
        seed=cfg.seed,
    )
    splits = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    records, skipped = generate_synthetic(spec, args.out, {k: v for k, v in splits.items() if v > 0})
    total = sum(splits.values())
    print(f"scenes: {total - skipped}/{total} written, {skipped} skipped; objects: {len(records)}")
    print(f"digest: {dataset_digest(args.out)}")
    if total and skipped / total > MAX_SKIPPED_FRACTION:
        raise CommandFailed(f"{skipped} of {total} scenes skipped (> {MAX_SKIPPED_FRACTION:.0%})")
    return EXIT_OK


def cmd_train_step1(args: argparse.Namespace) -> int:
    from .train import train_step1

    cfg, _ = resolve_config(args)
    root = _data_root(cfg)
    out = args.out or cfg.out_dir
    _, history = train_step1(cfg, root, out, resume=args.resume)
    Path(out).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(out) / "step1_config.json")
    print(f"step1 done: final loss {history.losses()[-1]:.4f}; checkpoint {Path(out) / 'step1.ckpt'}")
    return EXIT_OK


def cmd_gen_pseudo(args: argparse.Namespace) -> int:
    from .pipeline import generate_pseudo_labels
    from .pseudo_labels import write_pseudo_labels
    from .train import load_step1

    cfg, _ = _checkpoint_config(args, args.checkpoint, "step1")
    root = _data_root(cfg)
    model = load_step1(args.checkpoint)
    records = load_dataset(root, split=args.split)
    if not records:
        raise UsageError(f"split {args.split!r} is empty")
    labels = generate_pseudo_labels(model, root, records, cfg.threshold, cfg.min_component_px, prms=not args.no_prms, seed=cfg.seed)
    write_pseudo_labels(args.out, labels)
    frac = float(np.mean([p.degenerate for p in labels]))
    print(f"pseudo labels: {len(labels)} written to {args.out}; degenerate fraction {frac:.3f}")
    if frac > MAX_DEGENERATE_FRACTION:
        raise CommandFailed(f"degenerate fraction {frac:.3f} exceeds {MAX_DEGENERATE_FRACTION}")
    return EXIT_OK


def cmd_train_step2(args: argparse.Namespace) -> int:
    from .train import train_step2

    cfg, _ = resolve_config(args)
    root = _data_root(cfg)
    if not Path(args.pseudo_dir).exists():
        raise UsageError(f"pseudo-label directory {args.pseudo_dir} does not exist")
    out = args.out or cfg.out_dir
    _, history = train_step2(cfg, root, args.pseudo_dir, out, resume=args.resume)
    Path(out).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(out) / "step2_config.json")
    print(f"step2 done: final loss {history.losses()[-1]:.4f}; checkpoint {Path(out) / 'step2.ckpt'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from .pipeline import evaluate_pseudo_dir, evaluate_response_masks, evaluate_segmentor
    from .train import load_step1, load_step2

    if bool(args.checkpoint) == bool(args.pseudo_dir):
        raise UsageError("give exactly one of --checkpoint or --pseudo_dir")
    if args.checkpoint:
        cfg, header = _checkpoint_config(args, args.checkpoint)
    else:
        cfg, _ = resolve_config(args)
        header = {"kind": "pseudo"}
    root = _data_root(cfg)
    records = load_dataset(root, split=args.split)
    with_gt = [r for r in records if r.gt_mask_path and (Path(root) / r.gt_mask_path).exists()]
    if not with_gt:
        raise CommandFailed(f"split {args.split!r} has no ground-truth masks to evaluate against")
    if len(with_gt) < len(records):
        logger.warning("%d of %d records lack a GT mask and are skipped", len(records) - len(with_gt), len(records))
    if header["kind"] == "step2":
        model = load_step2(args.checkpoint)
        report = evaluate_segmentor(model, root, with_gt)
    elif header["kind"] == "step1":
        model = load_step1(args.checkpoint)
        model.config = model.config.replace(threshold=cfg.threshold, min_component_px=cfg.min_component_px)
        report = evaluate_response_masks(model, root, with_gt)
    else:
        report = evaluate_pseudo_dir(args.pseudo_dir, root, with_gt)
    print(report.table())
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        report.write_jsonl(args.report)
        Path(args.report).with_suffix(".config.json").write_text(cfg.to_json() + "\n")
    return EXIT_OK


def cmd_visualize(args: argparse.Namespace) -> int:
    import torch
    from PIL import Image

    from .data import load_image
    from .metrics import to_image_resolution
    from .segmentor import predict_mask
    from .train import load_step1, load_step2

    for path in (args.checkpoint, args.seg_checkpoint):
        if path and not Path(path).exists():
            raise UsageError(f"checkpoint {path} does not exist")
    if not Path(args.image).exists():
        raise UsageError(f"image {args.image} does not exist")
    _checkpoint_config(args, args.checkpoint, "step1")
    model = load_step1(args.checkpoint)
    image = load_image("", args.image)
    size = model.config.image_size
    if tuple(image.shape[-2:]) != (size, size):
        raise UsageError(f"image is {tuple(image.shape[-2:])}, model expects {size}x{size}")
    heat = to_image_resolution(model.response_maps(image[None], [args.expression])[0].double().numpy(), (size, size))
    panels = [_to_uint8(image.permute(1, 2, 0).numpy()), heatmap_rgb(heat)]
    if args.seg_checkpoint:
        seg = load_step2(args.seg_checkpoint)
        with torch.no_grad():
            mask = predict_mask(seg(image[None], [args.expression]))[0].numpy()
        panels.append(np.repeat(mask[..., None].astype(np.uint8) * 255, 3, axis=2))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.concatenate(panels, axis=1)).save(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return (np.clip(x, 0.0, 1.0) * 255).round().astype(np.uint8)


def heatmap_rgb(values: np.ndarray) -> np.ndarray:
    """Min-max scaled map rendered black -> red -> yellow -> white."""
    lo, hi = float(values.min()), float(values.max())
    t = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    rgb = np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)], axis=-1)
    return _to_uint8(rgb)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wris", description="Weakly supervised referring image segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="render a synthetic referring-expression dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n_train", type=int, default=500)
    p.add_argument("--n_val", type=int, default=100)
    p.add_argument("--n_test", type=int, default=0)
    p.add_argument("--min_objects", type=int, default=1)
    p.add_argument("--max_objects", type=int, default=3)
    p.add_argument("--min_size", type=int, default=14)
    p.add_argument("--max_size", type=int, default=24)
    p.add_argument("--shapes", default="circle,square,triangle")
    p.add_argument("--colors", default="red,green,blue,yellow,purple")
    p.set_defaults(func=cmd_gen_synth, default_preset="desk")

    p = sub.add_parser("train-step1", help="train the response model from image-text pairs")
    p.add_argument("--out", help="output directory (default: out_dir)")
    p.add_argument("--resume", help="per-epoch checkpoint to continue from")
    p.set_defaults(func=cmd_train_step1)

    p = sub.add_parser("gen-pseudo", help="export pseudo masks from a Step-1 checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--no_prms", action="store_true", help="pick a random map per object instead")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_pseudo)

    p = sub.add_parser("train-step2", help="train the segmentor on pseudo masks")
    p.add_argument("--pseudo_dir", required=True)
    p.add_argument("--out", help="output directory (default: out_dir)")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train_step2)

    p = sub.add_parser("eval", help="score a checkpoint or pseudo masks against GT masks")
    p.add_argument("--checkpoint", help="step1 or step2 checkpoint")
    p.add_argument("--pseudo_dir")
    p.add_argument("--split", default="val")
    p.add_argument("--report", help="write per-sample JSONL report here")
    p.add_argument("--force", action="store_true", help="accept structural config mismatches")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="input | response heatmap | predicted mask")
    p.add_argument("--checkpoint", required=True, help="step1 checkpoint")
    p.add_argument("--seg_checkpoint", help="optional step2 checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--expression", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_visualize)

    for p in sub.choices.values():
        _add_config_flags(p)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.preset is None:
        args.preset = getattr(args, "default_preset", None)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CommandFailed as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures, including non-finite losses
        logger.debug("unhandled error", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
