"""Command-line interface: train, eval, predict, sweep, fixtures.

Global flags on every command: ``--config`` (YAML), ``--seed``, ``--out``,
and repeatable ``--set key=value`` dotted overrides.  Precedence is
CLI flag > config file > default.  All outputs land under the configured
output directory.

Exit codes: 0 success; 1 runtime/validation error; 2 configuration error
(unknown key, bad value or file); 3 missing input file; 4 conflicting
command-line overrides.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import apply_overrides, load_config, parse_set_argument, validate_config
from .engine import load_state, predict, train
from .errors import ConfigError, ConflictingOverrideError, DiffspotError
from .evaluation import evaluate
from .robustness import DegradationSpec, plot_sweep, sweep, write_sweep_csv

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CONFLICT = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="YAML config file")
    parser.add_argument("--seed", type=int, default=None, help="override the seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument(
        "--set",
        dest="assignments",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable, dotted paths)",
    )


def _resolve_config(args: argparse.Namespace) -> dict:
    cfg = load_config(args.config)
    assignments = [parse_set_argument(a) for a in args.assignments]
    if args.seed is not None:
        assignments.append(("seed", args.seed))
    if args.out is not None:
        assignments.append(("out_dir", args.out))
    apply_overrides(cfg, assignments)
    return cfg


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args: argparse.Namespace) -> int:
    cfg = validate_config(_resolve_config(args))
    manifest_path = args.manifest or cfg["data"]["train_manifest"]
    if not manifest_path:
        raise ConfigError("no training manifest: set data.train_manifest or pass --manifest")
    manifest = D.load_manifest(manifest_path)
    out = _out_dir(cfg)
    state, history = train(manifest, cfg, out_dir=out)
    log_path = out / "training_log.jsonl"
    with open(log_path, "w") as f:
        for rec in history:
            f.write(json.dumps(rec.as_dict()) + "\n")
    print(f"trained {history[-1].epoch} epochs ({state.step} steps); "
          f"final loss {history[-1].loss:.6f}")
    print(f"checkpoints and log under {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    state = load_state(args.checkpoint)
    manifest_path = args.manifest or cfg["data"]["eval_manifest"]
    if not manifest_path:
        raise ConfigError("no eval manifest: set data.eval_manifest or pass --manifest")
    manifest = D.load_manifest(manifest_path)
    split = args.split or cfg["evaluation"]["split"]
    report = evaluate(
        manifest,
        state,
        split=split,
        threshold=cfg["evaluation"]["threshold"],
        micro_average=cfg["evaluation"]["micro_average"],
    )
    out = _out_dir(cfg)
    report.to_csv(out / "metrics.csv")
    report.to_json(out / "metrics.json")
    for s in report.subsets:
        pf1 = "n/a" if s.pixel_f1 is None else f"{s.pixel_f1:.4f}"
        print(f"{s.subset}: pixel_f1={pf1} image_acc={s.image_acc:.4f} (n={s.n_images})")
    avg = report.average
    pf1 = "n/a" if avg["pixel_f1"] is None else f"{avg['pixel_f1']:.4f}"
    print(f"AVG: pixel_f1={pf1} image_acc={avg['image_acc']:.4f}")
    print(f"reports under {out}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    state = load_state(args.checkpoint)
    image_path = Path(args.image)
    if not image_path.exists():
        raise FileNotFoundError(f"image not found: {image_path}")
    image = D.read_image(image_path)
    result = predict(state, image, threshold=cfg["evaluation"]["threshold"])
    print(f"{result.p_fake:.4f}")
    out = _out_dir(cfg)
    mask_path = Path(args.out_mask) if args.out_mask else out / f"{image_path.stem}_mask.png"
    prob_path = mask_path.with_name(mask_path.stem + "_prob.png")
    D.write_mask(mask_path, result.mask_binary.astype(np.uint8))
    prob = np.clip(np.rint(result.mask_prob * 255.0), 0, 255).astype(np.uint8)
    from PIL import Image

    Image.fromarray(prob, mode="L").save(prob_path)
    print(f"binary mask: {mask_path}")
    print(f"probability mask: {prob_path}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    state = load_state(args.checkpoint)
    manifest_path = args.manifest or cfg["data"]["eval_manifest"]
    if not manifest_path:
        raise ConfigError("no eval manifest: set data.eval_manifest or pass --manifest")
    manifest = D.load_manifest(manifest_path)
    split = args.split or cfg["evaluation"]["split"]
    specs = [
        DegradationSpec("gaussian_blur", tuple(int(v) for v in cfg["robustness"]["blur_levels"])),
        DegradationSpec("jpeg", tuple(int(v) for v in cfg["robustness"]["jpeg_levels"])),
    ]
    rows, _ = sweep(manifest, state, specs, split=split, threshold=cfg["evaluation"]["threshold"])
    out = _out_dir(cfg)
    write_sweep_csv(rows, out / "sweep.csv")
    plots = plot_sweep(rows, out)
    print(f"{len(rows)} rows -> {out / 'sweep.csv'}")
    print(f"{len(plots)} plots under {out}")
    return EXIT_OK


def cmd_fixtures(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = Path(args.dir) if args.dir else _out_dir(cfg)
    manifest = D.make_fixtures(out, n=args.n, size=args.size, rng=int(cfg["seed"]),
                               split=args.split)
    n_fake = sum(1 for e in manifest.entries if e.label == D.LABEL_FAKE)
    print(f"wrote {len(manifest)} samples ({n_fake} fake) under {out}")
    print(f"manifest: {out / 'manifest.jsonl'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffspot",
        description="Detection and localization of diffusion-generated image content.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a manifest")
    p_train.add_argument("--manifest", default=None, help="training manifest (JSONL)")
    _add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", default=None)
    p_eval.add_argument("--split", default=None, choices=[None, "train", "test"], help="manifest split")
    _add_common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_pred = sub.add_parser("predict", help="score one image and write its masks")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--image", required=True)
    p_pred.add_argument("--out-mask", default=None, help="path for the binary mask PNG")
    _add_common(p_pred)
    p_pred.set_defaults(func=cmd_predict)

    p_sweep = sub.add_parser("sweep", help="robustness sweep over blur/JPEG levels")
    p_sweep.add_argument("--checkpoint", required=True)
    p_sweep.add_argument("--manifest", default=None)
    p_sweep.add_argument("--split", default=None, choices=[None, "train", "test"])
    _add_common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_fix = sub.add_parser("fixtures", help="generate a synthetic desk-scale dataset")
    p_fix.add_argument("--dir", default=None, help="output directory (defaults to --out)")
    p_fix.add_argument("--n", type=int, default=16)
    p_fix.add_argument("--size", type=int, default=64)
    p_fix.add_argument("--split", default="train", choices=["train", "test"])
    _add_common(p_fix)
    p_fix.set_defaults(func=cmd_fixtures)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConflictingOverrideError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFLICT
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DiffspotError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
