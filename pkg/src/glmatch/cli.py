"""``glmatch`` command line: gen | train | match | eval.

Exit codes: 0 success, 1 I/O error, 2 usage, 3 numeric failure,
4 missing artifact, 5 empty input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import cv2
import numpy as np
import yaml

from .config import Config, ConfigError, load_config

log = logging.getLogger("glmatch")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISSING, EXIT_EMPTY = 0, 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _resolve_config(args) -> Config:
    try:
        cfg = load_config(args.config)
        overrides = {}
        for item in args.set or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            overrides[key] = yaml.safe_load(value)
        cfg = cfg.override(overrides) if overrides else cfg
    except (ConfigError, OSError, yaml.YAMLError, TypeError, ValueError) as exc:
        raise CliError(f"config: {exc}", EXIT_USAGE) from exc
    log.info("config hash %s", cfg.hash())
    return cfg


def _warp_config(cfg: Config):
    from .datagen import WarpConfig

    d = cfg.data
    return WarpConfig(
        size=d.size, max_rotation=d.max_rotation, scale_range=tuple(d.scale_range), max_translation=d.max_translation,
        max_perspective=d.max_perspective, ratio_range=tuple(d.ratio_range), fragment_prob=d.fragment_prob,
    )


def pair_seed(master: int, k: int) -> int:
    return int(np.random.SeedSequence([master, k]).generate_state(1)[0])


def generate_dataset(count: int, seed: int, cfg: Config):
    """(kept records, discarded count) for ``count`` generated pairs."""
    from .datagen import filter_pairs, generate_synthetic_pair

    wc = _warp_config(cfg)
    kept, discarded = [], 0
    for k in range(count):
        rec = generate_synthetic_pair(seed=pair_seed(seed, k), cfg=wc)
        if filter_pairs(rec, cfg.data.min_matches, cfg.data.max_overlap, tuple(cfg.data.ratio_range)):
            kept.append(rec)
        else:
            discarded += 1
    return kept, discarded


def cmd_gen(args) -> int:
    from .datagen import write_manifest

    cfg = _resolve_config(args)
    if args.size is not None:
        cfg = cfg.override({"data.size": args.size})
    kept, discarded = generate_dataset(args.count, args.seed, cfg)
    out = Path(args.out)
    try:
        write_manifest(kept, out / "manifest.jsonl")
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}", EXIT_IO) from exc
    print(f"generated {args.count} pairs: kept {len(kept)}, discarded {discarded} -> {out / 'manifest.jsonl'}")
    return EXIT_OK


def _load_records(manifest: str):
    from .datagen import ManifestError, read_manifest

    path = Path(manifest)
    if not path.exists():
        raise CliError(f"manifest {path} not found", EXIT_MISSING)
    try:
        records = [r.load(path.parent) for r in read_manifest(path)]
    except ManifestError as exc:
        raise CliError(f"{path}: {exc}", EXIT_USAGE) from exc
    except FileNotFoundError as exc:
        raise CliError(f"image {exc} referenced by {path} not found", EXIT_MISSING) from exc
    if not records:
        raise CliError(f"manifest {path} holds no records", EXIT_EMPTY)
    return records


def _load_model(checkpoint: str):
    from .trainer import load_checkpoint

    if not Path(checkpoint).exists():
        raise CliError(f"checkpoint {checkpoint} not found", EXIT_MISSING)
    model, _ = load_checkpoint(checkpoint)
    return model


def cmd_train(args) -> int:
    from .trainer import NonFiniteLossError, train

    cfg = _resolve_config(args)
    records = _load_records(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    try:
        train(records, cfg, out_dir=out, log_path=out / "train_log.csv")
    except NonFiniteLossError as exc:
        raise CliError(f"training aborted: {exc}; last good checkpoint kept in {out}", EXIT_NUMERIC) from exc
    print(f"trained on {len(records)} pairs; checkpoint {out / 'last.pt'} (config {cfg.hash()})")
    return EXIT_OK


def _read_image(path: str):
    img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise CliError(f"cannot read image {path}", EXIT_MISSING)
    return img


def _read_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CliError(f"{path} not found", EXIT_MISSING) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc.msg})", EXIT_USAGE) from exc


def cmd_match(args) -> int:
    from .eval import precision_recall_f
    from .losses import MatchGroundTruth
    from .trainer import match_images
    from .viz import overlay_strokes, render_overlay

    model = _load_model(args.checkpoint)
    img_a, img_b = _read_image(args.image_a), _read_image(args.image_b)
    lines_a = np.asarray(_read_json(args.lines_a), dtype=np.float64).reshape(-1, 4)
    lines_b = np.asarray(_read_json(args.lines_b), dtype=np.float64).reshape(-1, 4)
    result = match_images(img_a, img_b, lines_a, lines_b, model)
    payload = result.to_dict()
    gt = MatchGroundTruth.from_dict(_read_json(args.gt)) if args.gt else None
    if gt is not None:
        payload["metrics"] = precision_recall_f(result, gt).to_dict()
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    if args.overlay:
        canvas = render_overlay(img_a, img_b, overlay_strokes(lines_a, lines_b, result, gt))
        cv2.imwrite(args.overlay, canvas)
    print(f"{len(result.matches)} matches -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .eval import (
        ablation_run, aggregate, default_sweep_values, evaluate_record, plot_sweep,
        robustness_sweep, write_metrics, write_table,
    )
    from .trainer import matcher_for

    records = _load_records(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    if args.checkpoint:
        matcher = matcher_for(_load_model(args.checkpoint))
        metrics = aggregate(evaluate_record(matcher, r) for r in records)
        write_metrics(metrics, out / "metrics.json", out / "metrics.csv")
        summary["metrics"] = metrics.to_dict()
        for axis in args.sweep or []:
            values = args.values if args.values else default_sweep_values(axis)
            res = robustness_sweep(matcher, records, axis, values)
            (out / f"sweep_{axis}.json").write_text(json.dumps(res.to_dict(), indent=2) + "\n")
            plot_sweep(res, out / f"sweep_{axis}.png")
            summary[f"sweep_{axis}"] = res.to_dict()
    if args.variant:
        variants, rows = {}, []
        for item in args.variant:
            label, _, path = item.partition("=")
            if len(label) != 3 or set(label) - {"Y", "N"} or not path:
                raise CliError(f"--variant expects e.g. YYN=path/to/ckpt.pt, got {item!r}", EXIT_USAGE)
            variants[label] = matcher_for(_load_model(path))
            rows.append(dict(zip(("feature_loss", "topk_graph_learning", "glpooling"), (c == "Y" for c in label))))
        table = ablation_run(records, variants, rows)
        write_table(table, out / "ablation.csv")
        summary["ablation"] = table
    if not summary:
        raise CliError("nothing to evaluate: pass --checkpoint and/or --variant", EXIT_USAGE)
    if "metrics" in summary:
        m = summary["metrics"]
        print(f"P {m['precision']:.2f}  R {m['recall']:.2f}  F {m['f_measure']:.2f}  ({len(records)} pairs)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glmatch", description="Line segment matching with graph convolution and optimal transport")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")

    g = sub.add_parser("gen", help="generate synthetic image pairs and a manifest")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--size", type=int, help="image side in pixels")
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    common(t)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("match", help="match the lines of two images")
    m.add_argument("--image-a", required=True)
    m.add_argument("--image-b", required=True)
    m.add_argument("--lines-a", required=True, help="JSON list of [x0, y0, x1, y1]")
    m.add_argument("--lines-b", required=True)
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True, help="match JSON")
    m.add_argument("--overlay", help="optional overlay PNG")
    m.add_argument("--gt", help="ground-truth JSON (pairs, unmatched_a, unmatched_b)")
    m.set_defaults(func=cmd_match)

    e = sub.add_parser("eval", help="metrics, robustness sweeps and ablation table")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--out", required=True)
    e.add_argument("--sweep", action="append", choices=["rotation", "blur", "scale"])
    e.add_argument("--values", type=float, nargs="+", help="sweep values (default: the standard range for the axis)")
    e.add_argument("--variant", action="append", metavar="YYN=CKPT", help="ablation variant: toggles feature_loss/topk/glpool")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"glmatch {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
