"""``xcos`` command line: data synthesis, training, calibration, scoring and export.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, TrainConfig
from .data import (DataError, ImageRecord, PairRecord, load_dataset,
                   load_pair_list, read_image, sample_pairs, save_dataset, split_holdout, synth_identities,
                   write_pair_list)
from .explain import explain_export
from .metric import VARIANTS
from .training import MetricsLog, new_xcos_model, train_teacher, train_xcos

logger = logging.getLogger("xcos")

IMAGES = "images"
CALIB_PAIRS = "calib_pairs.txt"
TEST_PAIRS = "test_pairs.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="overrides the config's rng seeds")
    p.add_argument("--config", type=Path, default=None, help="JSON run config")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="xcos", description="Explainable cosine face verification.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic identity dataset")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-teacher", parents=[common], help="train the global-cosine teacher")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-xcos", parents=[common], help="train the xCos model against a teacher")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train_xcos)

    p = sub.add_parser("calibrate", parents=[common], help="correlated attention and decision thresholds")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--pairs", type=Path, default=None, help=f"defaults to <data>/{CALIB_PAIRS}")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("verify", parents=[common], help="score one image pair")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("image_a", type=Path)
    p.add_argument("image_b", type=Path)
    p.add_argument("--variant", choices=VARIANTS, default="learned")
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("explain", parents=[common], help="export S/W maps for pairs")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--teacher", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--pairs", type=Path, default=None, help=f"defaults to <data>/{TEST_PAIRS}")
    p.add_argument("--variant", choices=VARIANTS, default="learned")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--limit", type=int, default=8)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", parents=[common], help="U/P/L ablation against the teacher")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--pairs", type=Path, default=None, help=f"defaults to <data>/{TEST_PAIRS}")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("occlusion-eval", parents=[common], help="accuracy under free-form masks")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--pairs", type=Path, default=None, help=f"defaults to <data>/{TEST_PAIRS}")
    p.add_argument("--coverages", default="0,0.1,0.3")
    p.add_argument("--variant", choices=VARIANTS, default="learned")
    p.set_defaults(func=cmd_occlusion_eval)
    return parser


# helpers

def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, synth=dataclasses.replace(cfg.synth, rng_seed=args.seed),
            train=dataclasses.replace(cfg.train, rng_seed=args.seed))
    return cfg


def _with_epochs(train: TrainConfig, epochs: int | None) -> TrainConfig:
    if epochs is None:
        return train
    if epochs < 1:
        raise ConfigError(f"--epochs must be positive, got {epochs}")
    drops = tuple(e for e in train.lr_drop_epochs if e <= epochs)
    return dataclasses.replace(train, total_epochs=epochs, lr_drop_epochs=drops)


def _train_split(cfg: RunConfig, data: Path) -> list[ImageRecord]:
    train, _ = split_holdout(load_dataset(data / IMAGES), cfg.eval.holdout_per_identity)
    return train


def _pairs(args, default: str) -> list[PairRecord]:
    path = args.pairs or args.data / default
    return load_pair_list(path, args.data / IMAGES)


def _load(path: Path, kind: str) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if ckpt.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {ckpt.kind}")
    return ckpt


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _threshold(args, ckpt: Checkpoint, cfg: RunConfig) -> float:
    if args.threshold is not None:
        return args.threshold
    return float(ckpt.thresholds.get(args.variant, cfg.eval.threshold))


# commands

def cmd_synth_data(args, cfg: RunConfig) -> None:
    records = synth_identities(cfg.synth)
    save_dataset(records, args.out / IMAGES)
    train, held = split_holdout(records, cfg.eval.holdout_per_identity)
    rng = np.random.default_rng(cfg.synth.rng_seed + 1)
    n_c, n_t = cfg.eval.calib_pairs, cfg.eval.test_pairs
    write_pair_list(args.out / CALIB_PAIRS, sample_pairs(train, n_c, n_c, rng), args.out / IMAGES)
    write_pair_list(args.out / TEST_PAIRS, sample_pairs(held, n_t, n_t, rng), args.out / IMAGES)
    _write_json(args.out / "config.json", cfg.to_dict())
    print(f"wrote {len(records)} images ({len(train)} train / {len(held)} held out) to {args.out}")


def cmd_train_teacher(args, cfg: RunConfig) -> None:
    train = _with_epochs(cfg.train, args.epochs)
    records = _train_split(cfg, args.data)
    teacher, _ = train_teacher(records, train, cfg.margin, cfg.backbone,
                               on_epoch=MetricsLog(args.out / "teacher_log.csv"))
    save_checkpoint(Checkpoint(teacher, cfg.margin, train, cfg.attention), args.out / "teacher.ckpt")
    print(f"teacher checkpoint: {args.out / 'teacher.ckpt'}")


def cmd_train_xcos(args, cfg: RunConfig) -> None:
    train = _with_epochs(cfg.train, args.epochs)
    teacher = _load(args.teacher, "teacher").model
    records = _train_split(cfg, args.data)
    model = new_xcos_model(records, cfg.backbone, train, teacher)
    model, _ = train_xcos(records, teacher, train, cfg.margin, cfg.backbone,
                          on_epoch=MetricsLog(args.out / "xcos_log.csv"), model=model)
    save_checkpoint(Checkpoint(model, cfg.margin, train, cfg.attention), args.out / "xcos.ckpt")
    print(f"xcos checkpoint: {args.out / 'xcos.ckpt'}")


def cmd_calibrate(args, cfg: RunConfig) -> None:
    ckpt = _load(args.model, "xcos")
    teacher = _load(args.teacher, "teacher").model
    pairs = _pairs(args, CALIB_PAIRS)
    table = ev.calibrate(ckpt.model, teacher, pairs)
    a, b, labels = ev.pair_images(pairs)
    thresholds = {}
    for variant in VARIANTS:
        scores, _, _ = ev.xcos_scores(ckpt.model, a, b, variant, table, ckpt.attention.clip_negative)
        thresholds[variant] = ev.best_threshold(scores, labels)[0]
    ckpt = dataclasses.replace(ckpt, calibration=table, thresholds=thresholds)
    save_checkpoint(ckpt, args.out / "xcos.ckpt")
    _write_json(args.out / "calibration.json", {**table.to_dict(), "thresholds": thresholds})
    print(f"calibrated on {len(pairs)} pairs; thresholds "
          + ", ".join(f"{k}={v:.4f}" for k, v in thresholds.items()))


def cmd_verify(args, cfg: RunConfig) -> None:
    ckpt = _load(args.model, "xcos")
    # identities unknown here, so the label is a placeholder
    a, b = (ImageRecord(-1, read_image(p), p.stem) for p in (args.image_a, args.image_b))
    pair = PairRecord(a, b, False)
    threshold = _threshold(args, ckpt, cfg)
    record = explain_export(pair, ckpt.model, args.variant, threshold, args.out,
                            ckpt.calibration, clip_negative=ckpt.attention.clip_negative)
    print(f"xcos={record.xcos:.6f} threshold={threshold:.6f} "
          f"{'same' if record.decision else 'different'}")


def cmd_explain(args, cfg: RunConfig) -> None:
    ckpt = _load(args.model, "xcos")
    teacher = _load(args.teacher, "teacher").model if args.teacher else None
    threshold = _threshold(args, ckpt, cfg)
    pairs = _pairs(args, TEST_PAIRS)[: max(args.limit, 0)]
    for pair in pairs:
        r = explain_export(pair, ckpt.model, args.variant, threshold, args.out, ckpt.calibration,
                           teacher, ckpt.attention.clip_negative)
        print(f"{r.pair_id}\t{r.xcos:.6f}\t{int(r.decision)}")


def cmd_eval(args, cfg: RunConfig) -> None:
    ckpt = _load(args.model, "xcos")
    if ckpt.calibration is None:
        raise CheckpointError(f"{args.model}: not calibrated; run `xcos calibrate` first")
    teacher = _load(args.teacher, "teacher").model
    pairs = _pairs(args, TEST_PAIRS)
    seed = cfg.train.rng_seed
    reports = ev.ablation_run(ckpt.model, ckpt.calibration, pairs, cfg.eval.k_folds, seed,
                              ckpt.attention.clip_negative)
    a, b, labels = ev.pair_images(pairs)
    t_scores = ev.teacher_scores(teacher, a, b)
    refs = ["\t".join(ev.pair_key(p)) for p in pairs]
    reports.append(ev.best_threshold_accuracy(
        [ev.ScoredPair(v, l, r) for v, l, r in zip(t_scores, labels, refs)], cfg.eval.k_folds, seed, "teacher"))
    correlation = {}
    for variant in VARIANTS:
        scores, _, _ = ev.xcos_scores(ckpt.model, a, b, variant, ckpt.calibration,
                                      ckpt.attention.clip_negative)
        correlation[variant] = ev.pearson_r(scores, t_scores)
    table = ev.reports_table(reports)
    (args.out).mkdir(parents=True, exist_ok=True)
    (args.out / "eval.txt").write_text(table, encoding="utf-8")
    _write_json(args.out / "eval.json", {"reports": [r.to_dict() for r in reports],
                                         "pearson_r_vs_teacher": correlation})
    print(table, end="")
    print("pearson r vs teacher: " + ", ".join(f"{k}={v:.4f}" for k, v in correlation.items()))


def cmd_occlusion_eval(args, cfg: RunConfig) -> None:
    try:
        coverages = [float(c) for c in args.coverages.split(",") if c.strip()]
    except ValueError as exc:
        raise UsageError(f"--coverages: {exc}") from exc
    ckpt = _load(args.model, "xcos")
    teacher = _load(args.teacher, "teacher").model
    pairs = _pairs(args, TEST_PAIRS)
    curve = ev.occlusion_sweep(ckpt.model, teacher, pairs, coverages, cfg.train.rng_seed, args.variant,
                               ckpt.calibration, cfg.eval.occlusion_folds)
    rows = [dataclasses.asdict(p) for p in curve]
    _write_json(args.out / "occlusion.json", rows)
    lines = ["coverage,xcos_accuracy,teacher_accuracy,masked_grid_s,unmasked_grid_s"]
    lines += [",".join(f"{row[k]:.6g}" for k in ("coverage", "xcos_accuracy", "teacher_accuracy",
                                                   "masked_grid_s", "unmasked_grid_s")) for row in rows]
    (args.out / "occlusion.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError(parser.format_usage().rstrip())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        args.func(args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, DataError, CheckpointError, ValueError, OSError, KeyError) as exc:
        print(f"xcos {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
