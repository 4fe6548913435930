"""Command-line entry point: ``salanet {phantom,preprocess,train,infer,evaluate}``.

Exit codes: 0 success, 1 invalid input (bad flags, missing or malformed files,
failed validation), 2 runtime failure.  Every failure prints exactly one line
``salanet: error: <ErrorType>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

from . import __version__
from .dataio import PHASES, VIEWS, LabelMap, assemble_study, load_manifest, load_volume
from .exceptions import FormatError, NotFound, SalaError, ValidationError
from .inference import find_checkpoints, load_models, prediction_path, segment_study, write_predictions
from .metrics import evaluate_subject, pathology_report, write_metrics_csv, write_report_csv
from .phantom import generate_dataset
from .preprocess import load_preprocessed, preprocess_study, remap_labels, save_preprocessed
from .training import TrainConfig, load_config, split_folds, train_fold

logger = logging.getLogger("salanet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
CACHE_INDEX = "index.json"


class UsageError(SalaError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------- cache helpers


def write_cache(manifest, out_dir) -> List[str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    for entry in load_manifest(manifest):
        pstudy = preprocess_study(assemble_study(entry))
        save_preprocessed(pstudy, out_dir / entry.subject_id)
        ids.append(entry.subject_id)
        logger.info("preprocessed %s", entry.subject_id)
    (out_dir / CACHE_INDEX).write_text(json.dumps({"subjects": ids}, indent=2) + "\n")
    return ids


def read_cache(data_dir):
    data_dir = Path(data_dir)
    index = data_dir / CACHE_INDEX
    if not index.is_file():
        raise NotFound(f"{data_dir} is not a preprocessed cache (no {CACHE_INDEX})")
    ids = json.loads(index.read_text())["subjects"]
    return [load_preprocessed(data_dir / sid) for sid in ids]


# --------------------------------------------------------------------------- subcommands


def cmd_phantom(args) -> int:
    if args.count < 1:
        raise ValidationError(f"--count must be >= 1, got {args.count}")
    manifest = generate_dataset(args.count, args.seed, args.out)
    print(manifest)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    ids = write_cache(args.manifest, args.out)
    print(f"{len(ids)} studies -> {args.out}")
    return EXIT_OK


def _train_one(config_dict, fold, data_dir, folds):
    config = TrainConfig.from_dict(config_dict)
    dataset = read_cache(data_dir)
    res = train_fold(config, fold, dataset, folds)
    return res.fold, str(res.checkpoint), res.selected_epoch


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.out:
        config.out_dir = str(args.out)
    data_dir = args.data or config.data_dir
    if not data_dir:
        raise ValidationError("no preprocessed data: pass --data or set data_dir in the config")
    if args.fold is not None and not 0 <= args.fold < config.folds:
        raise ValidationError(f"--fold {args.fold} outside [0, {config.folds - 1}]")
    dataset = read_cache(data_dir)
    folds = split_folds([s.subject_id for s in dataset], config.folds, config.seed)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "folds.json").write_text(json.dumps(folds, indent=2) + "\n")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    todo = list(range(config.folds)) if args.all_folds else [args.fold]
    if args.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_train_one, [config.to_dict()] * len(todo), todo,
                                    [str(data_dir)] * len(todo), [folds] * len(todo)))
    else:
        results = []
        for k in todo:
            res = train_fold(config, k, dataset, folds)
            results.append((res.fold, str(res.checkpoint), res.selected_epoch))
    for fold, ckpt, epoch in results:
        print(f"fold {fold}: best epoch {epoch} -> {ckpt}")
    return EXIT_OK


def cmd_infer(args) -> int:
    models = load_models(find_checkpoints(args.models))
    entries = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for entry in entries:
        pstudy = preprocess_study(assemble_study(entry))
        preds = segment_study(models, pstudy, ratio=args.cluster_ratio, la_reduction=args.la_reduction)
        write_predictions(preds, entry.subject_id, out)
        logger.info("predicted %s", entry.subject_id)
    print(f"{len(entries)} subjects -> {out}")
    return EXIT_OK


def _as_internal(grid) -> LabelMap:
    lab = grid if isinstance(grid, LabelMap) else LabelMap(grid.data, grid.spacing, grid.origin)
    return remap_labels(lab)


def cmd_evaluate(args) -> int:
    records = []
    for entry in load_manifest(args.manifest):
        if not entry.has_labels:
            raise ValidationError(f"{entry.subject_id}: manifest row has no ground-truth paths")
        preds, gts = {}, {}
        for phase in PHASES:
            preds[phase], gts[phase] = {}, {}
            for view in VIEWS:
                p = load_volume(prediction_path(args.pred, entry.subject_id, view, phase))
                g = _as_internal(load_volume(entry.label_path(view, phase)))
                preds[phase][view] = p if isinstance(p, LabelMap) else LabelMap(p.data, p.spacing, p.origin)
                gts[phase][view] = g
        records.append(evaluate_subject(entry.subject_id, entry.pathology, preds, gts))
    write_metrics_csv(records, args.out)
    write_report_csv(pathology_report(records), args.report)
    print(f"{len(records)} subjects -> {args.out}, {args.report}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="salanet", description="Multi-view SA/LA cardiac MR right-ventricle segmentation.")
    parser.add_argument("--version", action="version", version=f"salanet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic dataset and its manifest")
    p.add_argument("--count", type=int, required=True, help="number of subjects (>= 1)")
    p.add_argument("--seed", type=int, default=0, help="base seed; subject i uses seed + i")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="resample/crop/normalise every manifest study into a cache")
    p.add_argument("--manifest", type=Path, required=True, help="manifest CSV")
    p.add_argument("--out", type=Path, required=True, help="cache directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="k-fold training on a preprocessed cache")
    p.add_argument("--config", type=Path, required=True, help="training config (JSON)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--fold", type=int, help="train a single fold")
    g.add_argument("--all-folds", action="store_true", help="train every fold")
    p.add_argument("--data", type=Path, help="preprocessed cache (overrides data_dir in the config)")
    p.add_argument("--out", type=Path, help="output directory (overrides out_dir in the config)")
    p.add_argument("--jobs", type=int, default=1, help="parallel fold processes with --all-folds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="fold-ensemble segmentation of every manifest study")
    p.add_argument("--models", type=Path, required=True, help="training output directory with fold_*/best.ckpt")
    p.add_argument("--manifest", type=Path, required=True, help="manifest CSV")
    p.add_argument("--out", type=Path, required=True, help="prediction directory")
    p.add_argument("--cluster-ratio", type=float, default=0.1,
                   help="drop components smaller than this fraction of the largest (default 0.1)")
    p.add_argument("--la-reduction", choices=("mean", "first"), default="mean",
                   help="how the per-SA-slice LA predictions are combined (default mean)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="RV Dice / HD-95 per subject plus a per-pathology report")
    p.add_argument("--pred", type=Path, required=True, help="prediction directory")
    p.add_argument("--manifest", type=Path, required=True, help="manifest CSV with ground truth")
    p.add_argument("--out", type=Path, required=True, help="per-subject metrics CSV")
    p.add_argument("--report", type=Path, required=True, help="per-pathology report CSV")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (phantom, preprocess, train, infer, evaluate)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ValidationError, NotFound, FormatError) as exc:
        print(f"salanet: error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level contract: one line, exit 2
        print(f"salanet: error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME


def _one_line(exc) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
