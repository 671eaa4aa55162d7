"""Command-line entry point: ``resinsort {synth,prepare,train,eval,novelty}``.

Every run writes ``config.lock.json`` into its output directory; passing that
file back with ``--from-lock`` repeats the run. Exit codes: 0 success,
2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DataError, DatasetManifest, compute_stats, load_dataset, load_images, split_dataset
from .evaluation import EvalConfig, build_index, format_table, knn_report, one_shot_accuracy
from .novelty import CONFUSION_COLUMNS, LDA_SHRINKAGE, export_projection_csv, run_novelty
from .synth import MANIFEST_NAME, MAX_CLASSES, synth_generate
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    build_model,
    config_dict,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("resinsort")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
LOCK_NAME = "config.lock.json"
CHECKPOINT_NAME = "model.ckpt"


class UsageError(Exception):
    """Flags that are well-formed but cannot be honoured."""


# --------------------------------------------------------------------------
# Flag parsing helpers
# --------------------------------------------------------------------------

def int_list(text):
    """'3,5,7' -> [3, 5, 7]; '1..5' -> [1, 2, 3, 4, 5]; forms can be mixed."""
    out = []
    try:
        for part in text.split(","):
            part = part.strip()
            if ".." in part:
                lo, hi = part.split("..")
                out.extend(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like '3,5,7' or '1..5', got {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def class_count(text):
    value = positive_int(text)
    if value > MAX_CLASSES:
        raise argparse.ArgumentTypeError(f"at most {MAX_CLASSES} classes, got {value}")
    return value


def ratio_triple(text):
    parts = int_list(text)
    if len(parts) != 3 or sum(parts) != 100:
        raise argparse.ArgumentTypeError(f"expected three parts summing to 100, got {text!r}")
    return parts


def manifest_path(dataset):
    p = Path(dataset)
    return p / MANIFEST_NAME if p.is_dir() else p


def open_manifest(dataset):
    path = manifest_path(dataset)
    if not path.exists():
        raise DataError(f"no manifest at {path}; run 'resinsort prepare' or 'resinsort synth' first")
    return DatasetManifest.load(path)


def holdout_id(manifest, value):
    if value is None:
        return None
    if isinstance(value, int) or str(value).lstrip("-").isdigit():
        cid = int(value)
        if not 0 <= cid < manifest.num_classes:
            raise UsageError(f"holdout class {cid} out of range 0..{manifest.num_classes - 1}")
        return cid
    return manifest.class_index(value)


def write_text(path, text):
    Path(path).write_text(text)
    return path


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_synth(args):
    try:
        manifest = synth_generate(args.classes, args.per_class, args.seed, args.out,
                                  ratios=tuple(args.split), stats_scope=args.stats_scope)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    path = Path(args.out) / MANIFEST_NAME
    print(f"{len(manifest.records)} images in {manifest.num_classes} classes")
    print(path)
    return {"manifest": str(path)}


def cmd_prepare(args):
    manifest = load_dataset(args.data)
    split_dataset(manifest, tuple(args.split), args.seed)
    compute_stats(manifest, args.stats_scope)
    path = manifest.save(Path(args.out) / MANIFEST_NAME)
    counts = manifest.split_counts()
    rows = [[code] + [counts[s][i] for s in ("train", "val", "test")]
            for i, code in enumerate(manifest.classes)]
    rows.append(["total"] + [sum(counts[s]) for s in ("train", "val", "test")])
    table = format_table(["class", "train", "val", "test"], rows)
    write_text(Path(args.out) / "splits.txt", table)
    print(table, end="")
    print(path)
    return {"manifest": str(path)}


def train_config(args, manifest):
    return TrainConfig(
        kind=args.kind, epochs=args.epochs, samples_per_epoch=args.samples_per_epoch,
        batch_size=args.batch_size, learning_rate=args.lr, momentum=args.momentum,
        margin=args.margin, seed=args.seed, profile=args.profile, val_samples=args.val_samples,
        positive_fraction=args.positive_fraction, micro_batch=args.micro_batch,
        holdout_class=holdout_id(manifest, args.holdout_class),
    )


def cmd_train(args):
    manifest = open_manifest(args.dataset)
    try:
        config = train_config(args, manifest)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    if args.save_init:
        save_checkpoint(build_model(config), out / "init.ckpt")
    model, history = train(config, manifest)
    save_checkpoint(model, out / CHECKPOINT_NAME)
    history.to_csv(out / "loss_history.csv")
    print(f"epoch 1 train loss {history.train[0]:.6f}, epoch {len(history)} train loss "
          f"{history.train[-1]:.6f}, val loss {history.val[-1]:.6f}")
    print(out / CHECKPOINT_NAME)
    return {"train": config_dict(config)}


def _model_and_images(args, manifest):
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint {args.checkpoint} does not exist")
    model = load_checkpoint(args.checkpoint)
    size = model.config.input_shape[0]
    return model, load_images(manifest, None, size)


def cmd_eval(args):
    manifest = open_manifest(args.dataset)
    try:
        config = EvalConfig(n_way=args.n_way, episodes=args.episodes,
                            knn_ks=tuple(args.k), seed=args.seed, polarity=args.polarity)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model, images = _model_and_images(args, manifest)
    index = build_index(model, manifest, images)
    out = Path(args.out)
    test_rows = manifest.indices("test")
    if args.protocol == "one-shot":
        if not test_rows:
            raise DataError("test split is empty")
        support = None if args.index == "all" else manifest.indices("train")
        try:
            acc = one_shot_accuracy(model, index, test_rows, config, support_rows=support)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        episodes = config.episodes or len(test_rows)
        line = f"1-shot {config.n_way}-way accuracy: {acc:.4f} ({round(acc * episodes)}/{episodes})"
        write_text(out / "one_shot.txt", line + "\n")
        print(line)
        return {"eval": vars(config) | {"knn_ks": list(config.knn_ks)}, "accuracy": acc}
    queries = list(range(len(manifest.records))) if args.query == "all" else test_rows
    candidates = None if args.index == "all" else manifest.indices("train")
    names = [manifest.classes[c] for c in range(manifest.num_classes)]
    try:
        report = knn_report(index, queries, config.knn_ks, names, candidate_rows=candidates)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_text(out / "knn.csv", report.to_csv())
    write_text(out / "knn.txt", report.to_text())
    print(report.to_text(), end="")
    return {"eval": vars(config) | {"knn_ks": list(config.knn_ks)}}


def cmd_novelty(args):
    manifest = open_manifest(args.dataset)
    holdout = holdout_id(manifest, args.holdout_class if args.holdout_class is not None
                         else manifest.num_classes - 1)
    known = manifest.num_classes - 1
    if args.method == "lda" and max(args.dims) > known - 1:
        raise UsageError(f"LDA yields at most C-1 = {known - 1} directions for C = {known} "
                         f"training classes; requested {max(args.dims)}")
    if min(args.dims) < 1:
        raise UsageError("dims must be positive")
    model, images = _model_and_images(args, manifest)
    embeddings = build_index(model, manifest, images).embeddings
    try:
        run = run_novelty(embeddings, manifest, holdout, args.method, args.dims,
                          tune_new=args.tune_new, reference=args.reference,
                          n_radius=args.n_radius, max_neighbors=args.max_neighbors,
                          shrinkage=args.shrinkage)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    rows = run.rows()
    buf = [",".join(CONFUSION_COLUMNS)] + [",".join(str(c) for c in r) for r in rows]
    write_text(out / f"novelty_{args.method}.csv", "\n".join(buf) + "\n")
    table = format_table(CONFUSION_COLUMNS, rows)
    write_text(out / f"novelty_{args.method}.txt", table)
    ids = [manifest.records[i].id for i in run.pool]
    labels = manifest.labels(run.pool)
    for result in run.results:
        export_projection_csv(out / f"projection_{args.method}_d{result.dims}.csv",
                              ids, labels, run.is_new, result.projected_pool)
    print(table, end="")
    return {"holdout_class": holdout}


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="resinsort", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_dataset=True):
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--from-lock", metavar="LOCK",
                       help="take every setting from a config.lock.json; explicit flags override")
        if needs_dataset:
            p.add_argument("--dataset", required=True,
                           help="manifest.json or a directory containing one")

    p = sub.add_parser("synth", help="generate the synthetic shapes dataset")
    common(p, needs_dataset=False)
    p.add_argument("--classes", type=class_count, default=5)
    p.add_argument("--per-class", type=positive_int, default=100)
    p.add_argument("--split", type=ratio_triple, default=[80, 10, 10], help="train,val,test percentages")
    p.add_argument("--stats-scope", choices=("train", "all"), default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="index an image tree, split it and compute normalization stats")
    common(p, needs_dataset=False)
    p.add_argument("--data", required=True, help="root with one subdirectory per class")
    p.add_argument("--split", type=ratio_triple, default=[80, 10, 10])
    p.add_argument("--stats-scope", choices=("train", "all"), default="train")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a Siamese or triplet network")
    common(p)
    p.add_argument("--kind", choices=("siamese", "triplet"), default="triplet")
    p.add_argument("--profile", choices=("full", "mini"), default="full")
    p.add_argument("--epochs", type=positive_int, default=None,
                   help="default 50 (siamese) or 100 (triplet)")
    p.add_argument("--samples-per-epoch", type=positive_int, default=5000)
    p.add_argument("--batch-size", type=positive_int, default=50)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--margin", type=float, default=0.4)
    p.add_argument("--val-samples", type=positive_int, default=1000)
    p.add_argument("--positive-fraction", type=float, default=0.5)
    p.add_argument("--micro-batch", type=positive_int, default=None)
    p.add_argument("--holdout-class", default=None, help="class id or code left out of training")
    p.add_argument("--save-init", action="store_true", help="also write the initial weights")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="one-shot or KNN accuracy of a trained network")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=("one-shot", "knn"), default="one-shot")
    p.add_argument("--k", type=int_list, default=[3, 5, 7], help="KNN neighbour counts")
    p.add_argument("--n-way", type=positive_int, default=5)
    p.add_argument("--episodes", type=positive_int, default=None,
                   help="default: one per test image")
    p.add_argument("--polarity", choices=("least", "greatest"), default="least",
                   help="Siamese episodes pick the support with the least or greatest output")
    p.add_argument("--index", choices=("all", "train"), default="all",
                   help="neighbours/supports drawn from every image or the training split only")
    p.add_argument("--query", choices=("all", "test"), default="all",
                   help="KNN queries: every image (minus itself) or the test split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("novelty", help="flag an unseen class by projection and neighbour counts")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--holdout-class", default=None, help="class treated as new (default: last)")
    p.add_argument("--method", choices=("pca", "lda"), default="lda")
    p.add_argument("--dims", type=int_list, default=[1, 2, 3], help="e.g. 1..3 or 1,2,3")
    p.add_argument("--tune-new", choices=("pool", "split"), default="pool",
                   help="tune on every new-class image (pool) or only those outside the test split")
    p.add_argument("--reference", choices=("train", "pool"), default="train",
                   help="neighbours counted among training points or among the evaluated points")
    p.add_argument("--n-radius", type=positive_int, default=60)
    p.add_argument("--max-neighbors", type=positive_int, default=50)
    p.add_argument("--shrinkage", type=float, default=LDA_SHRINKAGE,
                   help="LDA within-class shrinkage relative to its mean diagonal")
    p.set_defaults(func=cmd_novelty)
    return parser


LOCK_SKIP = {"func", "from_lock", "verbose"}


def _lock_path(argv):
    for k, tok in enumerate(argv):
        if tok == "--from-lock" and k + 1 < len(argv):
            return argv[k + 1]
        if tok.startswith("--from-lock="):
            return tok.split("=", 1)[1]
    return None


def _apply_lock(parser, argv):
    """Parse ``argv`` with the lock file's settings (if any) as defaults."""
    lock_path = _lock_path(argv)
    if lock_path is None:
        return parser.parse_args(argv)
    try:
        lock = json.loads(Path(lock_path).read_text())
        command, settings = lock["command"], dict(lock["args"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        parser.error(f"cannot read lock file {lock_path}: {exc}")
    subparser = parser._subparsers._group_actions[0].choices.get(command)
    if subparser is None or command not in argv:
        parser.error(f"lock file is for the '{command}' subcommand")
    known = {a.dest for a in subparser._actions} - LOCK_SKIP - {"help"}
    unknown = set(settings) - known
    if unknown:
        parser.error(f"unknown keys in lock file: {', '.join(sorted(unknown))}")
    for action in subparser._actions:
        if action.dest in settings:
            action.required = False
    subparser.set_defaults(**settings)
    return parser.parse_args(argv)


def write_lock(args, resolved):
    settings = {k: v for k, v in vars(args).items() if k not in LOCK_SKIP | {"command"}}
    doc = {"command": args.command, "args": settings, "resolved": resolved}
    path = Path(args.out) / LOCK_NAME
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")
    return path


def main(argv=None):
    parser = build_parser()
    args = _apply_lock(parser, sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        resolved = args.func(args)
        write_lock(args, resolved)
    except UsageError as exc:
        print(f"resinsort: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"resinsort: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"resinsort: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
