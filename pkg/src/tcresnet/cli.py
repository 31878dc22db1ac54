"""Command-line entry point: ``tcresnet <subcommand> [flags]``.

Exit status is 0 on success, 1 on a domain error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import audio_io, features, models, profiler, train
from .errors import KwsError
from .evaluation import read_scores_csv, roc_micro, vertical_average, write_scores_csv
from .nn_core import softmax


class UsageError(Exception):
    def __init__(self, message, usage=None):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}", self.format_usage())


def _model_spec(name: str) -> models.ModelSpec:
    try:
        return models.ModelSpec.from_name(name)
    except ValueError as exc:
        raise UsageError(f"{exc}; choose one of {', '.join(models.MODEL_NAMES)}") from None


def _open_out(path):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stdout)
    return open(path, "w", encoding="utf-8", newline="")


def _load_instance(args) -> models.ModelInstance:
    """Checkpoint from --checkpoint, or --model when it names an existing file."""
    path = args.checkpoint or (args.model if args.model and Path(args.model).is_file() else None)
    if path is None:
        raise UsageError("a checkpoint is required (--checkpoint PATH)")
    return models.load_checkpoint(path)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_featurize(args) -> int:
    wavs = [Path(p) for p in args.wav]
    out = Path(args.out) if args.out else None
    if len(wavs) > 1 and (out is None or not out.is_dir()):
        raise UsageError("--out must be an existing directory when featurizing several files")
    for wav in wavs:
        clip = audio_io.pad_or_trim(audio_io.read_wav(wav))
        mfcc = features.compute_mfcc(clip.samples)
        target = out / (wav.stem + ".mfc") if out is not None and out.is_dir() else out or wav.with_suffix(".mfc")
        with open(target, "wb") as fh:
            features.write_mfcc(fh, mfcc)
        print(f"{wav} -> {target} ({mfcc.shape[0]}x{mfcc.shape[1]})")
    return 0


def cmd_split(args) -> int:
    if args.list:
        paths = [ln.strip() for ln in Path(args.list).read_text(encoding="utf-8").splitlines() if ln.strip()]
        entries = audio_io.index_from_paths(
            paths, args.val, args.test, args.unknown, args.silence, args.seed
        )
    elif args.data_root:
        entries = audio_io.build_dataset_index(
            args.data_root, args.val, args.test, args.unknown, args.silence, args.seed
        )
    else:
        raise UsageError("split needs --list FILE or --data-root DIR")
    with _open_out(args.out) as fh:
        audio_io.write_index_csv(entries, fh)
    return 0


def _index_for(args) -> list[audio_io.DatasetEntry]:
    if args.index:
        return audio_io.read_index_csv(args.index)
    if not args.data_root:
        raise UsageError("--data-root is required")
    return audio_io.build_dataset_index(args.data_root, args.val, args.test, rng_seed=args.seed)


def cmd_train(args) -> int:
    if args.config:
        tcfg, acfg = train.load_config(args.config)
    else:
        tcfg, acfg = train.TrainConfig(), audio_io.AugmentConfig()
    if args.seed is not None:
        tcfg.rng_seed = acfg.rng_seed = args.seed
    if args.iters:
        tcfg.total_iters = args.iters
    if not args.data_root:
        raise UsageError("--data-root is required")
    entries = _index_for(args)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    model = models.build_model(_model_spec(args.model or "tc-resnet8"), tcfg.rng_seed)
    store = audio_io.ClipStore(args.data_root)
    result = train.train_loop(model, entries, tcfg, acfg, store, checkpoint_path=out / "best.tcrn")
    train.write_metrics_csv(result.log, out / "metrics.csv")
    models.save_checkpoint(result.best, out / "best.tcrn")
    print(f"best val_acc {result.best_val_acc:.4f} at iter {result.best_iter}; wrote {out / 'best.tcrn'}")
    return 0


def cmd_infer(args) -> int:
    inst = _load_instance(args)
    if args.fold and not inst.folded:
        inst = models.fold_batchnorm(inst)
    clip = audio_io.pad_or_trim(audio_io.read_wav(args.wav))
    probs = softmax(models.forward(inst, features.compute_mfcc(clip.samples)).astype(np.float64))
    top = int(np.argmax(probs))
    print(f"top1 {audio_io.LABELS[top]} {probs[top]:.9f}")
    for name, p in zip(audio_io.LABELS, probs):
        print(f"{name}\t{p:.9f}")
    return 0


def cmd_eval(args) -> int:
    inst = _load_instance(args)
    if not args.data_root:
        raise UsageError("--data-root is required")
    entries = [e for e in _index_for(args) if e.split == args.split]
    bank = train.FeatureBank(audio_io.ClipStore(args.data_root))
    logits = train.predict_logits(inst, entries, bank)
    labels = [e.label_id for e in entries]
    print(f"{args.split} accuracy {train.accuracy(logits, labels):.4f} over {len(entries)} clips")
    if args.out:
        write_scores_csv(softmax(logits.astype(np.float64)), labels, args.out)
    return 0


def cmd_eval_roc(args) -> int:
    exclude = [audio_io.LABEL_INDEX[c] if c in audio_io.LABEL_INDEX else int(c) for c in args.exclude_classes]
    curves = []
    for path in args.scores:
        scores, labels = read_scores_csv(path)
        curves.append(roc_micro(scores, labels, exclude_classes=exclude))
    curve = curves[0] if len(curves) == 1 else vertical_average(curves)
    with _open_out(args.out) as fh:
        fh.write(curve.to_csv())
    print(f"AUC {curve.auc:.6f}", file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return 0


def cmd_profile(args) -> int:
    spec = _model_spec(args.model or "tc-resnet8")
    report = profiler.count_params(spec)
    print(report.to_table())
    if args.out:
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint or (args.model and Path(args.model).is_file()):
        inst = _load_instance(args)
    else:
        inst = models.build_model(_model_spec(args.model or "tc-resnet8"), args.seed or 0).eval()
    if not args.no_fold and not inst.folded:
        inst = models.fold_batchnorm(inst)
    report = profiler.benchmark_latency(inst, runs=args.runs, warmup=args.warmup, seed=args.seed or 0)
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tcresnet", description="Temporal-convolution keyword spotting toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("featurize", help="write MFC1 feature files for WAV clips")
    p.add_argument("--wav", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_featurize)

    def split_flags(p):
        p.add_argument("--val", type=float, default=10.0)
        p.add_argument("--test", type=float, default=10.0)

    p = sub.add_parser("split", help="assign hash-based splits and emit a path,label,split CSV")
    p.add_argument("--list", help="text file with one relative word/file.wav path per line")
    p.add_argument("--data-root")
    split_flags(p)
    p.add_argument("--unknown", type=float, default=10.0)
    p.add_argument("--silence", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on a Speech Commands tree")
    p.add_argument("--model", default="tc-resnet8")
    p.add_argument("--data-root")
    p.add_argument("--index", help="precomputed path,label,split CSV")
    p.add_argument("--config", help="key = value training config")
    p.add_argument("--iters", type=int, help="override total_iters")
    p.add_argument("--seed", type=int)
    split_flags(p)
    p.add_argument("--out", help="output directory (default ./run)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="classify one WAV clip")
    p.add_argument("--model", help="checkpoint path")
    p.add_argument("--checkpoint")
    p.add_argument("--wav", required=True)
    p.add_argument("--fold", action="store_true", help="fold batch norm before inference")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on one split")
    p.add_argument("--model", help="checkpoint path")
    p.add_argument("--checkpoint")
    p.add_argument("--data-root")
    p.add_argument("--index")
    p.add_argument("--split", choices=audio_io.SPLITS, default="test")
    p.add_argument("--seed", type=int, default=0)
    split_flags(p)
    p.add_argument("--out", help="write label,p0..p11 score CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-roc", help="micro-averaged FAR/FRR curve from score CSVs")
    p.add_argument("scores", nargs="+", help="score CSVs; several are vertically averaged")
    p.add_argument("--exclude-classes", nargs="*", default=[])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_roc)

    p = sub.add_parser("profile", help="parameter and FLOP table for a model")
    p.add_argument("--model", default="tc-resnet8")
    p.add_argument("--out", help="also write the table as CSV")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("bench", help="single-threaded inference latency")
    p.add_argument("--model", default="tc-resnet8")
    p.add_argument("--checkpoint")
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-fold", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc.usage or parser.format_usage(), end="", file=sys.stderr)
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (KwsError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())
