"""Command-line entry point: ``python -m ventriseg <command> --config C --seed N --out D``.

Every command reads a flat ``key=value`` config, writes its outputs under
``--out`` and finishes by writing ``manifest.txt`` there. Failures print a
single ``error code=<n> key=<k> message=<...>`` line to stderr.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from . import __version__
from . import config as cfgio
from .data import PHASES, STRUCTURES, AugmentParams
from .metrics import compare, rows_from_csv, rows_to_csv, summarize, to_json, volume_report
from .models import ARCHS, DV_REF, FV_REF, build
from .phantom import (PhantomSpec, generate_dataset, read_dataset, sparsify_annotations,
                      split_chronological, write_dataset, write_pgm)
from .plots import bland_altman_svg, boxplot_svg
from .search import SearchSpace, bench_to_json, benchmark_inference, optimize_input, \
    random_search, trials_to_csv
from .tensor import Rng
from .train import TrainConfig, infer_masks, load_checkpoint, save_checkpoint, train

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3
DATA_DIR = "data"
CHECKPOINT_DIR = "checkpoint"
REFERENCE = {"deepventricle": DV_REF, "fastventricle": FV_REF}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# per-command option blocks (keys of the flat config file)


@dataclass
class DataOptions:
    n_studies: int = 230
    sparsify: bool = False
    annotation_rates: tuple[float, ...] = (0.96, 0.22, 0.85)


@dataclass
class SplitOptions:
    split: tuple[float, ...] = (0.8, 0.1, 0.1)
    subset: str = "holdout"

    def __post_init__(self):
        if self.subset not in ("train", "val", "holdout", "all"):
            raise cfgio.ConfigError("subset", "must be train, val, holdout or all")


@dataclass
class SearchOptions:
    n_trials: int = 8
    search_epochs: int = 20


@dataclass
class BenchOptions:
    batch: int = 16
    repetitions: int = 10
    warmup: int = 2


@dataclass
class DreamOptions:
    steps: int = 500
    step_size: float = 1.0
    study_index: int = 0
    phase: str = "ED"
    slice_index: int = -1          # -1 picks the middle slice

    def __post_init__(self):
        if self.phase not in PHASES:
            raise cfgio.ConfigError("phase", f"must be one of {PHASES}")


def _aug_fields():
    return {f"aug_{f.name}" for f in fields(AugmentParams)}


def parse_config(path, blocks):
    """Split one flat config across ``blocks`` (dataclasses); unknown keys are errors.

    ``aug_*`` keys feed :class:`AugmentParams` when it is among the blocks.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            pairs = cfgio.parse_pairs(fh.read())
    except OSError as exc:
        raise cfgio.ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    out, used = [], set()
    for cls in blocks:
        if cls is AugmentParams:
            sub = {k[4:]: v for k, v in pairs.items() if k in _aug_fields()}
            used |= {f"aug_{k}" for k in sub}
            try:
                out.append(cfgio.from_pairs(cls, sub))
            except cfgio.ConfigError as exc:
                raise cfgio.ConfigError(f"aug_{exc.key}", str(exc)) from None
            continue
        names = {f.name for f in fields(cls)}
        sub = {k: v for k, v in pairs.items() if k in names}
        used |= set(sub)
        out.append(cfgio.from_pairs(cls, sub))
    for key in pairs:
        if key not in used:
            raise cfgio.ConfigError(key, "unknown config key")
    return out


def _dataset_root(path):
    if path is None:
        raise UsageError("--dataset is required")
    nested = os.path.join(path, DATA_DIR)
    return nested if os.path.isfile(os.path.join(nested, "manifest.txt")) else path


def _checkpoint_root(path):
    if path is None:
        raise UsageError("--checkpoint is required")
    nested = os.path.join(path, CHECKPOINT_DIR)
    return nested if os.path.isdir(nested) else path


def _subset(studies, opts: SplitOptions):
    if opts.subset == "all":
        return studies
    train_s, val_s, hold_s = split_chronological(studies, opts.split)
    return {"train": train_s, "val": val_s, "holdout": hold_s}[opts.subset]


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _read(path, flag):
    if path is None:
        raise UsageError(f"{flag} is required")
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _model_config(args, path):
    """Model, training, augmentation and split options for ``--arch``.

    Model keys default to the reference configuration of the architecture.
    """
    if args.arch is None:
        raise UsageError("--arch is required")
    return parse_config(path, [ARCHS[args.arch], TrainConfig, AugmentParams, SplitOptions])


# --------------------------------------------------------------------------
# commands; each returns a dict of extra manifest fields


def cmd_gen_data(args):
    data, spec = parse_config(args.config, [DataOptions, PhantomSpec])
    studies = generate_dataset(data.n_studies, args.seed, spec)
    if data.sparsify:
        studies = sparsify_annotations(studies, Rng(args.seed, ("sparsify",)),
                                       data.annotation_rates)
    write_dataset(studies, os.path.join(args.out, DATA_DIR))
    return {"studies": len(studies)}


def cmd_train(args):
    model, tcfg, aug, split = _model_config(args, args.config)
    tcfg = dataclasses.replace(tcfg, seed=args.seed)
    studies = read_dataset(_dataset_root(args.dataset))
    train_s, val_s, _ = split_chronological(studies, split.split)
    graph = build(model, seed=args.seed)
    graph, history = train(graph, train_s, tcfg, val_s, augment_params=aug)
    graph.astype(np.float64)
    save_checkpoint(graph, os.path.join(args.out, CHECKPOINT_DIR))
    _write(os.path.join(args.out, "history.csv"), history.to_csv())
    return {"train_studies": len(train_s), "val_studies": len(val_s),
            "best_epoch": history.best_epoch}


def cmd_infer(args):
    (opts, bopts) = parse_config(args.config, [SplitOptions, TrainConfig])
    graph = load_checkpoint(_checkpoint_root(args.checkpoint))
    studies = _subset(read_dataset(_dataset_root(args.dataset)), opts)
    root = os.path.join(args.out, "predictions")
    for study in studies:
        pred = infer_masks(graph, study, bopts.binarize_threshold)
        os.makedirs(os.path.join(root, study.study_id), exist_ok=True)
        for phase in PHASES:
            for k, m in enumerate(pred[phase]):
                packed = sum(m[c].astype(np.uint8) << c for c in range(len(STRUCTURES)))
                write_pgm(os.path.join(root, study.study_id, f"{phase}_{k:02d}_mask.pgm"),
                          packed, 255)
    return {"studies": len(studies)}


def _evaluate(graph, studies, threshold):
    rows = []
    for study in studies:
        rows += volume_report(study, infer_masks(graph, study, threshold))
    return rows


def cmd_eval(args):
    opts, tcfg = parse_config(args.config, [SplitOptions, TrainConfig])
    graph = load_checkpoint(_checkpoint_root(args.checkpoint))
    studies = _subset(read_dataset(_dataset_root(args.dataset)), opts)
    rows = _evaluate(graph, studies, tcfg.binarize_threshold)
    _write(os.path.join(args.out, "metrics.csv"), rows_to_csv(rows))
    _write(os.path.join(args.out, "summary.json"), to_json(summarize(rows)))
    _write(os.path.join(args.out, "boxplot.svg"), boxplot_svg(rows))
    _write(os.path.join(args.out, "bland_altman.svg"), bland_altman_svg(rows))
    return {"rows": len(rows)}


def cmd_compare(args):
    parse_config(args.config, [])
    rows_a = rows_from_csv(_read(args.pred_a, "--pred-a"))
    rows_b = rows_from_csv(_read(args.pred_b, "--pred-b"))
    out = {"wmw": compare(rows_a, rows_b), "a": summarize(rows_a), "b": summarize(rows_b)}
    _write(os.path.join(args.out, "summary.json"), to_json(out))
    _write(os.path.join(args.out, "boxplot.svg"), boxplot_svg(rows_a + rows_b))
    return {"rows_a": len(rows_a), "rows_b": len(rows_b)}


def cmd_search(args):
    if args.arch is None:
        raise UsageError("--arch is required")
    sopts, split, tcfg = parse_config(args.config, [SearchOptions, SplitOptions, TrainConfig])
    studies = read_dataset(_dataset_root(args.dataset))
    train_s, val_s, _ = split_chronological(studies, split.split)
    base = {"dtype": tcfg.dtype, "slices_per_phase": tcfg.slices_per_phase}
    trials, winner = random_search(SearchSpace.default(args.arch), sopts.n_trials,
                                   sopts.search_epochs, args.seed, (train_s, val_s), base=base)
    _write(os.path.join(args.out, "trials.csv"), trials_to_csv(trials))
    summary = {"arch": args.arch, "winner_trial_id": winner.trial_id,
               "winner_val_accuracy": winner.val_accuracy,
               "winner_mean_val_rave": winner.mean_val_rave,
               "winner_config": {k: v for k, v in sorted(winner.params.items())}}
    _write(os.path.join(args.out, "summary.json"), to_json(summary))
    return {"trials": len(trials), "winner": winner.trial_id}


def cmd_bench(args):
    (opts,) = parse_config(args.config, [BenchOptions])
    archs = [args.arch] if args.arch else sorted(REFERENCE)
    results = {}
    for arch in archs:
        if args.checkpoint:
            graph = load_checkpoint(_checkpoint_root(args.checkpoint))
        else:
            graph = build(REFERENCE[arch], seed=args.seed)
        size = graph.config.input_size
        results[arch] = benchmark_inference(graph, (graph.in_channels, size, size), opts.batch,
                                            opts.repetitions, opts.warmup, seed=args.seed)
    _write(os.path.join(args.out, "bench.json"), bench_to_json(results))
    return {"models": ",".join(archs)}


def cmd_dream(args):
    (opts,) = parse_config(args.config, [DreamOptions])
    graph = load_checkpoint(_checkpoint_root(args.checkpoint))
    studies = read_dataset(_dataset_root(args.dataset))
    if not 0 <= opts.study_index < len(studies):
        raise cfgio.ConfigError("study_index", f"must lie in [0, {len(studies)})")
    study = studies[opts.study_index]
    truth = study.truth_masks[opts.phase]
    k = opts.slice_index if opts.slice_index >= 0 else len(truth) // 2
    image, losses = optimize_input(graph, truth[k:k + 1], opts.steps, opts.step_size, args.seed)
    img = image[0, 0]
    lo, hi = float(img.min()), float(img.max())
    scaled = np.round((img - lo) / (hi - lo if hi > lo else 1.0) * 65535).astype(np.uint16)
    write_pgm(os.path.join(args.out, "dream.pgm"), scaled, 65535)
    _write(os.path.join(args.out, "dream_loss.csv"),
           "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses.tolist())))
    return {"initial_loss": float(losses[0]), "final_loss": float(losses[-1])}


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "compare": cmd_compare, "search": cmd_search,
            "bench": cmd_bench, "dream": cmd_dream}


# --------------------------------------------------------------------------
# plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error code={EXIT_USAGE} message={message}\n")
        sys.exit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="ventriseg", description="Ventricle segmentation experiments on phantoms.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", required=True)
        c.add_argument("--seed", required=True, type=int)
        c.add_argument("--out", required=True)
        c.add_argument("--dataset")
        c.add_argument("--checkpoint")
        c.add_argument("--arch", choices=sorted(ARCHS))
        c.add_argument("--pred-a", dest="pred_a")
        c.add_argument("--pred-b", dest="pred_b")
    return p


def write_manifest(args, extra, wall):
    lines = {"command": args.command, "config": args.config, "seed": args.seed,
             "dataset": args.dataset or "", "checkpoint": args.checkpoint or "",
             "arch": args.arch or "", "out": args.out, "version": __version__,
             "wall_seconds": f"{wall:.3f}"}
    lines.update(extra)
    _write(os.path.join(args.out, "manifest.txt"),
           "".join(f"{k}={v}\n" for k, v in lines.items()))


def _fail(code, message, key=None):
    text = " ".join(str(message).split())
    key_part = f" key={key}" if key is not None else ""
    sys.stderr.write(f"error code={code}{key_part} message={json.dumps(text)}\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.seed < 0:
        return _fail(EXIT_USAGE, "--seed must be non-negative")
    t0 = time.perf_counter()
    try:
        os.makedirs(args.out, exist_ok=True)
        extra = COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except cfgio.ConfigError as exc:
        return _fail(EXIT_CONFIG, exc, key=exc.key)
    except Exception as exc:            # noqa: BLE001 - reported as a one-line runtime error
        return _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    write_manifest(args, extra or {}, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
