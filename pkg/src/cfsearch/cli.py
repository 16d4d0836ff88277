"""Command line entry points.

Five subcommands cover the workflow: `prepare` turns a raw interaction file
into a snapshot, `train` fits one model, `baselines` sweeps the classic models
over a small grid, `search` runs the model search, and `report` renders
figures and summary tables from finished searches. Every command is driven
entirely by its arguments (plus an optional JSON run config for `search`), so
rerunning with the same inputs rewrites the same outputs.
"""

import argparse
import json
import logging
import math
import os
import sys

from . import report as report_mod
from .cfmodel import BASELINE_NAMES, SearchSpace, parse_model_text
from .data import FileFormat, InteractionDataset, filter_min_count, read_interactions, split_records
from .errors import CfSearchError, ConfigError
from .numcore import Rng, derive_seed
from .search import (
    STRATEGIES,
    CachedEvaluator,
    HISTORY_NAME,
    SearchSpec,
    best_so_far_curve,
    load_history,
    run_search,
)
from .train import TASKS, TrainSpec, evaluate_model, train_baseline, train_model

log = logging.getLogger(__name__)


def _fail(message):
    raise ConfigError(message)


def _parse_ratios(text):
    parts = text.split(":")
    if len(parts) != 3:
        _fail(f"ratios must look like 8:1:1, got {text!r}")
    try:
        ratios = [float(p) for p in parts]
    except ValueError:
        _fail(f"ratios must be numbers, got {text!r}")
    return ratios


def _parse_floats(text, what):
    try:
        return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        _fail(f"{what} must be a comma-separated list of numbers, got {text!r}")


def _parse_ints(text, what):
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        _fail(f"{what} must be a comma-separated list of integers, got {text!r}")


def _metric_value(value):
    return "" if value is None or not math.isfinite(value) else f"{value:.4f}"


# -- prepare -----------------------------------------------------------------


def cmd_prepare(args):
    fmt = FileFormat(
        delimiter=args.delimiter,
        value_col=None if args.no_values else 2,
        time_col=None if args.no_values else 3,
        skip_header=args.skip_header,
    )
    records = read_interactions(args.input, fmt)
    n_raw = len(records)
    records = filter_min_count(records, args.min_count)
    if not records:
        _fail(
            f"no interactions survive the min-count filter of {args.min_count}; "
            "lower it or check the input file"
        )
    dataset = split_records(records, _parse_ratios(args.ratios), Rng(derive_seed(args.seed, "split")))
    if args.implicit:
        dataset = dataset.to_implicit()
    dataset.save(args.out)
    s = dataset.stats()
    print(
        f"users={s['users']} items={s['items']} interactions={s['interactions']} "
        f"density={s['density']:.5f} form={s['form']} "
        f"train={s['train']} validation={s['validation']} test={s['test']} "
        f"(kept {s['interactions']} of {n_raw} raw records)"
    )
    print(f"wrote {args.out}")
    return 0


# -- train -------------------------------------------------------------------


def _train_spec_from_args(args, seed):
    return TrainSpec(
        task=args.task,
        max_epochs=args.max_epochs,
        batch_size=args.batch_size,
        patience=args.patience,
        negatives_per_positive=args.negatives,
        k=args.k,
        seed=seed,
    )


def cmd_train(args):
    dataset = InteractionDataset.load(args.data)
    _, d, lr = parse_model_text(args.config)
    # a single-model space around the requested size and rate, so any positive
    # d and lr are trainable from the command line
    space = SearchSpace(dims=(d,), lrs=(lr,))
    config = space.parse_config(args.config)
    spec = _train_spec_from_args(args, args.seed)
    result = train_model(config, dataset, space, spec)
    doc = result.to_json()
    if result.failed:
        print(f"training failed (non-finite loss or metric) after {result.epochs_run} epoch(s)")
    else:
        test = evaluate_model(result.model, dataset, spec.task, k=spec.k, split="test")
        doc["test"] = {k: test[k] for k in sorted(test)}
        cells = [f"val_{result.val_metric_name}={result.best_val:.4f}"]
        cells += [f"test_{k}={v:.4f}" for k, v in sorted(test.items())]
        print(f"{args.config}  " + "  ".join(cells))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
        print(f"wrote {args.out}")
    return 1 if result.failed else 0


# -- baselines ---------------------------------------------------------------


def cmd_baselines(args):
    dataset = InteractionDataset.load(args.data)
    dims = _parse_ints(args.dims, "--dims")
    lrs = _parse_floats(args.lrs, "--lrs")
    if not dims or not lrs:
        _fail("--dims and --lrs must each name at least one value")
    metric = TrainSpec(task=args.task, k=args.k).val_metric_name
    higher = args.task == "ranking"

    header = ["model", "d", "lr", f"val_{metric}", "status"]
    test_keys = None
    rows = []
    for name in BASELINE_NAMES:
        best = None
        for d in dims:
            for lr in lrs:
                spec = _train_spec_from_args(
                    args, derive_seed(args.seed, "baseline", name, d, lr)
                )
                result = train_baseline(name, d, lr, dataset, spec)
                if result.failed:
                    log.warning("baseline %s d=%d lr=%g failed; continuing", name, d, lr)
                    continue
                if best is None or (
                    result.best_val > best[0].best_val
                    if higher
                    else result.best_val < best[0].best_val
                ):
                    best = (result, d, lr)
        if best is None:
            rows.append([name, "", "", "", "failed"])
            continue
        result, d, lr = best
        test = evaluate_model(result.model, dataset, args.task, k=args.k, split="test")
        if test_keys is None:
            test_keys = sorted(test)
            header += [f"test_{key}" for key in test_keys]
        row = [name, str(d), str(lr), _metric_value(result.best_val), "ok"]
        row += [_metric_value(test.get(key)) for key in test_keys]
        rows.append(row)
    # sentinel rows for early failures may be shorter than the final header
    width = len(header)
    rows = [row + [""] * (width - len(row)) for row in rows]
    print(report_mod.aligned_table(header, rows), end="")
    if args.out:
        report_mod.write_csv(args.out, header, rows)
        print(f"wrote {args.out}")
    return 0


# -- search ------------------------------------------------------------------


def _load_run_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        _fail(f"cannot read run config {path}: {exc}")
    except json.JSONDecodeError as exc:
        _fail(f"run config {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        _fail(f"run config {path} must be a JSON object")
    return doc


_RUN_CONFIG_KEYS = (
    "data", "cache", "out", "task", "dims", "lrs", "strategy", "k1", "k2",
    "max_evals", "threshold", "patience", "seed", "workers", "fuse",
    "max_epochs", "batch_size", "train_patience", "negatives", "k",
)


def _merge_run_config(args, doc):
    """Explicit flags win; the config file fills whatever was left at None."""
    unknown = sorted(set(doc) - set(_RUN_CONFIG_KEYS))
    if unknown:
        _fail(f"run config has unknown key(s): {', '.join(unknown)}")
    for key in _RUN_CONFIG_KEYS:
        if key in doc and getattr(args, key, None) is None:
            setattr(args, key, doc[key])


_SEARCH_DEFAULTS = {
    "task": "rating",
    "strategy": "rand+predictor",
    "k1": 10,
    "k2": 10,
    "max_evals": 100,
    "patience": 100,
    "seed": 0,
    "workers": 1,
    "fuse": False,
    "dims": "8,16,32,64",
    "lrs": "0.0005,0.001,0.005,0.01",
    "max_epochs": 200,
    "batch_size": 256,
    "train_patience": 10,
    "negatives": 1,
    "k": 20,
}


def cmd_search(args):
    if args.config:
        _merge_run_config(args, _load_run_config(args.config))
    for key, value in _SEARCH_DEFAULTS.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    if not args.out:
        _fail("search needs --out, a directory for the history and curve files")
    if not args.data and not args.cache:
        _fail("search needs --data (a snapshot) or --cache (a finished history)")
    if args.fuse and not args.data:
        _fail("--fuse trains a joint model and therefore needs --data")

    dims = _parse_ints(str(args.dims), "--dims") if isinstance(args.dims, str) else tuple(args.dims)
    lrs = _parse_floats(str(args.lrs), "--lrs") if isinstance(args.lrs, str) else tuple(args.lrs)
    space = SearchSpace(dims=dims, lrs=lrs)
    train = TrainSpec(
        task=args.task,
        max_epochs=args.max_epochs,
        batch_size=args.batch_size,
        patience=args.train_patience,
        negatives_per_positive=args.negatives,
        k=args.k,
        seed=0,
    )
    spec = SearchSpec(
        strategy=args.strategy,
        k1=args.k1,
        k2=args.k2,
        max_evals=args.max_evals,
        threshold=args.threshold,
        patience=args.patience,
        seed=args.seed,
        train=train,
    )
    spec.validate()

    dataset = InteractionDataset.load(args.data) if args.data else None
    evaluator = CachedEvaluator.from_file(args.cache, space) if args.cache else None

    result = run_search(
        space,
        dataset,
        spec,
        evaluator=evaluator,
        out_dir=args.out,
        resume=args.resume,
        workers=args.workers,
        fuse_top2=args.fuse,
    )

    metric = train.val_metric_name
    curve_path = os.path.join(args.out, report_mod.CURVE_NAME)
    report_mod.write_curve(curve_path, result.history.records, metric)

    print(
        f"evaluated {len(result.history)} config(s) in {result.rounds} round(s); "
        f"stopped on {result.stop_reason}"
    )
    header, rows = report_mod.top_rows(result.history.records, metric, k=3)
    print(report_mod.aligned_table(header, rows), end="")
    if result.fused is not None:
        state = "failed" if result.fused.failed else f"val_{metric}={result.fused.best_val:.4f}"
        print(f"fused top-2 model: {result.fused.config_text}  {state}")
    print(f"wrote {os.path.join(args.out, HISTORY_NAME)}")
    print(f"wrote {curve_path}")
    return 0


# -- report ------------------------------------------------------------------


def _safe_label(label):
    return "".join(c if c.isalnum() or c in "-_." else "-" for c in label)


def cmd_report(args):
    labels = args.labels.split(",") if args.labels else None
    if labels and len(labels) != len(args.runs):
        _fail(f"--labels names {len(labels)} run(s) but {len(args.runs)} were given")
    entries = []
    metric = None
    for i, run_dir in enumerate(args.runs):
        header, records = load_history(os.path.join(run_dir, HISTORY_NAME))
        if metric is None:
            metric = header["metric"]
        elif header["metric"] != metric:
            _fail(
                f"run {run_dir} measures {header['metric']!r} but earlier runs "
                f"measure {metric!r}; compare runs of the same task"
            )
        label = labels[i] if labels else os.path.basename(os.path.normpath(run_dir))
        entries.append((label, header, records))

    out_dir = args.out or args.runs[0]
    os.makedirs(out_dir, exist_ok=True)

    curves = []
    for label, _, records in entries:
        points = list(enumerate(best_so_far_curve(records, metric), start=1))
        curves.append((label, points))
        curve_path = os.path.join(out_dir, f"curve_{_safe_label(label)}.txt")
        report_mod.write_curve(curve_path, records, metric)
        print(f"wrote {curve_path}")

    summary_header, summary_rows = report_mod.summarize_runs(entries, metric)
    summary_path = os.path.join(out_dir, "summary.csv")
    report_mod.write_csv(summary_path, summary_header, summary_rows)
    print(report_mod.aligned_table(summary_header, summary_rows), end="")
    print(f"wrote {summary_path}")

    curve_png = os.path.join(out_dir, "best_curve.png")
    report_mod.render_curve_figure(curves, metric, curve_png)
    print(f"wrote {curve_png}")
    history_png = os.path.join(out_dir, "evaluations.png")
    report_mod.render_history_figure(entries[0][2], metric, history_png)
    print(f"wrote {history_png}")
    return 0


# -- argument wiring ----------------------------------------------------------


def _add_train_flags(p, for_search=False):
    # for the search command these default to None so a run config can fill them
    d = (lambda v: None) if for_search else (lambda v: v)
    p.add_argument("--task", choices=TASKS, default=d("rating"), help="prediction task")
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=d(200))
    p.add_argument("--batch-size", dest="batch_size", type=int, default=d(256))
    if for_search:
        p.add_argument("--train-patience", dest="train_patience", type=int, default=None,
                       help="early-stopping patience of each candidate training")
    else:
        p.add_argument("--patience", type=int, default=10,
                       help="early-stopping patience in epochs")
    p.add_argument("--negatives", type=int, default=d(1),
                   help="negatives per positive for ranking training")
    p.add_argument("--k", type=int, default=d(20), help="cutoff for ranking metrics")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cfsearch",
        description="Collaborative filtering model search over a four-stage model space.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="turn a raw interaction file into a dataset snapshot")
    p.add_argument("input", help="delimited interaction file (user, item[, value[, time]])")
    p.add_argument("--out", required=True, help="snapshot path to write")
    p.add_argument("--delimiter", default="\t", help="field delimiter (default: tab)")
    p.add_argument("--no-values", action="store_true",
                   help="the file has only user and item columns")
    p.add_argument("--skip-header", type=int, default=0, help="header lines to skip")
    p.add_argument("--min-count", type=int, default=20,
                   help="drop users/items with fewer records (default: 20)")
    p.add_argument("--ratios", default="8:1:1", help="train:validation:test (default: 8:1:1)")
    p.add_argument("--implicit", action="store_true",
                   help="replace values with 1.0 after splitting")
    p.add_argument("--seed", type=int, default=0, help="split shuffling seed")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model from its text form")
    p.add_argument("data", help="dataset snapshot from `prepare`")
    p.add_argument("config", help="model text like 'ID,ID,MAT,MAT,MUL,SUM|d=16|lr=0.005'")
    p.add_argument("--out", help="write the training report JSON here")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baselines", help="train the classic models over a small grid")
    p.add_argument("data", help="dataset snapshot from `prepare`")
    p.add_argument("--out", help="write the results table CSV here")
    p.add_argument("--dims", default="8,16,32,64", help="embedding sizes to sweep")
    p.add_argument("--lrs", default="0.0005,0.001,0.005,0.01", help="learning rates to sweep")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_baselines)

    p = sub.add_parser("search", help="search the model space")
    p.add_argument("--config", help="JSON run config; explicit flags override it")
    p.add_argument("--data", help="dataset snapshot from `prepare`")
    p.add_argument("--cache", help="history file of a finished run to replay instead of training")
    p.add_argument("--out", help="output directory for history, state and curve")
    p.add_argument("--strategy", choices=STRATEGIES, default=None)
    p.add_argument("--k1", type=int, default=None, help="candidates trained per round")
    p.add_argument("--k2", type=int, default=None,
                   help="extra candidates the predictor screens out per round")
    p.add_argument("--max-evals", dest="max_evals", type=int, default=None,
                   help="hard cap on trained candidates")
    p.add_argument("--threshold", type=float, default=None,
                   help="metric value that arms the patience stop rule")
    p.add_argument("--patience", type=int, default=None,
                   help="evaluations without improvement before stopping (once armed)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dims", default=None, help="embedding sizes of the space")
    p.add_argument("--lrs", default=None, help="learning rates of the space")
    p.add_argument("--workers", type=int, default=None, help="parallel candidate trainings")
    p.add_argument("--resume", action="store_true", help="continue an interrupted run in --out")
    p.add_argument("--fuse", action="store_true", default=None,
                   help="train a fused model of the top two configs afterwards")
    _add_train_flags(p, for_search=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("report", help="render figures and a summary from search runs")
    p.add_argument("runs", nargs="+", help="search output directories")
    p.add_argument("--out", help="where to write figures and tables (default: first run)")
    p.add_argument("--labels", help="comma-separated labels, one per run")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CfSearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
