"""Command-line entry point.

Subcommands: ``generate`` (adding-problem datasets), ``train``,
``eval``, ``analyze`` (reachability / reach-prob / rank / params) and
``export-activations``. Every report writes delimited output (CSV or
JSON) plus a rendered figure alongside it, and every subcommand is a
deterministic function of its arguments and seed.

A plain-text config file (``key = value`` lines, ``#`` comments) can
supply any long flag of the chosen subcommand, keyed by the flag name
without the leading dashes; explicit flags win over file values, and
unknown keys are rejected.

Exit codes: 0 success, 2 usage/config/missing-file errors, 1 runtime
failures (divergence, malformed data, IO during a run).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .autograd import Rng
from .data import (
    gen_adding,
    length_stats,
    load_adding,
    load_labeled,
    save_adding,
)
from .model import export_activations, load_checkpoint, rank_certificates, receptive_field
from .topology import ceil_log2, chord_graph, default_hops, reachability_closure, reaching_probabilities
from .training import DivergenceError, TrainConfig, class_weights, evaluate, make_splits, train
from . import plots


class UsageError(Exception):
    """Bad arguments or config; maps to exit code 2."""


def _opt(parser, flags, name, **kwargs):
    action = parser.add_argument(f"--{name}", **kwargs)
    flags[name] = action
    return action


def _add_config_flag(parser, flags):
    _opt(parser, flags, "config", default=None,
         help="key = value file supplying defaults for this subcommand's flags")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="chordmixer",
        description="Multi-scale rotation networks for variable-length sequences.",
        allow_abbrev=False)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("generate", help="generate an adding-problem dataset",
                       allow_abbrev=False)
    flags = {}
    _add_config_flag(p, flags)
    _opt(p, flags, "lambda", dest="lam", type=float, required=False, default=None,
         help="base length; N = round(lambda * LogNormal(0.5, 0.7^2))")
    _opt(p, flags, "count", type=int, default=None, help="number of instances")
    _opt(p, flags, "seed", type=int, default=0)
    _opt(p, flags, "out", default=None, help="output dataset path (ADD1 binary)")
    p.set_defaults(_flags=flags, func=cmd_generate)

    p = sub.add_parser("train", help="train a network", allow_abbrev=False)
    flags = {}
    _add_config_flag(p, flags)
    _opt(p, flags, "task", choices=("regression", "classification"), default="regression")
    _opt(p, flags, "data", default=None, help="dataset path (ADD1 or label<TAB>symbols)")
    _opt(p, flags, "lambda", dest="lam", type=float, default=None,
         help="generate adding data with this base length when --data is absent")
    _opt(p, flags, "count", type=int, default=None,
         help="generated instance count when --data is absent")
    _opt(p, flags, "track-size", type=int, default=16,
         help="channels per track; d = track-size * block count")
    _opt(p, flags, "hidden", type=int, default=128, help="mixer MLP hidden width")
    _opt(p, flags, "dropout", type=float, default=0.0)
    _opt(p, flags, "lr", type=float, default=1e-4)
    _opt(p, flags, "batch-size", type=int, default=2)
    _opt(p, flags, "epochs", type=int, default=10)
    _opt(p, flags, "seed", type=int, default=0)
    _opt(p, flags, "eval-every", type=int, default=1)
    _opt(p, flags, "n-max", type=int, default=None,
         help="maximum sequence length; inferred from the data when unset")
    _opt(p, flags, "head", choices=("avg", "cls"), default="avg")
    _opt(p, flags, "clip", type=float, default=0.0,
         help="global gradient-norm clip; 0 disables")
    _opt(p, flags, "eval-bins", type=int, default=10)
    _opt(p, flags, "out", default="runs/run", help="output directory")
    _opt(p, flags, "resume", action="store_true",
         help="continue from the out directory's last checkpoint")
    p.set_defaults(_flags=flags, func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split",
                       allow_abbrev=False)
    flags = {}
    _add_config_flag(p, flags)
    _opt(p, flags, "checkpoint", default=None, help="CHMX1 checkpoint path")
    _opt(p, flags, "data", default=None, help="the dataset the run was trained on")
    _opt(p, flags, "split", choices=("train", "val", "test", "all"), default="test")
    _opt(p, flags, "seed", type=int, default=0,
         help="training seed; reproduces the same train/val/test split")
    _opt(p, flags, "eval-bins", type=int, default=10)
    _opt(p, flags, "out", default="runs/eval", help="output directory")
    p.set_defaults(_flags=flags, func=cmd_eval)

    p = sub.add_parser("analyze", help="structural reports", allow_abbrev=False)
    kinds = p.add_subparsers(dest="kind")

    q = kinds.add_parser("reachability", help="receptive-field growth per depth",
                         allow_abbrev=False)
    flags = {}
    _add_config_flag(q, flags)
    _opt(q, flags, "n", type=int, default=None, help="sequence length")
    _opt(q, flags, "out", default="runs/analysis", help="output directory")
    q.set_defaults(_flags=flags, func=cmd_analyze_reachability)

    q = kinds.add_parser("reach-prob", help="random-walk reaching probabilities",
                         allow_abbrev=False)
    flags = {}
    _add_config_flag(q, flags)
    _opt(q, flags, "n", type=int, default=None, help="ring size")
    _opt(q, flags, "hops", type=int, default=None,
         help="walk length; defaults to ceil(log2 n + 1)")
    _opt(q, flags, "out", default="runs/analysis", help="output directory")
    q.set_defaults(_flags=flags, func=cmd_analyze_reach_prob)

    q = kinds.add_parser("rank", help="full-rank certificates for one block",
                         allow_abbrev=False)
    flags = {}
    _add_config_flag(q, flags)
    _opt(q, flags, "d", type=int, default=None, help="channel count")
    _opt(q, flags, "n", type=int, default=None, help="sequence length")
    _opt(q, flags, "seed", type=int, default=0)
    _opt(q, flags, "out", default="runs/analysis", help="output directory")
    q.set_defaults(_flags=flags, func=cmd_analyze_rank)

    q = kinds.add_parser("params", help="closed-form parameter count",
                         allow_abbrev=False)
    flags = {}
    _add_config_flag(q, flags)
    _opt(q, flags, "d", type=int, default=None, help="channel count")
    _opt(q, flags, "h", type=int, default=None, help="mixer hidden width")
    _opt(q, flags, "blocks", type=int, default=None, help="block count B")
    _opt(q, flags, "vocab-size", type=int, default=None, help="symbol embedding table width")
    _opt(q, flags, "in-channels", type=int, default=None, help="real-input channel count")
    _opt(q, flags, "n-outputs", type=int, default=None, help="head output dimension")
    _opt(q, flags, "cls", action="store_true", help="count a learned class token")
    _opt(q, flags, "out", default=None, help="optional directory for params.json")
    q.set_defaults(_flags=flags, func=cmd_analyze_params)

    p = sub.add_parser("export-activations",
                       help="CSV + heatmap of every traversed block's output",
                       allow_abbrev=False)
    flags = {}
    _add_config_flag(p, flags)
    _opt(p, flags, "checkpoint", default=None, help="CHMX1 checkpoint path")
    _opt(p, flags, "data", default=None, help="dataset holding the input sequence")
    _opt(p, flags, "index", type=int, default=0, help="instance index within the dataset")
    _opt(p, flags, "out", default="runs/activations", help="output directory")
    p.set_defaults(_flags=flags, func=cmd_export_activations)

    return parser


def parse_config_file(path):
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key or not value:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            if key in values:
                raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = value
    return values


def _flag_on_cli(argv, name):
    return any(tok == f"--{name}" or tok.startswith(f"--{name}=") for tok in argv)


_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _convert_config_value(action, text, where):
    if isinstance(action, argparse._StoreTrueAction):
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise UsageError(f"{where}: expected a boolean, got {text!r}")
    conv = action.type or str
    try:
        value = conv(text)
    except ValueError:
        raise UsageError(f"{where}: cannot parse {text!r}") from None
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"{where}: {value!r} is not one of {sorted(action.choices)}")
    return value


def apply_config_file(args, argv):
    """Fill unset flags from the config file; explicit flags keep priority."""
    path = getattr(args, "config", None)
    if not path:
        return
    flags = args._flags
    for key, text in parse_config_file(path).items():
        if key == "config":
            raise UsageError(f"{path}: config files cannot nest")
        if key not in flags:
            raise UsageError(f"{path}: unknown config key {key!r} for this subcommand")
        if _flag_on_cli(argv, key):
            continue
        action = flags[key]
        setattr(args, action.dest, _convert_config_value(action, text, f"{path}: {key}"))


def _require(args, *names):
    for name in names:
        dest = args._flags[name].dest
        if getattr(args, dest) is None:
            raise UsageError(f"--{name} is required")


def _require_file(path, what):
    if path is None:
        raise UsageError(f"missing {what} path")
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def _write_percentile_csv(path, percentiles):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "length_lo", "length_hi", "count", "value"])
        for i, bin_ in enumerate(percentiles):
            value = "" if bin_["value"] is None else repr(bin_["value"])
            writer.writerow([i, bin_["lo"], bin_["hi"], bin_["count"], value])
    return path


def cmd_generate(args):
    _require(args, "lambda", "count", "out")
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if args.lam < 2:
        raise UsageError(f"--lambda must be >= 2, got {args.lam}")
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    instances = gen_adding(args.count, args.lam, Rng(args.seed).split("data"))
    save_adding(instances, args.out)
    stats = length_stats(instances)
    figure = plots.length_histogram(
        [inst.n for inst in instances],
        os.path.splitext(args.out)[0] + ".lengths.png",
        title=f"adding-problem lengths, lambda={args.lam:g}")
    print(f"wrote {args.out}: {stats['count']} instances, lengths "
          f"min={stats['min']} median={stats['median']:g} max={stats['max']}")
    print(f"figure: {figure}")
    return 0


def cmd_train(args):
    if args.data is not None:
        _require_file(args.data, "dataset")
    config = TrainConfig(
        task=args.task, data=args.data, lam=args.lam, count=args.count,
        track_size=args.track_size, hidden=args.hidden, dropout=args.dropout,
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
        seed=args.seed, eval_every=args.eval_every, n_max=args.n_max,
        head=args.head, clip=args.clip, eval_bins=args.eval_bins,
        out=args.out, resume=args.resume)
    try:
        config.validate()
    except ValueError as err:
        raise UsageError(str(err)) from None
    result = train(config)
    test_record = result.metrics[-1]
    plots.loss_curves(result.metrics, os.path.join(config.out, "loss_curves.png"))
    _write_percentile_csv(os.path.join(config.out, "test_percentiles.csv"),
                          test_record["percentiles"])
    plots.percentile_curve(test_record["percentiles"], test_record["metric"],
                           os.path.join(config.out, "test_percentiles.png"),
                           title=f"test {test_record['metric']} by length percentile")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_eval(args):
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.data, "dataset")
    net = load_checkpoint(args.checkpoint)
    task = "regression" if net.in_channels is not None else "classification"
    if task == "regression":
        dataset = load_adding(args.data)
        vocab = None
    else:
        dataset, vocab = load_labeled(args.data)
        if len(vocab) > net.vocab_size:
            raise ValueError(f"dataset vocabulary ({len(vocab)}) exceeds the "
                             f"checkpoint's ({net.vocab_size})")
    root_rng = Rng(args.seed)
    weights = None
    if args.split == "all":
        items = dataset
    else:
        parts = make_splits(dataset, root_rng, stratify=task == "classification")
        items = dict(zip(("train", "val", "test"), parts))[args.split]
    if task == "classification":
        train_items = make_splits(dataset, Rng(args.seed), stratify=True)[0] \
            if args.split == "all" else parts[0]
        weights = class_weights([s.label for s in train_items], net.n_outputs)

    record = evaluate(net, items, task, args.eval_bins, weights)
    record["split"] = args.split
    record["checkpoint"] = os.path.basename(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    metrics_path = _write_json(os.path.join(args.out, "eval_metrics.json"), record)
    csv_path = _write_percentile_csv(os.path.join(args.out, "percentiles.csv"),
                                     record["percentiles"])
    figure = plots.percentile_curve(
        record["percentiles"], record["metric"],
        os.path.join(args.out, "percentiles.png"),
        title=f"{args.split} {record['metric']} by length percentile")
    print(f"split={args.split} count={record['count']} loss={record['loss']:.6f} "
          f"{record['metric']}={record['value']:.6f}")
    print(f"wrote {metrics_path}, {csv_path}, {figure}")
    return 0


def cmd_analyze_reachability(args):
    _require(args, "n")
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    n = args.n
    hops_needed = reachability_closure(n)
    offsets = chord_graph(n).offsets
    reached = np.zeros(n, dtype=bool)
    reached[0] = True
    frontier = [1]
    while not reached.all():
        reached = np.logical_or.reduce([np.roll(reached, a) for a in offsets])
        frontier.append(int(reached.sum()))
    field = receptive_field(n, ceil_log2(n))

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "reachability.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["depth", "reached", "full"])
        for depth, count in enumerate(frontier):
            writer.writerow([depth, count, int(count == n)])
    figure = plots.frontier_curve(frontier, n, os.path.join(args.out, "reachability.png"))
    print(f"n={n}: full receptive field after {hops_needed} blocks "
          f"(ceil(log2 n) = {ceil_log2(n)}, receptive_field full: {field.full})")
    print(f"wrote {csv_path}, {figure}")
    return 0


def cmd_analyze_reach_prob(args):
    _require(args, "n")
    if args.n < 2:
        raise UsageError(f"--n must be >= 2, got {args.n}")
    hops = args.hops if args.hops is not None else default_hops(args.n)
    if hops < 1:
        raise UsageError(f"--hops must be >= 1, got {hops}")
    report = reaching_probabilities(args.n, hops)

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "reach_prob.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "probability"])
        for node, prob in enumerate(report.probabilities):
            writer.writerow([node, repr(float(prob))])
    stats_path = _write_json(os.path.join(args.out, "reach_prob.json"), {
        "n": report.n, "hops": report.hops, "source": report.source,
        "mean": report.mean, "std": report.std,
        "min": float(report.probabilities.min()),
        "max": float(report.probabilities.max()),
    })
    figure = plots.probability_histogram(report.probabilities,
                                         os.path.join(args.out, "reach_prob.png"), hops)
    print(f"n={report.n} hops={report.hops} mean={report.mean:.12e} std={report.std:.6e}")
    print(f"wrote {csv_path}, {stats_path}, {figure}")
    return 0


def cmd_analyze_rank(args):
    _require(args, "d", "n")
    if args.d < 1 or args.n < 1:
        raise UsageError("--d and --n must be >= 1")
    if args.d * args.n > 64:
        raise UsageError(f"explicit certificates limited to d*n <= 64, got {args.d * args.n}")
    report = rank_certificates(args.d, args.n, Rng(args.seed).split("rank"))
    os.makedirs(args.out, exist_ok=True)
    json_path = _write_json(os.path.join(args.out, "rank.json"), {
        "d": report.d, "n": report.n, "dn": report.d * report.n,
        "is_permutation": report.is_permutation, "w_rank": report.w_rank,
        "block_diag_rank": report.block_diag_rank, "passed": report.passed,
    })
    from .model import rotation_permutation_matrix

    figure = plots.matrix_heatmap(
        rotation_permutation_matrix(args.d, args.n),
        os.path.join(args.out, "rank.png"),
        title=f"rotation permutation matrix, d={args.d}, n={args.n}",
        xlabel="flattened input index", ylabel="flattened output index")
    print(f"d={report.d} n={report.n}: permutation={report.is_permutation} "
          f"w_rank={report.w_rank} block_diag_rank={report.block_diag_rank} "
          f"passed={report.passed}")
    print(f"wrote {json_path}, {figure}")
    return 0


def cmd_analyze_params(args):
    _require(args, "d", "h", "blocks")
    d, h, blocks = args.d, args.h, args.blocks
    if min(d, h, blocks) < 1:
        raise UsageError("--d, --h and --blocks must be >= 1")
    if args.vocab_size is not None and args.in_channels is not None:
        raise UsageError("give at most one of --vocab-size / --in-channels")
    per_block = 2 * d * h + h + d
    embedding = d * (args.vocab_size or args.in_channels or 0)
    cls = d if args.cls else 0
    head = (args.n_outputs or 0) * (d + 1)
    total = blocks * per_block + embedding + cls + head
    payload = {"d": d, "h": h, "blocks": blocks, "per_block": per_block,
               "embedding": embedding, "cls_token": cls, "head": head, "total": total}
    print(f"blocks {blocks} x (2dh + h + d) = {blocks * per_block}; embedding {embedding}; "
          f"cls {cls}; head {head}; total {total}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        print(f"wrote {_write_json(os.path.join(args.out, 'params.json'), payload)}")
    return 0


def cmd_export_activations(args):
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.data, "dataset")
    net = load_checkpoint(args.checkpoint)
    if net.in_channels is not None:
        dataset = load_adding(args.data)
        raw_of = lambda item: item.features()
    else:
        dataset, _ = load_labeled(args.data)
        raw_of = lambda item: item.symbols
    if not 0 <= args.index < len(dataset):
        raise UsageError(f"--index {args.index} out of range for {len(dataset)} instances")
    raw = raw_of(dataset[args.index])

    csv_paths = export_activations(net, raw, args.out)
    figures = []
    for path in csv_paths:
        matrix = np.loadtxt(path, delimiter=",", ndmin=2)
        name = os.path.splitext(os.path.basename(path))[0]
        figures.append(plots.matrix_heatmap(
            matrix, os.path.splitext(path)[0] + ".png",
            title=f"{name} (d x N)", xlabel="position", ylabel="channel"))
    for path in csv_paths + figures:
        print(f"wrote {path}")
    return 0


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_help(file=sys.stderr)
        return 2
    try:
        apply_config_file(args, argv)
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as err:
        kind = "diverged" if isinstance(err, DivergenceError) else "failed"
        print(f"error: {kind}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
