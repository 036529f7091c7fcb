"""Command-line entry point: ``neurograph <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .analysis import consistency_score, export_graph_embedding_matrix, representative_graph, representative_to_dict, to_dot, write_report
from .data import write_dataset
from .errors import ContractError, DimensionError, NumericalAbort, ParseError
from .experiment import (
    ExperimentConfig,
    extract_graphs,
    load_dataset,
    read_graph_bundle,
    split_dataset,
    train_seed,
    write_graph_bundle,
)
from .train import evaluate, load_model

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("neurograph")


class ConfigError(Exception):
    pass


def _experiment(args):
    try:
        exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.seed:
            exp.seeds = tuple(args.seed)
        if args.out:
            exp.out = args.out
        model = dict(exp.model)
        if args.sampler:
            model["sampler"] = args.sampler
        if args.layers is not None:
            model["n_layers"] = args.layers
        if args.skip:
            model["skip_layer"] = True
        exp.model = model
    except (jsonschema.ValidationError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {exc.filename}") from None
    return exp


def _data(exp):
    ds = load_dataset(exp.data)
    return ds, split_dataset(ds, exp.data)


def _emit(obj, path=None):
    text = json.dumps(obj, indent=2)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    print(text)


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args):
    exp = _experiment(args)
    ds = load_dataset(exp.data)
    out = Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "dataset.ngds", ds)
    if ds.adjacency is not None:
        np.save(out / "adjacency.npy", ds.adjacency)
    print(f"wrote {len(ds)} segments ({ds.n_nodes} channels x {ds.n_samples} samples) to {out / 'dataset.ngds'}")


def cmd_train(args):
    exp = _experiment(args)
    _, splits = _data(exp)
    out = Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(exp.to_dict(), indent=2) + "\n")
    summary = {}
    for seed in exp.seeds:
        _, metrics = train_seed(exp, splits, seed, out)
        summary[seed] = {"best_epoch": metrics.best_epoch, "val_acc": metrics.best_val_acc, "test_acc": metrics.test_acc}
        print(f"seed {seed}: best epoch {metrics.best_epoch}, val {metrics.best_val_acc:.4f}, test {metrics.test_acc:.4f}")
    return summary


def _checkpoint_and_split(args):
    model, _ = load_model(args.checkpoint)
    exp = _experiment(args)
    _, splits = _data(exp)
    ds = getattr(splits, args.split)
    return model, splits, ds


def cmd_evaluate(args):
    model, _, ds = _checkpoint_and_split(args)
    try:
        acc, cm = evaluate(model, ds)
    except DimensionError as exc:
        raise ContractError(str(exc)) from None
    _emit({"split": args.split, "count": len(ds), "accuracy": acc, "confusion_matrix": cm.tolist()}, args.report)


def cmd_extract_graphs(args):
    model, splits, ds = _checkpoint_and_split(args)
    index = {"train": None, "val": None, "test": splits.test_index}[args.split]
    ids = index if index is not None else np.arange(len(ds))
    run = extract_graphs(model, ds, ids)
    out = Path(args.out or Path(args.checkpoint).parent / "graphs")
    write_graph_bundle(out, run)
    print(f"wrote {len(ids)} graphs to {out}")


def cmd_consistency(args):
    if len(args.runs) < 2:
        raise ConfigError("consistency needs at least two run directories")
    runs = [read_graph_bundle(p) for p in args.runs]
    report = consistency_score(runs, mode=args.mode)
    print(f"consistency: {100 * report.score:.2f}% (normalizer {report.normalizer}, mode {report.mode})")
    print("run_a\trun_b\tdistance\tpermutation")
    for (a, b), d in report.pair_distances.items():
        perm = ",".join(str(p) for p in report.pair_permutations[(a, b)])
        print(f"{args.runs[a]}\t{args.runs[b]}\t{d:.4f}\t{perm}")
    if args.out:
        write_report(args.out, report)
    return report


def cmd_repgraph(args):
    runs = [read_graph_bundle(p) for p in args.runs]
    graphs = np.concatenate([r.graphs for r in runs])
    if args.label is not None:
        labels = np.concatenate([r.labels for r in runs])
        graphs = graphs[labels == args.label]
    rep = representative_graph(graphs, args.fraction)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    stem = "representative" if args.label is None else f"representative_class{args.label}"
    (out / f"{stem}.json").write_text(json.dumps(representative_to_dict(rep)) + "\n")
    (out / f"{stem}.dot").write_text(to_dot(rep))
    print(f"{rep.edges_per_layer} edges per layer from {len(graphs)} graphs -> {out / stem}.json, .dot")


def cmd_ablation(args):
    exp = _experiment(args)
    _, splits = _data(exp)
    out = Path(exp.out)
    rows = []
    for seed in exp.seeds:
        _, full = train_seed(exp, splits, seed, out / "full")
        _, abl = train_seed(exp, splits, seed, out / "complete", complete_graph=True)
        rows.append({"seed": seed, "model": "full", "test_acc": full.test_acc})
        rows.append({"seed": seed, "model": "complete_graph", "test_acc": abl.test_acc})
    print("seed\tmodel\ttest_acc")
    for r in rows:
        print(f"{r['seed']}\t{r['model']}\t{r['test_acc']:.4f}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    return rows


def cmd_export_embedding(args):
    run = read_graph_bundle(args.run)
    out = args.out or "embedding.csv"
    rows = export_graph_embedding_matrix(out, run.graphs, run.instance_ids, run.labels)
    print(f"wrote {rows.shape[0]} rows x {rows.shape[1]} columns to {out}")


# -- parser ----------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, action="append", help="training seed; repeat for several runs")
    common.add_argument("--sampler", choices=["sto", "det", "con"])
    common.add_argument("--layers", type=int, help="number of graph layers K")
    common.add_argument("--skip", action="store_true", help="use layer 0 as the skip layer")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="neurograph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset file").set_defaults(fn=cmd_gen_data)
    sub.add_parser("train", parents=[common], help="train one model per seed").set_defaults(fn=cmd_train)
    for name, fn, helptext in (
        ("evaluate", cmd_evaluate, "accuracy and confusion matrix of a checkpoint"),
        ("extract-graphs", cmd_extract_graphs, "per-instance graphs of a checkpoint"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("checkpoint")
        p.add_argument("--split", choices=["train", "val", "test"], default="test")
        if name == "evaluate":
            p.add_argument("--report", help="also write the JSON result here")
        p.set_defaults(fn=fn)

    p = sub.add_parser("consistency", parents=[common], help="consistency score across run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--mode", choices=["instance", "mean"], default="instance")
    p.set_defaults(fn=cmd_consistency)

    p = sub.add_parser("repgraph", parents=[common], help="representative top-fraction graph")
    p.add_argument("runs", nargs="+")
    p.add_argument("--fraction", type=float, default=0.10)
    p.add_argument("--label", type=int, help="restrict to one class")
    p.set_defaults(fn=cmd_repgraph)

    sub.add_parser("ablation", parents=[common], help="full model vs complete-graph ablation").set_defaults(fn=cmd_ablation)

    p = sub.add_parser("export-embedding", parents=[common], help="flattened graph matrix as CSV")
    p.add_argument("run")
    p.set_defaults(fn=cmd_export_embedding)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ParseError, ContractError, DimensionError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
