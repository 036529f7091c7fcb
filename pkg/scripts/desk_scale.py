"""Desk-scale benchmark: full model vs complete-graph ablation, plus graph consistency.

Usage: python3 scripts/desk_scale.py [--seeds 0 1 2 3 4] [--out runs/desk] [--epochs 30]
"""

import argparse
import json
import logging
import time
from pathlib import Path

from neurograph.analysis import consistency_score
from neurograph.data import nearest_centroid_accuracy
from neurograph.experiment import DESK_SEEDS, desk_experiment, load_dataset, read_graph_bundle, split_dataset, train_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(DESK_SEEDS))
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--no-ablation", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    exp = desk_experiment(tuple(args.seeds), args.out)
    exp.train.epochs = args.epochs
    splits = split_dataset(load_dataset(exp.data), exp.data)
    tr, te = splits.train, splits.test
    oracle = nearest_centroid_accuracy(tr.adjacency, tr.y, te.adjacency, te.y, tr.num_classes)
    print(f"nearest-centroid oracle on planted adjacencies: {oracle:.3f}")

    out = Path(args.out)
    rows = []
    for seed in exp.seeds:
        t0 = time.perf_counter()
        _, full = train_seed(exp, splits, seed, out / "full")
        row = {"seed": seed, "full": full.test_acc, "full_minutes": (time.perf_counter() - t0) / 60}
        if not args.no_ablation:
            t0 = time.perf_counter()
            _, abl = train_seed(exp, splits, seed, out / "complete", complete_graph=True)
            row.update(complete_graph=abl.test_acc, complete_minutes=(time.perf_counter() - t0) / 60)
        rows.append(row)
        print(json.dumps(row))

    summary = {"oracle": oracle, "runs": rows}
    if len(exp.seeds) > 1:
        runs = [read_graph_bundle(out / "full" / str(s)) for s in exp.seeds]
        summary["consistency"] = consistency_score(runs).score
        print(f"consistency across {len(runs)} seeds: {100 * summary['consistency']:.2f}%")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
