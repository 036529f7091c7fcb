"""Consistency of extracted graphs across repetitions, and representative graphs."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .sampling import graph_to_dict

MAX_EXHAUSTIVE_LAYERS = 8


@dataclass
class RunGraphSet:
    """Graphs ``(M, K, N, N)`` extracted by one trained model on a fixed instance list."""

    graphs: np.ndarray
    instance_ids: list
    labels: np.ndarray
    skip_layer: bool = False
    name: str = ""

    def __post_init__(self):
        self.graphs = np.asarray(self.graphs, dtype=np.float64)
        if self.graphs.ndim != 4 or self.graphs.shape[2] != self.graphs.shape[3]:
            raise DimensionError(f"graphs must be (M, K, N, N), got {self.graphs.shape}")
        self.instance_ids = list(self.instance_ids)
        self.labels = np.asarray(self.labels)
        if len(self.instance_ids) != self.graphs.shape[0] or len(self.labels) != self.graphs.shape[0]:
            raise DimensionError("instance ids, labels and graphs must have the same length")


@dataclass
class ConsistencyReport:
    score: float
    normalizer: int
    pair_distances: dict = field(default_factory=dict)
    pair_permutations: dict = field(default_factory=dict)
    mode: str = "instance"

    def to_dict(self):
        return {
            "score": self.score,
            "normalizer": self.normalizer,
            "mode": self.mode,
            "pairs": [
                {"runs": list(k), "distance": self.pair_distances[k], "permutation": list(self.pair_permutations[k])}
                for k in self.pair_distances
            ],
        }


@dataclass
class RepresentativeGraph:
    adjacency: np.ndarray  # (K, N, N) binary
    frequency: np.ndarray  # (K, N, N) in [0, 1]
    in_degree: np.ndarray  # (K, N)
    out_degree: np.ndarray  # (K, N)
    edges_per_layer: int


def _offdiag(n):
    return ~np.eye(n, dtype=bool)


def layer_permutations(k):
    if k > MAX_EXHAUSTIVE_LAYERS:
        raise ValueError(f"exhaustive layer matching over {k}! permutations refused (K > {MAX_EXHAUSTIVE_LAYERS})")
    return list(itertools.permutations(range(k)))


def graph_distance(wm, wn):
    """Minimum over layer permutations ``P`` of ``sum |wm[P] - wn|`` off the diagonal.

    Permutations are scanned in lexicographic order and only a strictly
    smaller distance replaces the incumbent, so the first minimizer wins.
    ``P`` is 0-based: layer ``P[k]`` of ``wm`` is matched with layer ``k`` of ``wn``.
    """
    wm, wn = np.asarray(wm, dtype=np.float64), np.asarray(wn, dtype=np.float64)
    if wm.shape != wn.shape or wm.ndim != 3 or wm.shape[1] != wm.shape[2]:
        raise DimensionError(f"graph_distance needs two (K, N, N) arrays of equal shape, got {wm.shape} and {wn.shape}")
    mask = _offdiag(wm.shape[1])
    best_d, best_p = math.inf, tuple(range(wm.shape[0]))
    for perm in layer_permutations(wm.shape[0]):
        d = float(np.abs(wm[list(perm)] - wn)[:, mask].sum())
        if d < best_d:
            best_d, best_p = d, perm
    return best_d, best_p


def _pair_distance(a, b):
    """Best single permutation for two aligned stacks ``(M, K, N, N)``; returns mean per-instance distance."""
    k, n = a.shape[1], a.shape[2]
    mask = _offdiag(n)
    # cost[p, q] = total over instances of |a[:, p] - b[:, q]| off the diagonal
    cost = np.array([[np.abs(a[:, p] - b[:, q])[:, mask].sum() for q in range(k)] for p in range(k)])
    best_d, best_p = math.inf, tuple(range(k))
    for perm in layer_permutations(k):
        d = float(cost[list(perm), np.arange(k)].sum())
        if d < best_d:
            best_d, best_p = d, perm
    return best_d / a.shape[0], best_p


def consistency_score(runs, mode="instance"):
    """1 - (mean over run pairs of the permutation-minimized distance) / (K * N * (N - 1)).

    ``mode="instance"`` compares graphs instance by instance with one layer
    permutation per run pair; ``mode="mean"`` compares the per-run mean graphs.
    """
    runs = list(runs)
    if len(runs) < 2:
        raise ValueError(f"consistency needs at least 2 runs, got {len(runs)}")
    if mode not in ("instance", "mean"):
        raise ValueError(f"mode must be 'instance' or 'mean', got {mode!r}")
    shape = runs[0].graphs.shape[1:]
    for r in runs[1:]:
        if r.graphs.shape[1:] != shape:
            raise DimensionError(f"runs disagree on (K, N, N): {shape} vs {r.graphs.shape[1:]}")
        if r.instance_ids != runs[0].instance_ids:
            raise ContractError("runs do not share the same instance ids in the same order")
    k, n = shape[0], shape[1]
    normalizer = k * n * (n - 1)

    stacks = [r.graphs if mode == "instance" else r.graphs.mean(axis=0, keepdims=True) for r in runs]
    distances, perms = {}, {}
    for a, b in itertools.combinations(range(len(runs)), 2):
        d, p = _pair_distance(stacks[a], stacks[b])
        distances[(a, b)] = d
        perms[(a, b)] = p
    score = 1.0 - float(np.mean(list(distances.values()))) / normalizer
    return ConsistencyReport(score, normalizer, distances, perms, mode)


def _top_count(fraction, n_edges):
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    return min(n_edges, math.ceil(round(fraction * n_edges, 9)))


def representative_graph(graphs, fraction=0.10):
    """Per layer, keep the ``ceil(fraction * N(N-1))`` most frequent edges.

    Weights are binarized at 0.5 before counting. Ties are broken by source
    index, then target index (ascending).
    """
    graphs = np.asarray(graphs, dtype=np.float64)
    if graphs.ndim != 4 or graphs.shape[0] == 0:
        raise ValueError("representative_graph needs a non-empty (M, K, N, N) stack")
    _, k, n, _ = graphs.shape
    mask = _offdiag(n)
    freq = (graphs > 0.5).mean(axis=0) * mask
    count = _top_count(fraction, n * (n - 1))
    src, dst = np.nonzero(mask)
    adj = np.zeros((k, n, n), dtype=np.int64)
    for layer in range(k):
        f = freq[layer, src, dst]
        order = np.lexsort((dst, src, -f))[:count]
        adj[layer, src[order], dst[order]] = 1
    return RepresentativeGraph(adj, freq, adj.sum(axis=1), adj.sum(axis=2), count)


def flatten_graphs(graphs):
    """``(M, K, N, N)`` -> ``(M, K * N * (N-1))`` rows, layer-major, diagonal dropped."""
    graphs = np.asarray(graphs, dtype=np.float64)
    mask = _offdiag(graphs.shape[-1])
    return graphs[:, :, mask].reshape(graphs.shape[0], -1)


def export_graph_embedding_matrix(path, graphs, instance_ids, labels):
    rows = flatten_graphs(graphs)
    if len(instance_ids) != rows.shape[0] or len(labels) != rows.shape[0]:
        raise DimensionError("instance ids and labels must match the number of graphs")
    k, n = graphs.shape[1], graphs.shape[2]
    src, dst = np.nonzero(_offdiag(n))
    header = ["instance_id", "label"] + [f"L{layer}_{i}_{j}" for layer in range(k) for i, j in zip(src, dst)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for iid, label, row in zip(instance_ids, labels, rows):
            writer.writerow([iid, int(label)] + [f"{v:.6g}" for v in row])
    return rows


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)


def representative_to_dict(rep, node_names=None):
    doc = graph_to_dict(rep.adjacency, False, node_names)
    doc["edges_per_layer"] = rep.edges_per_layer
    doc["frequency"] = [[[float(f"{v:.6g}") for v in row] for row in layer] for layer in rep.frequency]
    doc["in_degree"] = rep.in_degree.tolist()
    doc["out_degree"] = rep.out_degree.tolist()
    return doc


def to_dot(rep, node_names=None):
    """DOT digraph; each node carries per-layer in-degree attributes, edges carry their layer."""
    k, n, _ = rep.adjacency.shape
    names = list(node_names) if node_names is not None else [f"v{i}" for i in range(n)]
    lines = ["digraph representative {"]
    for i, name in enumerate(names):
        attrs = ", ".join(f"in_degree_{layer}={int(rep.in_degree[layer, i])}" for layer in range(k))
        total = int(rep.in_degree[:, i].sum())
        lines.append(f'  "{name}" [in_degree={total}, {attrs}];')
    for layer in range(k):
        for i, j in zip(*np.nonzero(rep.adjacency[layer])):
            lines.append(f'  "{names[i]}" -> "{names[j]}" [layer={layer}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
