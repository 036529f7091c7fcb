"""Turning membership logits into multi-layer graphs.

Three samplers are provided: stochastic one-hot assignment (``sto``),
independent per-layer thresholding (``det``) and continuous Gumbel-softmax
weights (``con``). Weights are laid out ``(B, K, N, N)`` with ``W[b, k, i, j]``
the weight of the edge ``i -> j`` in layer ``k``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, ParseError
from .tensor import Tensor, add, div, getitem, mul, sigmoid, softmax, straight_through, transpose

SAMPLERS = ("sto", "det", "con")
_U_CLAMP = 1e-12


@dataclass
class MultiLayerGraph:
    weights: Tensor
    skip_layer: bool = False

    @property
    def n_layers(self):
        return self.weights.shape[1]

    @property
    def n_nodes(self):
        return self.weights.shape[-1]

    def numpy(self):
        return self.weights.data


def offdiag_mask(n, dtype=np.float64):
    return (~np.eye(n, dtype=bool)).astype(dtype)


def _uniform(rng, shape, dtype):
    # clamp after the cast: in float32, 1 - 1e-12 rounds to 1
    eps = max(_U_CLAMP, float(np.finfo(dtype).epsneg))
    return np.clip(rng.random(shape).astype(dtype), eps, 1.0 - eps)


def gumbel_noise(rng, shape, dtype=np.float64):
    """Standard Gumbel samples ``-log(-log(u))``."""
    return -np.log(-np.log(_uniform(rng, shape, dtype)))


def logistic_noise(rng, shape, dtype=np.float64):
    u = _uniform(rng, shape, dtype)
    return np.log(u) - np.log1p(-u)


def gumbel_softmax(logits, tau, noise):
    """``softmax((logits + noise) / tau)`` over the last (layer) axis."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return softmax(div(add(logits, np.asarray(noise, dtype=logits.dtype)), tau), axis=-1)


def _to_graph(per_edge, skip_layer):
    """``(B, N, N, K)`` per-edge values -> graph with zeroed diagonal."""
    n = per_edge.shape[1]
    w = transpose(per_edge, (0, 3, 1, 2))
    return MultiLayerGraph(mul(w, offdiag_mask(n, per_edge.dtype)), skip_layer)


def sample_stochastic(z, training=True, skip_layer=False):
    """One-hot argmax over layers; in training the gradient flows through ``z``."""
    hard = np.zeros_like(z.data)
    np.put_along_axis(hard, z.data.argmax(axis=-1)[..., None], 1.0, axis=-1)
    w = straight_through(hard, z) if training else Tensor(hard)
    return _to_graph(w, skip_layer)


def sample_deterministic(logits, r=0.5, tau=0.5, noise=None, training=False, skip_layer=False):
    """Independent per-layer thresholding ``sigmoid(h) > r``.

    In training a binary-concrete relaxation ``sigmoid((h + L) / tau)`` with
    logistic noise ``L`` is thresholded at ``r`` and the gradient is passed
    straight through to the relaxed value. Evaluation uses the noise-free rule.
    """
    if not 0.0 < r < 1.0:
        raise ValueError(f"threshold r must lie in (0, 1), got {r}")
    if not training:
        prob = 1.0 / (1.0 + np.exp(-logits.data.astype(np.float64)))
        return _to_graph(Tensor((prob > r).astype(logits.dtype)), skip_layer)
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    h = logits if noise is None else add(logits, np.asarray(noise, dtype=logits.dtype))
    soft = sigmoid(div(h, tau))
    return _to_graph(straight_through((soft.data > r).astype(logits.dtype), soft), skip_layer)


def sample_continuous(z, skip_layer=False):
    """Soft assignment used verbatim as edge weights."""
    return _to_graph(z, skip_layer)


def apply_skip(graph):
    """Drop the skip layer (index 0) before message passing."""
    if not graph.skip_layer:
        raise ContractError("apply_skip called on a graph without a skip layer")
    if graph.n_layers < 2:
        raise ContractError("a skip layer needs K >= 2; no layer would remain")
    return MultiLayerGraph(getitem(graph.weights, (slice(None), slice(1, None))), skip_layer=False)


def sample_graph(logits, method, rng, tau=0.5, r=0.5, training=True, skip_layer=False):
    """Dispatch on ``method``; ``rng`` supplies the noise stream."""
    if method == "det":
        noise = logistic_noise(rng, logits.shape, logits.dtype) if training else None
        return sample_deterministic(logits, r, tau, noise, training, skip_layer)
    if method not in SAMPLERS:
        raise ValueError(f"unknown sampler {method!r}; expected one of {SAMPLERS}")
    z = gumbel_softmax(logits, tau, gumbel_noise(rng, logits.shape, logits.dtype))
    if method == "sto":
        return sample_stochastic(z, training, skip_layer)
    return sample_continuous(z, skip_layer)


# -- graph JSON ------------------------------------------------------------------

def graph_to_dict(weights, skip_layer=False, node_names=None, **extra):
    """Single-instance ``(K, N, N)`` weights -> JSON-ready dict (6 significant digits)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 3 or w.shape[1] != w.shape[2]:
        raise DimensionError(f"graph weights must be (K, N, N), got {w.shape}")
    k, n, _ = w.shape
    doc = {
        "n_nodes": n,
        "n_layers": k,
        "skip_layer": bool(skip_layer),
        "layers": [[[float(f"{v:.6g}") for v in row] for row in layer] for layer in w],
    }
    if node_names is not None:
        if len(node_names) != n:
            raise DimensionError(f"{len(node_names)} node names for {n} nodes")
        doc["node_names"] = list(node_names)
    doc.update(extra)
    return doc


def graph_from_dict(doc, source="<graph>"):
    try:
        n, k = int(doc["n_nodes"]), int(doc["n_layers"])
        w = np.asarray(doc["layers"], dtype=np.float64)
        skip = bool(doc.get("skip_layer", False))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(source, f"malformed graph document: {exc}") from None
    if w.shape != (k, n, n):
        raise ParseError(source, f"layer array shape {w.shape} does not match n_layers={k}, n_nodes={n}")
    return w, skip, doc.get("node_names")


def write_graph_json(path, weights, skip_layer=False, node_names=None, **extra):
    with open(path, "w") as fh:
        json.dump(graph_to_dict(weights, skip_layer, node_names, **extra), fh)


def read_graph_json(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(path, exc.msg, line=exc.lineno) from None
    return graph_from_dict(doc, path)
