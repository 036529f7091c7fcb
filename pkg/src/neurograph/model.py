"""Graph neural network classifier on top of the extracted multi-layer graph."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .features import FeatureExtractor, InceptionSpec
from .inference import MembershipEncoder
from .layers import Mlp, MlpSpec, offdiag_pairs
from .sampling import SAMPLERS, MultiLayerGraph, apply_skip, offdiag_mask, sample_graph
from .tensor import Tensor, as_tensor, concat, reshape, take


@dataclass
class ModelConfig:
    n_nodes: int = 32
    n_samples: int = 384
    num_classes: int = 40
    n_layers: int = 3
    sampler: str = "det"
    skip_layer: bool = False
    tau: float = 0.5
    threshold: float = 0.5
    hidden: int = 256
    message_width: int = 256
    dilations: tuple = (1, 2, 4, 8)
    branch_channels: int = 8
    pool: int = 4
    inception_modules: int = 3
    complete_graph: bool = False
    direction: str = "in"
    hidden_bn: bool = False
    dtype: str = "float64"
    eval_seed: int = 0

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.skip_layer and self.n_layers < 2:
            raise ValueError("a skip layer needs n_layers >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.n_nodes < 2:
            raise ValueError("n_nodes must be >= 2")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.direction not in ("in", "out"):
            raise ValueError(f"direction must be 'in' or 'out', got {self.direction!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.inception.check_length(self.n_samples)

    @property
    def inception(self):
        return InceptionSpec(self.dilations, self.branch_channels, 3, self.pool, self.inception_modules)

    @property
    def effective_layers(self):
        if self.complete_graph:
            return 1
        return self.n_layers - (1 if self.skip_layer else 0)

    @property
    def reduced_length(self):
        return self.inception.reduced_length(self.n_samples)

    @property
    def classifier_input_width(self):
        return self.n_nodes * self.reduced_length * (self.inception.width + self.message_width)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def message_pass(features, weights, g1, direction="in"):
    """Aggregate ``sum_j sum_k w^k * g1^k(u_it || u_jt)`` for every node ``i``.

    ``weights`` is ``(B, K, N, N)`` with ``W[:, k, a, b]`` the edge ``a -> b``.
    With ``direction="in"`` node ``i`` collects over edges ``j -> i``; with
    ``"out"`` over ``i -> j``. One ``g1`` network per layer.
    """
    b, n, t, _ = features.shape
    if weights.shape[-1] != n or weights.shape[-2] != n:
        raise DimensionError(f"features have {n} nodes but graph weights have shape {weights.shape}")
    if weights.shape[1] != len(g1):
        raise DimensionError(f"graph has {weights.shape[1]} layers but {len(g1)} message networks were given")
    tgt, nbr = offdiag_pairs(n)
    flat_edge = nbr * n + tgt if direction == "in" else tgt * n + nbr
    w_flat = take(reshape(weights, (b, weights.shape[1], n * n)), flat_edge, axis=2)
    return aggregate_messages([net.pairs(features, tgt, nbr) for net in g1], w_flat, n)


def aggregate_messages(messages, w_flat, n):
    """``out[b, i] = sum_k sum_j w_flat[b, k, p(i, j)] * messages[k][b, p(i, j)]``.

    ``messages[k]`` is ``(B, P, ...)`` with the ``P = n(n-1)`` pairs grouped by
    target node, as produced by :func:`offdiag_pairs`; ``w_flat`` is ``(B, K, P)``.
    """
    b, k, p = w_flat.shape
    if len(messages) != k or p != n * (n - 1):
        raise DimensionError(f"{len(messages)} message tensors and weights of shape {w_flat.shape} for {n} nodes")
    tail = messages[0].shape[2:]
    width = int(np.prod(tail))
    w4 = w_flat.data.reshape(b, k, n, n - 1).transpose(0, 2, 1, 3).reshape(b * n, k, 1, n - 1)
    ms = [m.data.reshape(b * n, n - 1, width) for m in messages]
    out = np.matmul(w4[:, 0], ms[0])
    for i in range(1, k):
        out += np.matmul(w4[:, i], ms[i])

    def backward(g):
        g3 = g.reshape(b * n, 1, width)
        g_msgs = [np.matmul(w4[:, i].transpose(0, 2, 1), g3).reshape(m.shape) for i, m in enumerate(messages)]
        gw = np.stack([np.matmul(ms[i], g3.transpose(0, 2, 1))[..., 0] for i in range(k)], axis=1)
        return (*g_msgs, gw.reshape(b, n, k, n - 1).transpose(0, 2, 1, 3).reshape(b, k, p))

    return Tensor._result(out.reshape((b, n) + tail), (*messages, w_flat), backward)


def classify(features, messages, g2):
    """Logits from ``vec(U) || vec(H')`` (node-major, then time, then feature)."""
    b = features.shape[0]
    if messages.shape[:3] != features.shape[:3]:
        raise DimensionError(f"feature shape {features.shape} and message shape {messages.shape} disagree")
    return g2(concat([reshape(features, (b, -1)), reshape(messages, (b, -1))], axis=1))


class GraphClassifier:
    def __init__(self, config, seed=0):
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        self.encoder = None
        if not config.complete_graph:
            self.encoder = MembershipEncoder(
                config.n_samples, config.n_layers, rng, config.hidden, dtype, config.hidden_bn
            )
        self.extractor = FeatureExtractor(config.inception, rng, dtype)
        f = config.inception.width
        self.g1 = [
            Mlp(MlpSpec((2 * f, config.hidden, config.message_width), "relu"), rng, dtype)
            for _ in range(config.effective_layers)
        ]
        self.g2 = Mlp(
            MlpSpec((config.classifier_input_width, config.hidden, config.num_classes), "relu", activate_output=False),
            rng,
            dtype,
        )
        self.training = True

    # -- parameter bookkeeping ------------------------------------------------
    def _mlps(self):
        out = {}
        if self.encoder is not None:
            out.update({f"membership.{k}": v for k, v in self.encoder.modules().items()})
        out.update({f"message.{k}": net for k, net in enumerate(self.g1)})
        out["readout"] = self.g2
        return out

    def named_parameters(self):
        out = []
        mlps = self._mlps()
        for name in [n for n in mlps if n.startswith("membership")]:
            out += mlps[name].named_parameters(name)
        out += self.extractor.named_parameters("features")
        for name in [n for n in mlps if not n.startswith("membership")]:
            out += mlps[name].named_parameters(name)
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_buffers(self):
        out = []
        for name, net in self._mlps().items():
            out += net.named_buffers(name)
        return out

    def state_dict(self):
        state = {name: t.data.copy() for name, t in self.named_parameters()}
        for name, holder, attr in self.named_buffers():
            state[name] = np.array(getattr(holder, attr), copy=True)
        return state

    def load_state_dict(self, state):
        expected = {n for n, _ in self.named_parameters()} | {n for n, _, _ in self.named_buffers()}
        if set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise DimensionError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        dtype = np.dtype(self.config.dtype)
        for name, t in self.named_parameters():
            if state[name].shape != t.shape:
                raise DimensionError(f"{name}: stored shape {state[name].shape} != model shape {t.shape}")
            t.data = np.array(state[name], dtype=dtype)
        for name, holder, attr in self.named_buffers():
            setattr(holder, attr, np.array(state[name], dtype=dtype))

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def train(self, mode=True):
        self.training = mode
        for net in self._mlps().values():
            net.train(mode)
        return self

    def eval(self):
        return self.train(False)

    # -- forward -------------------------------------------------------------
    def __call__(self, x, rng=None):
        return model_forward(self, x, rng)


def complete_graph(batch, n, dtype):
    """Unweighted complete directed graph without self-loops, one layer."""
    return MultiLayerGraph(Tensor(np.broadcast_to(offdiag_mask(n, dtype), (batch, 1, n, n)).copy()))


def model_forward(model, x, rng=None):
    """Signals ``(B, N, T)`` -> ``(logits, graph)``.

    ``rng`` drives the sampler noise; in eval mode STO/CON fall back to a
    generator seeded with ``config.eval_seed`` and DET is noise-free. The
    returned graph includes the skip layer, if any.
    """
    cfg = model.config
    x = as_tensor(x, np.dtype(cfg.dtype))
    if x.dtype != np.dtype(cfg.dtype):
        x = Tensor(x.data.astype(cfg.dtype))
    if x.ndim != 3 or x.shape[1] != cfg.n_nodes or x.shape[2] != cfg.n_samples:
        raise DimensionError(f"expected signals (B, {cfg.n_nodes}, {cfg.n_samples}), got {x.shape}")
    if rng is None:
        rng = np.random.default_rng(cfg.eval_seed)

    features = model.extractor(x)
    if cfg.complete_graph:
        graph = complete_graph(x.shape[0], cfg.n_nodes, x.dtype)
        used = graph
    else:
        logits_h = model.encoder(x)
        graph = sample_graph(
            logits_h, cfg.sampler, rng, cfg.tau, cfg.threshold, training=model.training, skip_layer=cfg.skip_layer
        )
        used = apply_skip(graph) if cfg.skip_layer else graph
    messages = message_pass(features, used.weights, model.g1, cfg.direction)
    return classify(features, messages, model.g2), graph
