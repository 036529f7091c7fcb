"""Training loop, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, NumericalAbort, ParseError
from .model import GraphClassifier, ModelConfig
from .tensor import Adam, cross_entropy_loss, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NGPH"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalization needs two rows)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class MetricsLog:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0
    test_acc: float | None = None
    seconds: float = 0.0

    def to_dict(self, with_time=False):
        d = asdict(self)
        if not with_time:
            d.pop("seconds")
        return d


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, arrays, metadata=None):
    """Write named arrays as little-endian float64.

    Layout: ``"NGPH"``, version u32, count u32, metadata length u32 + UTF-8
    JSON, then per array: name length u32, UTF-8 name, rank u32, extents u32
    each, values.
    """
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, len(arrays), len(meta)), meta]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    """Return ``(arrays, metadata)``; arrays come back as float64 in file order."""
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def need(n, what):
        if off + n > len(data):
            raise ParseError(path, f"truncated while reading {what}", offset=off)

    need(16, "header")
    if data[:4] != CHECKPOINT_MAGIC:
        raise ParseError(path, f"bad magic {data[:4]!r}", offset=0)
    version, count, meta_len = struct.unpack_from("<III", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(path, f"unsupported checkpoint version {version}", offset=4)
    off = 16
    need(meta_len, "metadata")
    try:
        meta = json.loads(data[off:off + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(path, f"bad metadata: {exc}", offset=off) from None
    off += meta_len
    arrays = {}
    for _ in range(count):
        need(4, "name length")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        need(n, "name")
        name = data[off:off + n].decode()
        off += n
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        need(4 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        need(8 * size, f"values of {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(data):
        raise ParseError(path, f"{len(data) - off} trailing bytes", offset=off)
    return arrays, meta


def save_model(path, model, extra=None):
    meta = {"model": model.config.to_dict()}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path):
    arrays, meta = load_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, f"checkpoint has no usable model config: {exc}") from None
    model = GraphClassifier(cfg, seed=0)
    model.load_state_dict(arrays)
    return model.eval(), meta


# -- evaluation --------------------------------------------------------------------

def predict(model, X, batch_size=64, return_graphs=False):
    """Eval-mode logits (and graphs) for ``X``; STO/CON noise comes from ``eval_seed``."""
    cfg = model.config
    was_training = model.training
    model.eval()
    rng = np.random.default_rng(cfg.eval_seed)
    logits, graphs = [], []
    try:
        with no_grad():
            for start in range(0, len(X), batch_size):
                out, graph = model(X[start:start + batch_size], rng)
                logits.append(out.data)
                if return_graphs:
                    graphs.append(graph.weights.data.copy())
    finally:
        model.train(was_training)
    logits = np.concatenate(logits) if logits else np.zeros((0, cfg.num_classes))
    if return_graphs:
        return logits, np.concatenate(graphs)
    return logits


def confusion_matrix(y_true, y_pred, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def evaluate(model, dataset, batch_size=64):
    """Accuracy and confusion matrix (rows: true class, columns: predicted)."""
    if dataset.n_nodes != model.config.n_nodes or dataset.n_samples != model.config.n_samples:
        raise DimensionError(
            f"data shape (N={dataset.n_nodes}, T={dataset.n_samples}) does not match the model "
            f"(N={model.config.n_nodes}, T={model.config.n_samples})"
        )
    pred = predict(model, dataset.X, batch_size).argmax(axis=1)
    cm = confusion_matrix(dataset.y, pred, model.config.num_classes)
    acc = float((pred == dataset.y).mean()) if len(dataset) else 0.0
    return acc, cm


# -- training ----------------------------------------------------------------------

def fit(model, train_ds, val_ds, cfg, seed=0, test_ds=None, on_epoch=None, abort_path=None):
    """Train with Adam; keep the parameters of the best validation epoch.

    Returns ``(best_state, metrics)``. The model is left holding the best
    state. A non-finite loss raises :class:`NumericalAbort`; if
    ``abort_path`` is given, the state after the last completed epoch is
    written there first.
    """
    dtype = np.dtype(model.config.dtype)
    shuffle_rng = np.random.default_rng([seed, 1])
    noise_rng = np.random.default_rng([seed, 2])
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    metrics = MetricsLog()
    best_state = model.state_dict()
    best_val = -1.0
    X = train_ds.X.astype(dtype, copy=False)
    start_time = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        # parameters as they stood after the last finished epoch, kept for a numerical abort
        last_good = None if abort_path is None else model.state_dict()
        model.train()
        order = shuffle_rng.permutation(len(train_ds))
        losses, correct, seen = [], 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            opt.zero_grad()
            logits, _ = model(X[idx], noise_rng)
            loss = cross_entropy_loss(logits, train_ds.y[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                if abort_path is not None:
                    model.load_state_dict(last_good)
                    save_model(abort_path, model, {"epoch": epoch - 1, "aborted": True})
                raise NumericalAbort(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
            loss.backward()
            opt.step()
            losses.append(value * len(idx))
            correct += int((logits.data.argmax(axis=1) == train_ds.y[idx]).sum())
            seen += len(idx)

        val_acc, _ = evaluate(model, val_ds)
        metrics.train_loss.append(sum(losses) / seen)
        metrics.train_acc.append(correct / seen)
        metrics.val_acc.append(val_acc)
        if val_acc > best_val:
            best_val = val_acc
            best_state = model.state_dict()
            metrics.best_epoch = epoch
            metrics.best_val_acc = val_acc
        log.info("epoch %d loss %.4f train %.3f val %.3f", epoch, metrics.train_loss[-1], metrics.train_acc[-1], val_acc)
        if on_epoch is not None:
            on_epoch(epoch, metrics)

    model.load_state_dict(best_state)
    if test_ds is not None:
        metrics.test_acc, _ = evaluate(model, test_ds)
    metrics.seconds = time.perf_counter() - start_time
    return best_state, metrics
