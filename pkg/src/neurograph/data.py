"""Recordings, segmentation, splits, file formats and the synthetic benchmark.

The synthetic generator plants a class-specific multi-layer directed graph in
a stable vector-autoregressive process: layer ``k`` couples channels at lag
``k``. Ground-truth per-sample adjacencies are kept so that a trivial oracle
can confirm the classes are separable before any model is blamed.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParseError

VARIANCE_FLOOR = 1e-8
DATASET_MAGIC = b"NGDS"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4s5I")


@dataclass
class Recording:
    signals: np.ndarray  # (channels, samples)
    sample_rate: float
    label: int

    def __post_init__(self):
        self.signals = np.asarray(self.signals)
        if self.signals.ndim != 2:
            raise DimensionError(f"recording must be (channels, samples), got {self.signals.shape}")
        if not np.all(np.isfinite(self.signals)):
            raise ValueError("recording contains non-finite values")


@dataclass
class SignalDataset:
    """Segments ``X`` of shape ``(M, N, T)`` with integer labels ``y``."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    adjacency: np.ndarray | None = None  # (M, K, N, N) effective couplings, synthetic only
    templates: np.ndarray | None = None  # (C, K, N, N) planted class graphs

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 3 or self.X.shape[0] != self.y.shape[0]:
            raise DimensionError(f"X {self.X.shape} and y {self.y.shape} disagree")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_nodes(self):
        return self.X.shape[1]

    @property
    def n_samples(self):
        return self.X.shape[2]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        adj = None if self.adjacency is None else self.adjacency[idx]
        return SignalDataset(self.X[idx], self.y[idx], self.num_classes, adj, self.templates)


@dataclass
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def sizes(self):
        return len(self.train), len(self.val), len(self.test)


def zscore(x, axis=-1):
    """Standardize along ``axis``; constant series map to zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=axis, keepdims=True)
    sd = np.sqrt(np.maximum(x.var(axis=axis, keepdims=True), VARIANCE_FLOOR))
    out = (x - mu) / sd
    out[np.broadcast_to(x.var(axis=axis, keepdims=True) < VARIANCE_FLOOR, x.shape)] = 0.0
    return out


# -- segmentation and splitting -----------------------------------------------------

def segment(rec, seg_seconds=3.0, overlap_seconds=2.0):
    """Cut ``rec`` into overlapping windows; each window keeps the recording's label."""
    seg = int(round(seg_seconds * rec.sample_rate))
    hop = seg - int(round(overlap_seconds * rec.sample_rate))
    if seg <= 0 or hop <= 0:
        raise ValueError(f"segment length ({seg}) and hop ({hop}) must be positive")
    total = rec.signals.shape[1]
    if total < seg:
        raise ValueError(f"recording has {total} samples, shorter than one segment of {seg}")
    count = (total - seg) // hop + 1
    return [Recording(rec.signals[:, i * hop:i * hop + seg], rec.sample_rate, rec.label) for i in range(count)]


def split_sizes(n, fractions):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split(n, fractions=(0.8, 0.1, 0.1), seed=0):
    """Random disjoint train/val/test index split of ``range(n)``."""
    n_train, n_val, _ = split_sizes(n, fractions)
    perm = np.random.default_rng(seed).permutation(n)
    return DatasetSplit(
        np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:]), seed
    )


# -- synthetic planted-structure benchmark ---------------------------------------

@dataclass
class SyntheticSpec:
    num_classes: int = 10
    n_nodes: int = 8
    n_samples: int = 384
    n_layers: int = 2
    coupling: float = 0.4
    noise: float = 0.1
    samples_per_class: int = 250
    seed: int = 0
    edge_density: float = 0.15
    edge_dropout: float = 0.1
    persistence: float = 0.0
    burn_in: int = 200
    templates: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.num_classes < 1 or self.n_nodes < 2 or self.n_layers < 1 or self.n_samples < 1:
            raise ValueError("num_classes, n_nodes, n_layers and n_samples must be positive (n_nodes >= 2)")
        if self.coupling < 0 or self.noise <= 0:
            raise ValueError("coupling must be >= 0 and noise > 0")
        if not 0 <= self.edge_dropout < 1 or not 0 < self.edge_density <= 1:
            raise ValueError("edge_dropout must lie in [0, 1) and edge_density in (0, 1]")
        if self.templates is not None:
            t = np.asarray(self.templates, dtype=bool)
            if t.shape != (self.num_classes, self.n_layers, self.n_nodes, self.n_nodes):
                raise DimensionError(f"templates shape {t.shape} does not match the generator settings")
            if t[:, :, np.arange(self.n_nodes), np.arange(self.n_nodes)].any():
                raise ValueError("planted adjacencies must have a zero diagonal")
            self.templates = t


def spectral_radius(lag_mats):
    """Spectral radius of the VAR companion matrix for ``lag_mats[k]`` (lag ``k+1``)."""
    p, n, _ = lag_mats.shape
    comp = np.zeros((n * p, n * p))
    comp[:n, :] = np.concatenate(list(lag_mats), axis=1)
    comp[n:, :-n] = np.eye(n * (p - 1))
    return float(np.abs(np.linalg.eigvals(comp)).max())


def lag_matrices(adjacency, coupling, persistence=0.0):
    """``(K, N, N)`` adjacency (``A[k, i, j]``: edge i -> j) -> VAR lag matrices.

    ``x_t = sum_k L[k] @ x_{t-k-1}`` with ``L[k] = coupling * A[k].T`` plus the
    per-channel ``persistence`` at lag 1.
    """
    mats = coupling * np.swapaxes(np.asarray(adjacency, dtype=np.float64), -1, -2)
    if persistence:
        mats = mats.copy()
        mats[..., 0, :, :] += persistence * np.eye(mats.shape[-1])
    return mats


def _draw_templates(spec, rng):
    offdiag = ~np.eye(spec.n_nodes, dtype=bool)
    out = []
    for _ in range(spec.num_classes):
        for _ in range(1000):
            t = (rng.random((spec.n_layers, spec.n_nodes, spec.n_nodes)) < spec.edge_density) & offdiag
            if not t.any() or any((t == o).all() for o in out):
                continue
            if spectral_radius(lag_matrices(t, spec.coupling, spec.persistence)) < 1.0:
                out.append(t)
                break
        else:
            raise ValueError(
                f"no stable planted graph found for coupling={spec.coupling}, "
                f"persistence={spec.persistence}, density={spec.edge_density}"
            )
    return np.stack(out)


def generate_synthetic(spec):
    """Draw ``samples_per_class`` z-scored segments per class.

    Each sample keeps its class template minus a random ``edge_dropout``
    fraction of edges; its effective coupling tensor is stored in
    ``adjacency``. Removing edges from a non-negative system never raises the
    spectral radius, so every sample inherits its template's stability.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.templates is None:
        templates = _draw_templates(spec, rng)
    else:
        templates = spec.templates
        for c, t in enumerate(templates):
            rho = spectral_radius(lag_matrices(t, spec.coupling, spec.persistence))
            if rho >= 1.0:
                raise ValueError(f"class {c}: planted coupling is unstable (spectral radius {rho:.3f} >= 1)")

    c, k, n = spec.num_classes, spec.n_layers, spec.n_nodes
    m = c * spec.samples_per_class
    y = np.repeat(np.arange(c), spec.samples_per_class)
    keep = rng.random((m, k, n, n)) >= spec.edge_dropout
    adjacency = templates[y] & keep
    lags = lag_matrices(adjacency, spec.coupling, spec.persistence)  # (M, K, N, N)

    steps = spec.burn_in + spec.n_samples
    x = np.zeros((m, steps + k, n))
    eps = rng.standard_normal((m, steps, n)) * spec.noise
    for t in range(steps):
        cur = eps[:, t].copy()
        for lag in range(k):
            cur += np.einsum("mij,mj->mi", lags[:, lag], x[:, t + k - 1 - lag])
        x[:, t + k] = cur
    signals = zscore(np.swapaxes(x[:, k + spec.burn_in:], 1, 2))
    return SignalDataset(signals, y, c, adjacency.astype(np.float64) * spec.coupling, templates)


def nearest_centroid_accuracy(train_feats, train_y, test_feats, test_y, num_classes):
    """Accuracy of a nearest-class-mean classifier (ties resolve to the lowest class)."""
    tr = np.asarray(train_feats, dtype=np.float64).reshape(len(train_y), -1)
    te = np.asarray(test_feats, dtype=np.float64).reshape(len(test_y), -1)
    centroids = np.stack([
        tr[train_y == c].mean(axis=0) if np.any(train_y == c) else np.full(tr.shape[1], np.inf)
        for c in range(num_classes)
    ])
    dist = ((te[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((dist.argmin(axis=1) == test_y).mean())


# -- file formats ------------------------------------------------------------

def write_dataset(path, dataset):
    """Binary segment file: header, then ``label u32`` + ``N*T`` float32 per segment."""
    m, n, t = dataset.X.shape
    with open(path, "wb") as fh:
        fh.write(_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, t, dataset.num_classes, m))
        values = np.ascontiguousarray(dataset.X, dtype="<f4")
        for i in range(m):
            fh.write(struct.pack("<I", int(dataset.y[i])))
            fh.write(values[i].tobytes())


def read_dataset(path):
    data = Path(path).read_bytes()
    if len(data) < _DS_HEADER.size:
        raise ParseError(path, "file too short for dataset header", offset=0)
    magic, version, n, t, num_classes, m = _DS_HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise ParseError(path, f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", offset=0)
    if version != DATASET_VERSION:
        raise ParseError(path, f"unsupported dataset version {version}", offset=4)
    rec = 4 + 4 * n * t
    expected = _DS_HEADER.size + m * rec
    if len(data) != expected:
        raise ParseError(path, f"expected {expected} bytes for {m} segments, found {len(data)}", offset=min(len(data), expected))
    X = np.empty((m, n, t), dtype=np.float32)
    y = np.empty(m, dtype=np.int64)
    for i in range(m):
        off = _DS_HEADER.size + i * rec
        y[i] = struct.unpack_from("<I", data, off)[0]
        if y[i] >= num_classes:
            raise ParseError(path, f"segment {i}: label {y[i]} >= num_classes {num_classes}", offset=off)
        X[i] = np.frombuffer(data, dtype="<f4", count=n * t, offset=off + 4).reshape(n, t)
    return SignalDataset(X, y, num_classes)


def read_csv_recording(path, label, sample_rate=128.0):
    """Rows are time points, columns are channels."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if lineno == 1 and not rows:
                    continue  # header line
                raise ParseError(path, f"non-numeric value in row {row!r}", line=lineno) from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(path, f"expected {len(rows[0])} columns, found {len(rows[-1])}", line=lineno)
    if not rows:
        raise ParseError(path, "no data rows")
    return Recording(np.asarray(rows).T, sample_rate, int(label))


def read_manifest(path):
    """Lines ``path,label``; relative paths resolve against the manifest's folder."""
    base = Path(path).parent
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.rsplit(",", 1)
            if len(parts) != 2:
                raise ParseError(path, "expected 'path,label'", line=lineno)
            try:
                label = int(parts[1])
            except ValueError:
                raise ParseError(path, f"label {parts[1]!r} is not an integer", line=lineno) from None
            p = Path(parts[0].strip())
            entries.append((p if p.is_absolute() else base / p, label))
    return entries


def ingest(path, fmt="binary", sample_rate=128.0, normalize=True):
    """Load recordings from a CSV manifest (``fmt="csv"``) or a binary segment file.

    Each returned recording is z-scored per channel unless ``normalize`` is off.
    """
    if fmt == "csv":
        recs = [read_csv_recording(p, label, sample_rate) for p, label in read_manifest(path)]
        counts = {r.signals.shape[0] for r in recs}
        if len(counts) > 1:
            raise ParseError(path, f"recordings disagree on channel count: {sorted(counts)}")
    elif fmt == "binary":
        ds = read_dataset(path)
        recs = [Recording(x, sample_rate, int(label)) for x, label in zip(ds.X, ds.y)]
    else:
        raise ValueError(f"unknown format {fmt!r}; expected 'csv' or 'binary'")
    if normalize:
        for r in recs:
            r.signals = zscore(r.signals)
    return recs


def recordings_to_dataset(recs, num_classes, seg_seconds=3.0, overlap_seconds=2.0):
    """Segment every recording and z-score each segment per channel."""
    segs = [s for r in recs for s in segment(r, seg_seconds, overlap_seconds)]
    X = zscore(np.stack([s.signals for s in segs]))
    return SignalDataset(X, np.array([s.label for s in segs]), num_classes)
