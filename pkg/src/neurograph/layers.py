"""Composite layers: fully-connected blocks, batch normalization, dilated
1-D convolution, max pooling, and pairwise (node-to-edge) gathering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, activate_inplace, activation_grad, concat, linear, take


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``(in, hidden..., out)`` of a fully-connected stack.

    ``batchnorm`` holds one flag per affine layer (an empty tuple means no
    normalization anywhere). ``activate_output=False`` leaves the last layer
    linear, which is how logit-producing heads are built.
    """

    widths: tuple
    activation: str | None = "elu"
    batchnorm: tuple = ()
    activate_output: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "batchnorm", tuple(bool(b) for b in self.batchnorm))
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs at least an input and an output width")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"MlpSpec widths must be positive, got {self.widths}")
        if self.batchnorm and len(self.batchnorm) != self.n_layers:
            raise ValueError(f"batchnorm flags ({len(self.batchnorm)}) must match layer count ({self.n_layers})")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @classmethod
    def output_bn(cls, widths, activation="elu"):
        """Activation on every layer, batch normalization on the output layer only."""
        n = len(widths) - 1
        return cls(tuple(widths), activation, tuple(i == n - 1 for i in range(n)))


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, width, dtype=np.float64):
        return cls(
            gamma=Tensor(np.ones(width, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(width, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(width, dtype=dtype),
            running_var=np.ones(width, dtype=dtype),
        )


def batchnorm(x, state):
    """Normalize the last axis of ``x`` over all leading axes.

    In training mode the batch statistics are used and the running
    statistics move towards them with ``state.momentum``; in eval mode only
    the running statistics are used.
    """
    f = x.shape[-1]
    if state.gamma.shape != (f,):
        raise DimensionError(f"batchnorm: feature width {f} does not match gamma shape {state.gamma.shape}")
    gamma, beta = state.gamma, state.beta

    if not state.training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv

        def backward_eval(g):
            g2 = g.reshape(-1, f)
            return (g * (gamma.data * inv), (g2 * xhat.reshape(-1, f)).sum(0), g2.sum(0))

        return Tensor._result(gamma.data * xhat + beta.data, (x, gamma, beta), backward_eval)

    x2 = x.data.reshape(-1, f)
    m = x2.shape[0]
    if m < 2:
        raise ContractError("batchnorm in training mode needs at least 2 rows")
    mu = x2.mean(axis=0)
    centered = x2 - mu
    var = (centered * centered).mean(axis=0)
    invstd = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * invstd
    out = (gamma.data * xhat + beta.data).reshape(x.shape)

    mom = state.momentum
    state.running_mean = (1 - mom) * state.running_mean + mom * mu
    state.running_var = (1 - mom) * state.running_var + mom * var * (m / (m - 1))

    def backward(g):
        g2 = g.reshape(-1, f)
        dgamma = (g2 * xhat).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g2 * gamma.data
        dx = (invstd / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx.reshape(x.shape), dgamma, dbeta

    return Tensor._result(out, (x, gamma, beta), backward)


def mlp_forward(spec, params, x, norms=None):
    """Run ``x`` through the stack described by ``spec``.

    ``params`` is a sequence of ``(weight, bias)`` pairs, ``norms`` maps a
    layer index to its :class:`BatchNormState`. Each layer applies
    affine -> activation -> batchnorm (where configured).
    """
    if x.shape[-1] != spec.widths[0]:
        raise DimensionError(f"mlp input width {x.shape[-1]} != spec input width {spec.widths[0]}")
    h = x
    for i, (w, b) in enumerate(params):
        h = _post_affine(spec, i, linear(h, w, b, _layer_act(spec, i)), norms)
    return h


def _layer_act(spec, i):
    if spec.activation and (i < spec.n_layers - 1 or spec.activate_output):
        return spec.activation
    return None


def _post_affine(spec, i, h, norms):
    if norms and i in norms:
        h = batchnorm(h, norms[i])
    return h


def pair_linear(x, first, second, weight, bias=None, extra=None, act=None):
    """``act((x[:, first] || x[:, second] || extra) @ weight + bias)`` without building the concatenation.

    ``x`` is ``(B, N, ..., F)`` with nodes on axis 1, ``extra`` is
    ``(B, P, ..., E)`` for ``P`` pairs. The two node blocks of ``weight`` are
    applied once per node and then gathered per pair, which saves a factor of
    about ``N - 1`` on them.
    """
    first = np.asarray(first, dtype=np.intp)
    second = np.asarray(second, dtype=np.intp)
    b, n = x.shape[:2]
    f = x.shape[-1]
    p = first.size
    e = 0 if extra is None else extra.shape[-1]
    if weight.ndim != 2 or weight.shape[0] != 2 * f + e:
        raise DimensionError(f"pair_linear: input width {2 * f + e} does not match weight shape {weight.shape}")
    if extra is not None and extra.shape[:2] != (b, p):
        raise DimensionError(f"pair_linear: extra shape {extra.shape} does not match {p} pairs")
    h = weight.shape[1]
    mid = x.shape[2:-1]
    x2 = x.data.reshape(-1, f)
    w = weight.data
    both = (x2 @ np.concatenate([w[:f], w[f:2 * f]], axis=1)).reshape(b, n, -1, 2 * h)
    out = both[:, first, :, :h]
    out += both[:, second, :, h:]
    if extra is not None:
        e2 = extra.data.reshape(-1, e)
        out += (e2 @ w[2 * f:]).reshape(out.shape)
    if bias is not None:
        out += bias.data
    activate_inplace(out, act)
    out = out.reshape((b, p) + mid + (h,))
    parents = [x, weight] + ([] if extra is None else [extra]) + ([] if bias is None else [bias])

    def backward(g):
        g = activation_grad(g, out, act)
        g3 = g.reshape(b, p, -1)
        grads = []
        # scatter-add over pairs as one-hot products, batched over B
        onehot = np.zeros((2, n, p), dtype=g.dtype)
        onehot[0, first, np.arange(p)] = 1.0
        onehot[1, second, np.arange(p)] = 1.0
        g_first = np.matmul(onehot[0], g3).reshape(-1, h)
        g_second = np.matmul(onehot[1], g3).reshape(-1, h)
        gx = g_first @ w[:f].T
        gx += g_second @ w[f:2 * f].T
        grads.append(gx.reshape(x.shape))
        g2 = g.reshape(-1, h)
        gw = [x2.T @ g_first, x2.T @ g_second]
        if extra is not None:
            gw.append(e2.T @ g2)
        grads.append(np.concatenate(gw, axis=0))
        if extra is not None:
            grads.append((g2 @ w[2 * f:].T).reshape(extra.shape))
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._result(out, tuple(parents), backward)


class Mlp:
    def __init__(self, spec, rng, dtype=np.float64):
        self.spec = spec
        self.params = []
        for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            self.params.append((Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)))
        self.norms = {
            i: BatchNormState.create(spec.widths[i + 1], dtype) for i, flag in enumerate(spec.batchnorm) if flag
        }

    def __call__(self, x):
        return mlp_forward(self.spec, self.params, x, self.norms)

    def pairs(self, x, first, second, extra=None):
        """Same as ``self(pair_concat(x, first, second) || extra)``, computed per node first."""
        w, b = self.params[0]
        h = _post_affine(self.spec, 0, pair_linear(x, first, second, w, b, extra, _layer_act(self.spec, 0)), self.norms)
        for i, (w, b) in enumerate(self.params[1:], start=1):
            h = _post_affine(self.spec, i, linear(h, w, b, _layer_act(self.spec, i)), self.norms)
        return h

    def train(self, mode=True):
        for state in self.norms.values():
            state.training = mode

    def named_parameters(self, prefix):
        out = []
        for i, (w, b) in enumerate(self.params):
            out += [(f"{prefix}.{i}.weight", w), (f"{prefix}.{i}.bias", b)]
        for i, st in sorted(self.norms.items()):
            out += [(f"{prefix}.bn{i}.gamma", st.gamma), (f"{prefix}.bn{i}.beta", st.beta)]
        return out

    def named_buffers(self, prefix):
        out = []
        for i, st in sorted(self.norms.items()):
            out += [(f"{prefix}.bn{i}.running_mean", st, "running_mean"), (f"{prefix}.bn{i}.running_var", st, "running_var")]
        return out


# -- convolution and pooling -----------------------------------------------------

def conv1d_dilated(x, kernels, dilation, bias=None):
    """Length-preserving dilated convolution with 3-tap kernels.

    ``x`` is ``(B, C_in, L)``, ``kernels`` is ``(C_out, C_in, 3)``. Taps sit at
    offsets ``-d, 0, +d``; the input is zero-padded by ``d`` on both sides.
    """
    d = int(dilation)
    if x.ndim != 3 or kernels.ndim != 3 or kernels.shape[2] != 3:
        raise DimensionError(f"conv1d_dilated: bad shapes x={x.shape}, kernels={kernels.shape}")
    b, c_in, length = x.shape
    c_out = kernels.shape[0]
    if kernels.shape[1] != c_in:
        raise DimensionError(f"conv1d_dilated: kernels expect {kernels.shape[1]} input channels, x has {c_in}")
    if d < 1:
        raise ValueError(f"dilation must be >= 1, got {d}")
    if length <= 2 * d:
        raise DimensionError(f"conv1d_dilated: length {length} must exceed 2*dilation = {2 * d}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (d, d)))
    cols = np.stack([xp[:, :, k * d:k * d + length] for k in range(3)], axis=2).reshape(b, c_in * 3, length)
    w2 = kernels.data.reshape(c_out, c_in * 3)
    out = np.matmul(w2, cols)
    if bias is not None:
        out = out + bias.data[:, None]
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g):
        gx = gk = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g).reshape(b, c_in, 3, length)
            gxp = np.zeros_like(xp)
            for k in range(3):
                gxp[:, :, k * d:k * d + length] += gcols[:, :, k]
            gx = gxp[:, :, d:d + length]
        if kernels.requires_grad:
            g_flat = g.transpose(1, 0, 2).reshape(c_out, -1)
            c_flat = cols.transpose(1, 0, 2).reshape(c_in * 3, -1)
            gk = (g_flat @ c_flat.T).reshape(kernels.shape)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2))

    return Tensor._result(out, parents, backward)


def conv1d_dilated_branches(x, kernels, dilations, biases):
    """``concat([conv1d_dilated(x, k, d, b) ...], axis=1)`` sharing one padded copy of ``x``."""
    if len(kernels) != len(dilations) or len(biases) != len(dilations):
        raise DimensionError("conv1d_dilated_branches: need one kernel and bias per dilation")
    b, c_in, length = x.shape
    ds = [int(d) for d in dilations]
    for k in kernels:
        if k.ndim != 3 or k.shape[1:] != (c_in, 3):
            raise DimensionError(f"conv1d_dilated_branches: kernel shape {k.shape} does not fit {c_in} input channels")
    if min(ds) < 1:
        raise ValueError(f"dilations must be >= 1, got {ds}")
    if length <= 2 * max(ds):
        raise DimensionError(f"conv1d_dilated_branches: length {length} must exceed 2*dilation = {2 * max(ds)}")

    pad = max(ds)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    widths = [k.shape[0] for k in kernels]
    starts = np.concatenate([[0], np.cumsum(widths)])
    out = np.empty((b, starts[-1], length), dtype=np.result_type(x.data, kernels[0].data))
    cols_all = []
    for i, (k, d, bias) in enumerate(zip(kernels, ds, biases)):
        cols = np.stack([xp[:, :, pad + (t - 1) * d:pad + (t - 1) * d + length] for t in range(3)], axis=2)
        cols = cols.reshape(b, c_in * 3, length)
        cols_all.append(cols)
        seg = out[:, starts[i]:starts[i + 1]]
        np.matmul(k.data.reshape(widths[i], c_in * 3), cols, out=seg)
        seg += bias.data[:, None]

    def backward(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gks, gbs = [], []
        for i, (k, d, cols) in enumerate(zip(kernels, ds, cols_all)):
            gi = g[:, starts[i]:starts[i + 1]]
            w2 = k.data.reshape(widths[i], c_in * 3)
            if gxp is not None:
                gcols = np.matmul(w2.T, gi).reshape(b, c_in, 3, length)
                for t in range(3):
                    gxp[:, :, pad + (t - 1) * d:pad + (t - 1) * d + length] += gcols[:, :, t]
            gks.append(np.matmul(gi, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.shape))
            gbs.append(gi.sum(axis=(0, 2)))
        gx = None if gxp is None else gxp[:, :, pad:pad + length]
        return (gx, *gks, *gbs)

    return Tensor._result(out, (x, *kernels, *biases), backward)


def maxpool1d(x, window):
    """Non-overlapping max over windows of the last axis; ties go to the first index."""
    a = int(window)
    length = x.shape[-1]
    if a < 1 or length % a:
        raise DimensionError(f"maxpool1d: window {a} does not divide length {length}")
    xr = x.data.reshape(x.shape[:-1] + (length // a, a))
    # a strided pass per window slot beats argmax over a short trailing axis
    out = xr[..., 0].copy()
    idx = np.zeros(out.shape, dtype=np.int16)
    for t in range(1, a):
        v = xr[..., t]
        np.copyto(idx, np.int16(t), where=v > out)
        np.maximum(out, v, out=out)

    def backward(g):
        full = np.empty_like(xr)
        for t in range(a):
            np.multiply(g, idx == t, out=full[..., t])
        return (full.reshape(x.shape),)

    return Tensor._result(out, (x,), backward)


# -- node-to-edge gathering -------------------------------------------------------

def offdiag_pairs(n):
    """Ordered pairs ``(i, j)``, ``i != j``, row-major in ``i``.

    Reshaping a per-pair axis of length ``n*(n-1)`` to ``(n, n-1)`` groups the
    pairs by their first index.
    """
    if n < 2:
        raise ContractError(f"need at least 2 nodes to form pairs, got {n}")
    ii, jj = np.nonzero(~np.eye(n, dtype=bool))
    return ii, jj


def dense_pair_index(n):
    """Index map from a dense ``n*n`` layout into ``[pairs..., zero_row]``."""
    idx = np.full((n, n), n * (n - 1), dtype=np.intp)
    ii, jj = offdiag_pairs(n)
    idx[ii, jj] = np.arange(ii.size)
    return idx.reshape(-1)


def pair_concat(x, first, second, axis=1):
    """``x[first] || x[second]`` along the node ``axis``, joined on the last axis."""
    return concat([take(x, first, axis), take(x, second, axis)], axis=-1)

