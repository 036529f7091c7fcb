"""Per-node temporal features from stacked dilated inception modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .layers import conv1d_dilated_branches, maxpool1d
from .tensor import Tensor, elu, reshape, transpose


@dataclass(frozen=True)
class InceptionSpec:
    dilations: tuple = (1, 2, 4, 8)
    channels: int = 8
    kernel_size: int = 3
    pool: int = 4
    modules: int = 3

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError(f"dilation rates must be >= 1, got {self.dilations}")
        if self.modules < 1 or self.channels < 1 or self.pool < 1:
            raise ValueError("modules, channels and pool must be >= 1")
        if self.kernel_size != 3:
            raise ValueError("only 3-tap kernels are supported")

    @property
    def width(self):
        return self.channels * len(self.dilations)

    def reduced_length(self, n_samples):
        return n_samples // self.pool ** self.modules

    def check_length(self, n_samples):
        factor = self.pool ** self.modules
        if n_samples % factor:
            raise DimensionError(f"signal length {n_samples} is not divisible by pool**modules = {factor}")
        # the deepest module sees the shortest sequence
        shortest = n_samples // self.pool ** (self.modules - 1)
        if shortest <= 2 * max(self.dilations):
            raise DimensionError(
                f"signal length {n_samples} too short: module {self.modules} sees length {shortest}, "
                f"needs > {2 * max(self.dilations)}"
            )


class FeatureExtractor:
    """Branch kernels ``(channels, C_in, 3)`` and biases per module and dilation."""

    def __init__(self, spec, rng, dtype=np.float64):
        self.spec = spec
        self.kernels = []
        self.biases = []
        c_in = 1
        for _ in range(spec.modules):
            ks, bs = [], []
            bound = 1.0 / np.sqrt(3 * c_in)
            for _ in spec.dilations:
                ks.append(Tensor(rng.uniform(-bound, bound, (spec.channels, c_in, 3)).astype(dtype), requires_grad=True))
                bs.append(Tensor(np.zeros(spec.channels, dtype=dtype), requires_grad=True))
            self.kernels.append(ks)
            self.biases.append(bs)
            c_in = spec.width

    def __call__(self, x):
        return extract_features(x, self)

    def named_parameters(self, prefix):
        out = []
        for m, (ks, bs) in enumerate(zip(self.kernels, self.biases)):
            for d, k, b in zip(self.spec.dilations, ks, bs):
                out += [(f"{prefix}.{m}.d{d}.kernel", k), (f"{prefix}.{m}.d{d}.bias", b)]
        return out


def inception_module(x, kernels, biases, dilations, pool):
    """Parallel dilated convolutions -> channel concat -> ELU -> max-pool."""
    return maxpool1d(elu(conv1d_dilated_branches(x, kernels, dilations, biases)), pool)


def extract_features(x, extractor):
    """``(B, N, T)`` signals -> ``(B, N, T', F)`` features.

    Every channel is processed as its own 1-channel sequence with shared
    weights, so node features are equivariant to channel permutations.
    """
    spec = extractor.spec
    b, n, t = x.shape
    spec.check_length(t)
    h = reshape(x, (b * n, 1, t))
    for ks, bs in zip(extractor.kernels, extractor.biases):
        h = inception_module(h, ks, bs, spec.dilations, spec.pool)
    t_red = h.shape[-1]
    return transpose(reshape(h, (b, n, spec.width, t_red)), (0, 1, 3, 2))
