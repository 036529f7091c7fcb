"""Per-edge layer-membership logits from raw signals.

Node-to-edge / edge-to-node encoding: every channel is embedded by ``f1``,
ordered pairs are embedded by ``f2``, node states aggregate their outgoing
pair embeddings through ``f3``, and ``f4`` maps
``node_i || node_j || pair_ij`` to ``K`` logits.
"""

from __future__ import annotations

import numpy as np

from .layers import Mlp, MlpSpec, dense_pair_index, offdiag_pairs
from .tensor import concat, reshape, sum_, take, Tensor


class MembershipEncoder:
    def __init__(self, n_samples, n_layers, rng, hidden=256, dtype=np.float64, hidden_bn=False):
        def bn_flags(n):
            return tuple(hidden_bn or i == n - 1 for i in range(n))

        self.n_layers = n_layers
        self.f1 = Mlp(MlpSpec((n_samples, hidden, hidden), "elu", bn_flags(2)), rng, dtype)
        self.f2 = Mlp(MlpSpec((2 * hidden, hidden, hidden), "elu", bn_flags(2)), rng, dtype)
        self.f3 = Mlp(MlpSpec((hidden, hidden, hidden), "elu", bn_flags(2)), rng, dtype)
        self.f4 = Mlp(MlpSpec((3 * hidden, hidden, hidden, n_layers), "elu", (), activate_output=False), rng, dtype)

    def modules(self):
        return {"f1": self.f1, "f2": self.f2, "f3": self.f3, "f4": self.f4}

    def __call__(self, x):
        return extract_membership(x, self)


def extract_membership(x, encoder):
    """Logits ``H[b, i, j, k]`` for the edge ``i -> j`` in layer ``k``.

    ``x`` is ``(B, N, T)``. Diagonal entries are returned as zeros and carry no
    gradient; nothing downstream may read them.
    """
    if x.ndim != 3:
        raise ValueError(f"expected signals of shape (B, N, T), got {x.shape}")
    b, n, _ = x.shape
    src, dst = offdiag_pairs(n)

    node = encoder.f1(x)
    edge = encoder.f2.pairs(node, src, dst)
    hidden = edge.shape[-1]
    # pairs are grouped by source node, so summing axis 2 aggregates e_ij over j != i
    agg = sum_(reshape(edge, (b, n, n - 1, hidden)), axis=2)
    node2 = encoder.f3(agg)
    logits = encoder.f4.pairs(node2, src, dst, extra=edge)

    k = logits.shape[-1]
    padded = concat([logits, Tensor(np.zeros((b, 1, k), dtype=logits.dtype))], axis=1)
    return reshape(take(padded, dense_pair_index(n), axis=1), (b, n, n, k))
