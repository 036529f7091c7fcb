import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurograph.errors import ContractError, DimensionError
from neurograph.layers import (
    BatchNormState,
    Mlp,
    MlpSpec,
    batchnorm,
    conv1d_dilated,
    conv1d_dilated_branches,
    maxpool1d,
    mlp_forward,
    offdiag_pairs,
    pair_concat,
    pair_linear,
)
from neurograph.tensor import Tensor, concat, grad_check


def test_mlp_paper_widths(rng):
    net = Mlp(MlpSpec.output_bn((8, 256, 256)), rng)
    out = net(Tensor(rng.standard_normal((5, 8))))
    assert out.shape == (5, 256)
    assert sorted(net.norms) == [1]


def test_mlp_identity_layer():
    spec = MlpSpec((3, 3), activation=None)
    x = Tensor(np.arange(6.0).reshape(2, 3))
    out = mlp_forward(spec, [(Tensor(np.eye(3)), Tensor(np.zeros(3)))], x)
    np.testing.assert_array_equal(out.data, x.data)


def test_mlp_width_mismatch(rng):
    net = Mlp(MlpSpec((4, 2)), rng)
    with pytest.raises(DimensionError):
        net(Tensor(np.zeros((2, 5))))


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((4, 0, 2))
    with pytest.raises(ValueError):
        MlpSpec((4, 2), batchnorm=(True, False))


def test_mlp_grad_check(rng):
    net = Mlp(MlpSpec((4, 8, 1), "elu"), rng)
    x = Tensor(rng.standard_normal((6, 4)))
    params = [t for pair in net.params for t in pair]
    assert grad_check(lambda x, *p: net(x).sum(), [x] + params) < 1e-5


def test_conv_branches_match_separate_convs(rng):
    x = Tensor(rng.standard_normal((2, 3, 20)), requires_grad=True)
    dils = (1, 2, 4)
    ks = [Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True) for _ in dils]
    bs = [Tensor(rng.standard_normal(2), requires_grad=True) for _ in dils]
    fused = conv1d_dilated_branches(x, ks, dils, bs)
    sep = concat([conv1d_dilated(x, k, d, b) for k, d, b in zip(ks, dils, bs)], axis=1)
    np.testing.assert_allclose(fused.data, sep.data, rtol=1e-12)
    cw = rng.standard_normal(fused.shape)
    assert grad_check(lambda x, *p: (conv1d_dilated_branches(x, p[:3], dils, p[3:]) * cw).sum(), [x, *ks, *bs]) < 1e-5
    with pytest.raises(DimensionError):
        conv1d_dilated_branches(Tensor(np.zeros((1, 3, 8))), ks, dils, bs)


def test_pair_forward_matches_explicit_concat(rng):
    src, dst = offdiag_pairs(4)
    x = Tensor(rng.standard_normal((2, 4, 3, 5)))
    extra = Tensor(rng.standard_normal((2, 12, 3, 2)))
    net = Mlp(MlpSpec((12, 7, 6), "elu", (False, True)), rng)
    net.train(False)
    explicit = net(concat([pair_concat(x, src, dst), extra], axis=-1))
    np.testing.assert_allclose(net.pairs(x, src, dst, extra=extra).data, explicit.data, rtol=1e-12, atol=1e-12)


def test_pair_linear_grad_check(rng):
    src, dst = offdiag_pairs(3)
    x = Tensor(rng.standard_normal((2, 3, 4)))
    extra = Tensor(rng.standard_normal((2, 6, 2)))
    w = Tensor(rng.standard_normal((10, 5)))
    b = Tensor(rng.standard_normal(5))
    cw = rng.standard_normal((2, 6, 5))
    assert grad_check(lambda *a: (pair_linear(a[0], src, dst, a[2], a[3], extra=a[1]) * cw).sum(), [x, extra, w, b]) < 1e-4
    with pytest.raises(DimensionError):
        pair_linear(x, src, dst, Tensor(np.zeros((9, 5))))


@settings(max_examples=1000, deadline=None, derandomize=True)
@given(st.integers(0, 2**32 - 1))
def test_mlp_finite_outputs(seed):
    rng = np.random.default_rng(seed)
    net = Mlp(MlpSpec.output_bn((6, 16, 16)), rng)
    out = net(Tensor(rng.standard_normal((4, 6)) * 10))
    assert np.all(np.isfinite(out.data))


def test_batchnorm_train_normalizes(rng):
    st_ = BatchNormState.create(5)
    out = batchnorm(Tensor(rng.standard_normal((64, 5)) * 3 + 7), st_).data
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-4)  # eps=1e-5 shrinks variance by ~1e-5/var
    assert np.all(st_.running_var >= 0)


def test_batchnorm_running_stats_update(rng):
    st_ = BatchNormState.create(2)
    x = rng.standard_normal((10, 2))
    batchnorm(Tensor(x), st_)
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_batchnorm_eval_uses_running_stats(rng):
    st_ = BatchNormState.create(3)
    st_.gamma.data[:] = [2.0, 0.5, -1.0]
    st_.beta.data[:] = [0.1, 0.2, 0.3]
    st_.training = False
    x = rng.standard_normal((4, 3))
    out = batchnorm(Tensor(x), st_).data
    np.testing.assert_allclose(out, st_.gamma.data * x / np.sqrt(1 + 1e-5) + st_.beta.data, rtol=1e-12)
    np.testing.assert_array_equal(st_.running_mean, 0)


def test_batchnorm_single_row_in_training_rejected():
    with pytest.raises(ContractError):
        batchnorm(Tensor(np.ones((1, 3))), BatchNormState.create(3))


def test_batchnorm_grad_check(rng):
    st_ = BatchNormState.create(3)
    st_.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    st_.beta.data[:] = rng.standard_normal(3)
    x = Tensor(rng.standard_normal((6, 3)))
    w = rng.standard_normal((6, 3))
    assert grad_check(lambda x, g, b: (batchnorm(x, st_) * w).sum(), [x, st_.gamma, st_.beta]) < 1e-4


def test_conv_identity_kernel(rng):
    x = Tensor(rng.standard_normal((2, 3, 10)))
    k = np.zeros((3, 3, 3))
    k[np.arange(3), np.arange(3), 1] = 1.0
    np.testing.assert_array_equal(conv1d_dilated(x, Tensor(k), 1).data, x.data)


def test_conv_impulse_response():
    x = np.zeros((1, 1, 20))
    x[0, 0, 10] = 1.0
    out = conv1d_dilated(Tensor(x), Tensor(np.full((1, 1, 3), 1 / 3)), 4).data[0, 0]
    assert sorted(np.nonzero(out)[0].tolist()) == [6, 10, 14]


def test_conv_length_check():
    with pytest.raises(DimensionError):
        conv1d_dilated(Tensor(np.zeros((1, 1, 8))), Tensor(np.zeros((1, 1, 3))), 4)


def test_conv_grad_check(rng):
    x = Tensor(rng.standard_normal((1, 2, 16)))
    k = Tensor(rng.standard_normal((3, 2, 3)))
    b = Tensor(rng.standard_normal(3))
    w = rng.standard_normal((1, 3, 16))
    assert grad_check(lambda x, k, b: (conv1d_dilated(x, k, 2, b) * w).sum(), [x, k, b]) < 1e-5


def test_conv_is_linear(rng):
    k = Tensor(rng.standard_normal((4, 2, 3)))
    x, y = rng.standard_normal((2, 3, 2, 32))
    a, b = 1.7, -0.3
    lhs = conv1d_dilated(Tensor(a * x + b * y), k, 8).data
    rhs = a * conv1d_dilated(Tensor(x), k, 8).data + b * conv1d_dilated(Tensor(y), k, 8).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_maxpool_values_and_lengths():
    assert maxpool1d(Tensor(np.array([[[1.0, 3.0, 2.0, 0.0]]])), 4).data.tolist() == [[[3.0]]]
    x = Tensor(np.zeros((1, 1, 384)))
    for _ in range(3):
        x = maxpool1d(x, 4)
    assert x.shape[-1] == 6
    with pytest.raises(DimensionError):
        maxpool1d(Tensor(np.zeros((1, 1, 10))), 4)


def test_maxpool_tie_routes_to_first():
    x = Tensor(np.full((1, 1, 4), 2.0), requires_grad=True)
    maxpool1d(x, 4).sum().backward()
    np.testing.assert_array_equal(x.grad[0, 0], [1, 0, 0, 0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4, 8]))
def test_maxpool_bounds(seed, window):
    x = np.random.default_rng(seed).standard_normal((2, 3, 32))
    out = maxpool1d(Tensor(x), window).data
    assert out.max() <= x.max()
    flat = np.unravel_index(x.argmax(), x.shape)
    assert out[flat[0], flat[1], flat[2] // window] == x.max()


def test_maxpool_grad_check(rng):
    x = Tensor(rng.standard_normal((2, 2, 8)))
    w = rng.standard_normal((2, 2, 2))
    assert grad_check(lambda x: (maxpool1d(x, 4) * w).sum(), [x]) < 1e-5


def test_pair_concat_orders_pairs():
    ii, jj = offdiag_pairs(3)
    assert list(zip(ii.tolist(), jj.tolist())) == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
    x = Tensor(np.arange(6.0).reshape(1, 3, 2))
    out = pair_concat(x, ii, jj).data
    np.testing.assert_array_equal(out[0, 2], [2, 3, 0, 1])
    with pytest.raises(ContractError):
        offdiag_pairs(1)
