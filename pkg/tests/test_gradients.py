"""Central-difference gradient checks for every differentiable op.

The finite-difference oracle lives here in the test, independent of both the
vjp closures under test and the package's own gradient-audit command.  All
checks run in float64 with h = 1e-4 against a rel-err threshold of 1e-4
(relative to max(|analytic|, |numeric|, 1)), on 10 random instances each.
"""

import numpy as np
import pytest

from mssdmpa import index_pooling as ip
from mssdmpa import nn_ops as N
from mssdmpa import tensor as T
from mssdmpa.tensor import Tensor

H = 1e-4
TOL = 1e-4


def numerical_grads(fn, arrays):
    """Central differences of scalar fn() w.r.t. each array, perturbed in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + H
            fp = fn()
            flat[i] = keep - H
            fm = fn()
            flat[i] = keep
            gflat[i] = (fp - fm) / (2 * H)
        grads.append(g)
    return grads


def max_rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom))


def check(build, arrays, tol=TOL):
    """build(tensors) -> scalar Tensor; compares backward() against numerical grads."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(tensors)
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]

    def scalar():
        fresh = [Tensor(a) for a in arrays]
        return float(build(fresh).data)

    numeric = numerical_grads(scalar, arrays)
    for got, want in zip(analytic, numeric):
        assert max_rel_err(got, want) <= tol


def weighted_sum(t, seed):
    """Random-projection scalarizer so the check exercises all output elements."""
    r = np.random.default_rng(seed).standard_normal(t.shape)
    return (t * Tensor(r)).sum()


@pytest.mark.parametrize("trial", range(10))
def test_elementwise_and_reduction_grads(trial):
    rng = np.random.default_rng(trial)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    c = rng.standard_normal((1, 4))  # broadcast operand
    check(lambda ts: weighted_sum(ts[0] + ts[1], 1) + weighted_sum(ts[0] * ts[1], 2), [a, b])
    check(lambda ts: weighted_sum(ts[0] - ts[1], 3), [a, c])
    check(lambda ts: weighted_sum(ts[0] / (ts[1] * ts[1] + 1.0), 4), [a, b])
    check(lambda ts: weighted_sum(-ts[0], 5), [a])
    check(lambda ts: weighted_sum((ts[0] * ts[0] + 0.5) ** 1.5, 6), [a])
    shifted = a + np.sign(a) * 0.5  # keep away from the |.| kink
    check(lambda ts: weighted_sum(ts[0].abs(), 7), [shifted])
    check(lambda ts: weighted_sum((ts[0] * ts[0] + 0.5).log(), 8), [a])
    check(lambda ts: weighted_sum(ts[0].sum(axis=1, keepdims=True), 9), [a])
    check(lambda ts: weighted_sum(ts[0].mean(axis=0), 10), [a])
    check(lambda ts: ts[0].mean(), [a])
    check(lambda ts: weighted_sum(ts[0].reshape(4, 3), 11), [a])


@pytest.mark.parametrize("trial", range(10))
def test_activation_and_clip_grads(trial):
    rng = np.random.default_rng(20 + trial)
    a = rng.standard_normal((3, 4))
    a += np.sign(a) * 0.1  # away from the relu kink
    check(lambda ts: weighted_sum(ts[0].relu(), 1), [a])
    check(lambda ts: weighted_sum(ts[0].sigmoid(), 2), [a])
    inside = rng.uniform(-0.8, 0.8, (3, 4))
    check(lambda ts: weighted_sum(ts[0].clip(-1.0, 1.0), 3), [inside])


def test_concat_grads():
    rng = np.random.default_rng(30)
    a = rng.standard_normal((2, 3, 2, 2))
    b = rng.standard_normal((2, 2, 2, 2))
    check(lambda ts: weighted_sum(T.concat(ts, axis=1), 1), [a, b])


@pytest.mark.parametrize("trial", range(10))
def test_conv2d_grads(trial):
    rng = np.random.default_rng(40 + trial)
    groups = [1, 2][trial % 2]
    spec = N.ConvSpec(kernel=3, stride=[1, 2][trial % 2], padding=trial % 3, dilation=1 + trial % 2, groups=groups)
    c_in, c_out = 2 * groups, 2 * groups
    h = 7 + trial % 2
    if N.conv_out_dim(h, spec) < 1:
        pytest.skip("degenerate")
    x = rng.standard_normal((c_in, h, h))
    w = rng.standard_normal((c_out, c_in // groups, 3, 3))
    b = rng.standard_normal(c_out)
    check(lambda ts: weighted_sum(N.conv2d(ts[0], ts[1], ts[2], spec), trial), [x, w, b])


@pytest.mark.parametrize("trial", range(10))
def test_transposed_conv2d_grads(trial):
    rng = np.random.default_rng(60 + trial)
    groups = [1, 2][trial % 2]
    spec = N.ConvSpec(kernel=[4, 3][trial % 2], stride=[2, 1][trial % 2], padding=1, groups=groups)
    c_in, c_out = 2 * groups, 2 * groups
    x = rng.standard_normal((c_in, 4, 4))
    w = rng.standard_normal((c_in, c_out // groups, spec.kernel, spec.kernel))
    b = rng.standard_normal(c_out)
    check(lambda ts: weighted_sum(N.transposed_conv2d(ts[0], ts[1], ts[2], spec), trial), [x, w, b])


@pytest.mark.parametrize("mode", ["train", "eval"])
@pytest.mark.parametrize("trial", range(5))
def test_batch_norm_grads(mode, trial):
    rng = np.random.default_rng(80 + trial)
    x = rng.standard_normal((2, 3, 4, 4))
    gamma = rng.standard_normal(3) + 1.5
    beta = rng.standard_normal(3)
    rmean = rng.standard_normal(3).astype(np.float32)
    rvar = (np.abs(rng.standard_normal(3)) + 0.5).astype(np.float32)

    def build(ts):
        y = N.batch_norm(ts[0], ts[1], ts[2], rmean.copy(), rvar.copy(), mode)
        return weighted_sum(y, trial)

    check(build, [x, gamma, beta])


@pytest.mark.parametrize("trial", range(10))
def test_resampling_grads(trial):
    rng = np.random.default_rng(100 + trial)
    x = rng.standard_normal((2, 3, 4))
    check(lambda ts: weighted_sum(N.bilinear_upsample(ts[0], (5, 9)), 1), [x])
    check(lambda ts: weighted_sum(N.global_avg_pool(ts[0]), 2), [x])


@pytest.mark.parametrize("trial", range(10))
def test_pooling_grads(trial):
    rng = np.random.default_rng(120 + trial)
    x = rng.standard_normal((2, 4, 4))
    # keep window values well separated so FD does not cross an argmax tie
    x += np.arange(x.size).reshape(x.shape) * 0.01
    check(lambda ts: weighted_sum(N.max_pool2d(ts[0], 2), 1), [x])
    check(lambda ts: weighted_sum(N.avg_pool2d(ts[0], 2), 2), [x])
    pos = np.abs(rng.standard_normal((2, 4, 4))) + 0.2
    check(lambda ts: weighted_sum(N.stochastic_pool(ts[0], 2, mode="eval"), 3), [pos])


def test_stochastic_pool_train_grad_routes_to_sampled_cell():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]), requires_grad=True)
    y = N.stochastic_pool(x, 2, mode="train", rng=np.random.default_rng(5))
    y.sum().backward()
    assert x.grad.sum() == 1.0 and (x.grad >= 0).all()
    picked = x.data[0][x.grad[0] == 1.0]
    assert picked.size == 1 and y.data.reshape(()) == picked[0]


@pytest.mark.parametrize("trial", range(10))
def test_index_pool_roundtrip_grads(trial):
    rng = np.random.default_rng(140 + trial)
    x = rng.standard_normal((3, 4, 4))
    check(lambda ts: weighted_sum(ip.index_pool(ts[0], 2), 1), [x])
    y = rng.standard_normal((4, 3, 2, 2))
    check(lambda ts: weighted_sum(ip.index_unpool(ts[0], 2), 2), [y])


def test_index_pool_grad_is_permutation():
    x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 4, 4), requires_grad=True)
    ip.index_pool(x, 2).sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((1, 4, 4)))


@pytest.mark.parametrize("trial", range(10))
def test_depthwise_mix_grads(trial):
    rng = np.random.default_rng(160 + trial)
    x = rng.standard_normal((4, 5, 5))
    w = rng.standard_normal((4, 1, 3, 3))
    check(lambda ts: weighted_sum(ip.depthwise_mix(ts[0], ts[1]), 1), [x, w])
