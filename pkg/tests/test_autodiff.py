import numpy as np
import pytest

from skelgen.autodiff import Tensor, layer_norm, linear, mse
from conftest import finite_difference_max_rel_error

TOL = 1e-6


def leaf(shape, seed):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=True)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_elementwise_arithmetic_gradients(seed):
    x = leaf((4, 5), seed)
    y = leaf((4, 5), seed + 10)
    fn = lambda a, b: a * b + a / (b * b + 3.0) - (a + 1.5) ** 2
    assert finite_difference_max_rel_error(fn, [x, y], seed=seed) < TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matmul_gradients(seed):
    a = leaf((4, 6), seed)
    b = leaf((6, 3), seed + 10)
    assert finite_difference_max_rel_error(lambda x, y: x @ y, [a, b], seed=seed) < TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gelu_exp_sqrt_gradients(seed):
    x = Tensor(np.abs(np.random.default_rng(seed).standard_normal((5, 4))) + 0.5, requires_grad=True)
    fn = lambda a: a.gelu() + a.exp() * 0.01 + a.sqrt()
    assert finite_difference_max_rel_error(fn, [x], seed=seed) < TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_softmax_gradients(seed):
    x = leaf((5, 7), seed)
    assert finite_difference_max_rel_error(lambda a: a.softmax(axis=-1), [x], seed=seed) < TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_norm_gradients(seed):
    x = leaf((6, 8), seed)
    g = leaf((8,), seed + 1)
    b = leaf((8,), seed + 2)
    assert finite_difference_max_rel_error(layer_norm, [x, g, b], seed=seed) < TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_and_mse_gradients(seed):
    x = leaf((7, 4), seed)
    w = leaf((4, 3), seed + 1)
    b = leaf((3,), seed + 2)
    target = np.random.default_rng(seed + 3).standard_normal((7, 3))
    fn = lambda xx, ww, bb: mse(linear(xx, ww, bb), target)
    assert finite_difference_max_rel_error(fn, [x, w, b], seed=seed) < TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_reduction_and_shape_op_gradients(seed):
    x = leaf((4, 6), seed)
    fn = lambda a: (a.max(axis=1) + a.mean(axis=0) .sum()) * a.sum(axis=1, keepdims=True).T
    assert finite_difference_max_rel_error(fn, [x], seed=seed) < TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gather_concat_slice_gradients(seed):
    x = leaf((6, 3), seed)
    y = leaf((6, 2), seed + 1)
    idx = np.array([0, 2, 2, 5, 1])

    def fn(a, b):
        g = a.gather_rows(idx)
        c = Tensor.concat([a, b], axis=1)
        return g.sum() + c[:, 1:4] * 2.0

    assert finite_difference_max_rel_error(fn, [x, y], seed=seed) < TOL


def test_broadcast_addition_accumulates_gradient():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    (x + b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_gradient_accumulates_across_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x * 3.0
    y.backward()
    assert x.grad[0] == pytest.approx(2 * 2.0 + 3.0)


def test_zero_grad_clears_state():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    assert x.grad is not None
    x.zero_grad()
    assert x.grad is None
