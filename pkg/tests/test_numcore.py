import math

import numpy as np
import pytest
from scipy import special

import numcore
from errors import DomainError, ShapeError
from numcore import Var, grad_check


class TestSpecialFunctions:

    @pytest.mark.parametrize('x', [0.5, 1.0, 2.0, 7.3, 100.0])
    def test_digamma_recurrence(self, x):
        assert numcore.digamma(x + 1.0) == pytest.approx(numcore.digamma(x) + 1.0 / x, abs=1e-10)

    @pytest.mark.parametrize('n', range(21))
    def test_lgamma_matches_log_factorial(self, n):
        assert numcore.lgamma(n + 1.0) == pytest.approx(math.log(math.factorial(n)), abs=1e-9)

    def test_known_values(self):
        assert numcore.lgamma(0.5) == pytest.approx(0.5 * math.log(math.pi), abs=1e-12)
        assert numcore.digamma(1.0) == pytest.approx(-np.euler_gamma, abs=1e-12)
        assert numcore.trigamma(1.0) == pytest.approx(math.pi ** 2 / 6.0, abs=1e-12)

    def test_against_scipy_oracle(self, rng):
        x = np.concatenate([rng.uniform(1e-3, 1.0, 200), rng.uniform(1.0, 50.0, 200), [1e6]])
        np.testing.assert_allclose(numcore.lgamma(x), special.gammaln(x), rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(numcore.digamma(x), special.digamma(x), rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(numcore.trigamma(x), special.polygamma(1, x), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(numcore.tetragamma(x), special.polygamma(2, x), rtol=1e-8, atol=1e-12)

    def test_shapes_follow_input(self):
        assert isinstance(numcore.digamma(2.0), float)
        assert numcore.trigamma(np.ones((3, 2))).shape == (3, 2)

    @pytest.mark.parametrize('kind', ['lgamma', 'digamma', 'trigamma'])
    def test_non_positive_argument_is_a_domain_error(self, kind):
        with pytest.raises(DomainError):
            numcore.special_fn(0.0, kind)
        with pytest.raises(DomainError):
            numcore.special_fn(np.array([1.0, -2.0]), kind)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            numcore.special_fn(1.0, 'gamma')


class TestVar:

    def test_exp_at_zero(self):
        x = Var(0.0, requires_grad=True)
        y = numcore.exp(x)
        y.backward()
        assert y.item() == 1.0
        assert float(x.grad) == pytest.approx(1.0)

    def test_max_routes_subgradient_to_argmax(self):
        x = Var([3.0, 1.0, 2.0], requires_grad=True)
        y = x.max(axis=0)
        y.backward()
        assert y.item() == 3.0
        np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])

    def test_max_ties_go_to_lowest_index(self):
        x = Var([[2.0, 5.0], [2.0, 1.0]], requires_grad=True)
        x.max(axis=0).sum().backward()
        np.testing.assert_array_equal(x.grad, [[1.0, 1.0], [0.0, 0.0]])

    def test_max_matches_enumeration(self, rng):
        values = rng.integers(0, 4, size=(6, 3)).astype(float)
        x = Var(values, requires_grad=True)
        x.max(axis=0).sum().backward()
        for column in range(3):
            winner = min(i for i in range(6) if values[i, column] == values[:, column].max())
            expected = np.zeros(6)
            expected[winner] = 1.0
            np.testing.assert_array_equal(x.grad[:, column], expected)

    def test_softmax_rows_sum_to_one(self, rng):
        y = numcore.softmax(Var(rng.normal(scale=30.0, size=(5, 7))), axis=-1)
        assert np.all(y.value >= 0)
        np.testing.assert_allclose(y.value.sum(axis=-1), 1.0, atol=1e-12)

    def test_log_of_non_positive_value(self):
        with pytest.raises(DomainError):
            numcore.log(Var([1.0, 0.0]))

    def test_backward_needs_a_scalar(self):
        with pytest.raises(ShapeError):
            Var([1.0, 2.0], requires_grad=True).exp().backward()

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeError):
            Var(np.ones(3)) + Var(np.ones(4))

    def test_matmul_shape_check(self):
        with pytest.raises(ShapeError):
            Var(np.ones((2, 3))) @ Var(np.ones((2, 3)))

    def test_gradients_accumulate_across_uses(self):
        x = Var(2.0, requires_grad=True)
        (x * x + x).backward()
        assert float(x.grad) == pytest.approx(5.0)

    def test_detach_blocks_gradient(self):
        x = Var(3.0, requires_grad=True)
        (x * x.detach()).backward()
        assert float(x.grad) == pytest.approx(3.0)

    def test_ndarray_on_the_left(self):
        x = Var([1.0, 2.0], requires_grad=True)
        y = np.array([3.0, 4.0]) - x
        assert isinstance(y, Var)
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, [-1.0, -1.0])

    def test_maximum_clamps_and_stops_gradient(self):
        x = Var([0.5, -1.0], requires_grad=True)
        y = numcore.maximum(x, 0.0)
        y.sum().backward()
        np.testing.assert_array_equal(y.value, [0.5, 0.0])
        np.testing.assert_array_equal(x.grad, [1.0, 0.0])


def _smooth_ops():
    """(name, builder taking one Var -> scalar Var, input sampler)."""
    w = np.array([[0.3, 0.2], [0.1, 0.5], [0.4, 0.2]])
    return [
        ('add_mul', lambda v: (v * v + 2.0 * v).sum(), lambda r: r.normal(size=(3, 2))),
        ('div', lambda v: (1.0 / v).sum(), lambda r: r.uniform(0.5, 2.0, size=4)),
        ('power', lambda v: (v ** 3).mean(), lambda r: r.uniform(0.5, 2.0, size=5) * r.choice([-1.0, 1.0], size=5)),
        ('matmul', lambda v: numcore.tanh(v @ w).sum(), lambda r: r.normal(size=(4, 3))),
        ('softmax', lambda v: (numcore.softmax(v, axis=0) * np.arange(1.0, 6.0)).sum(), lambda r: r.normal(size=5)),
        ('log_exp', lambda v: numcore.log(numcore.exp(v) + 1.0).sum(), lambda r: r.normal(size=3)),
        ('lgamma', lambda v: numcore.lgamma_op(v).sum(), lambda r: r.uniform(0.5, 5.0, size=3)),
        ('digamma', lambda v: numcore.digamma_op(v).sum(), lambda r: r.uniform(0.5, 5.0, size=3)),
        ('trigamma', lambda v: numcore.trigamma_op(v).sum(), lambda r: r.uniform(0.5, 5.0, size=3)),
        ('getitem_stack', lambda v: (numcore.stack([v[0], v[2]]) ** 2).sum(), lambda r: r.normal(size=(3, 2)) + 2.0),
        ('reshape_T', lambda v: (v.reshape((2, 3)).T * np.arange(6.0).reshape(3, 2)).sum(),
         lambda r: r.normal(size=6)),
    ]


@pytest.mark.parametrize('name,build,sample', _smooth_ops(), ids=[op[0] for op in _smooth_ops()])
def test_gradients_match_central_differences(name, build, sample):
    r = np.random.default_rng(99)
    for _ in range(100):
        v = Var(sample(r), requires_grad=True)
        assert grad_check(lambda: build(v), [v], eps=1e-5) < 1e-4


class TestGradCheck:

    def test_quadratic(self):
        w = Var(3.0, requires_grad=True)
        assert grad_check(lambda: w * w, [w]) < 1e-6

    def test_constant_function(self):
        w = Var([1.0, 2.0], requires_grad=True)
        assert grad_check(lambda: (w * 0.0).sum() + 4.0, [w]) == 0.0

    def test_non_scalar_loss(self):
        w = Var([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            grad_check(lambda: w * 2.0, [w])

    @pytest.mark.parametrize('eps', [1e-9, 1e-2])
    def test_eps_range(self, eps):
        w = Var(1.0, requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda: w * w, [w], eps=eps)
