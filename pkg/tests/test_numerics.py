import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srnn import numerics as nx
from srnn.numerics import ContractError, NumericError, ShapeError, Tensor


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def away_from_kinks(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    while np.any(np.abs(x) < margin):
        x = rng.normal(size=shape)
    return x


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nx.matmul(np.eye(2), b).data, b)

    def test_zero(self):
        out = nx.matmul(np.zeros((3, 4)), np.random.default_rng(0).normal(size=(4, 2)))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(nx.matmul(a, b).data, loop_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            nx.matmul(np.ones((2, 3)), np.ones((4, 2)))

    def test_identity_associativity_bitwise(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
        left = nx.matmul(nx.matmul(a, np.eye(4)), b).data
        np.testing.assert_array_equal(left, nx.matmul(a, b).data)

    def test_linear_matches_matmul_transpose(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=3)
        np.testing.assert_allclose(nx.linear(x, w, b).data, x @ w.T + b, atol=1e-14)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert nx.sigmoid(np.array([0.0])).data[0] == 0.5

    def test_relu(self):
        np.testing.assert_array_equal(nx.relu(np.array([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_affine_combine_half(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=6), rng.normal(size=6)
        z = np.full(6, 0.5)
        out = nx.affine_combine(z, a, b).data
        expect = [(1 - z[i]) * a[i] + z[i] * b[i] for i in range(6)]
        np.testing.assert_allclose(out, expect, atol=1e-15)
        np.testing.assert_allclose(out, 0.5 * a + 0.5 * b, atol=1e-15)

    def test_no_broadcasting(self):
        with pytest.raises(ShapeError):
            nx.add(np.ones((2, 3)), np.ones(3))
        with pytest.raises(ShapeError):
            nx.mul(np.ones((2, 3)), np.ones((3, 2)))

    def test_add_bias_is_explicit(self):
        out = nx.add_bias(np.zeros((2, 3)), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
        with pytest.raises(ShapeError):
            nx.add_bias(np.zeros((2, 3)), np.ones(2))

    def test_sigmoid_extreme_inputs_finite(self):
        s = nx.sigmoid(np.array([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(s))
        assert s[0] == 0.0 and s[1] == 1.0


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(nx.softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    @pytest.mark.parametrize("c", [-1e4, -3.0, 0.0, 7.5, 1e4])
    def test_constant_logits_uniform(self, c):
        np.testing.assert_allclose(nx.softmax(np.full(4, c)), 0.25, atol=1e-15)

    def test_large_gap_against_log_domain_oracle(self):
        import mpmath
        mpmath.mp.dps = 50
        p = nx.softmax(np.array([1000.0, 0.0]))
        lse = mpmath.log(mpmath.exp(1000) + 1)
        expect = [float(mpmath.exp(1000 - lse)), float(mpmath.exp(0 - lse))]
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, expect, rtol=1e-12, atol=1e-300)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            nx.softmax(np.array([0.0, np.inf]))
        with pytest.raises(NumericError):
            nx.softmax(np.array([np.nan, 1.0]))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
           st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, z, c):
        p = nx.softmax(z)
        assert abs(p.sum() - 1) < 1e-6
        q = nx.softmax(z + c)
        np.testing.assert_allclose(p, q, atol=1e-6)
        assert np.argmax(p) == np.argmax(q) or p[np.argmax(q)] == p.max()


class TestCrossEntropy:
    def test_uniform(self):
        loss = nx.cross_entropy_from_logits(np.zeros((3, 10)), np.array([0, 4, 9]))
        assert math.isclose(float(loss.data), math.log(10), rel_tol=1e-12)

    def test_confident_limit(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 50.0
        assert float(nx.cross_entropy_from_logits(logits, np.array([2])).data) < 1e-6

    def test_against_two_step_oracle(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(scale=3, size=(7, 6))
        labels = rng.integers(0, 6, size=7)
        p = np.array([np.exp(r) / np.exp(r).sum() for r in logits])
        expect = -np.mean([math.log(p[i, labels[i]]) for i in range(7)])
        got = float(nx.cross_entropy_from_logits(logits, labels).data)
        assert abs(got - expect) < 1e-10

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            nx.cross_entropy_from_logits(np.zeros((2, 3)), np.array([0, 3]))


class TestBackward:
    def test_identity(self):
        x = Tensor(np.array(3.7), requires_grad=True)
        nx.backward(x)
        assert x.grad == 1.0

    def test_shared_parameter_sums(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        nx.backward(nx.sum_all(nx.add(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_non_scalar_root(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            nx.backward(nx.relu(x))

    def test_grad_shapes_match(self):
        rng = np.random.default_rng(6)
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        x = rng.normal(size=(5, 4))
        nx.backward(nx.cross_entropy_from_logits(nx.linear(x, w, b), np.array([0, 1, 2, 0, 1])))
        assert w.grad.shape == w.shape and b.grad.shape == b.shape

    def test_no_grad_records_nothing(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with nx.no_grad():
            out = nx.matmul(w, w)
        assert not out.requires_grad and out.is_leaf


def _check(op, shapes, seed=0):
    """Backward vs central differences for ``sum(op(*xs) * w)``."""
    rng = np.random.default_rng(seed)
    xs = [away_from_kinks(rng, s) for s in shapes]
    weights = rng.normal(size=op(*xs).shape)
    ts = [Tensor(x, requires_grad=True) for x in xs]
    nx.backward(nx.sum_all(nx.mul(op(*ts), weights)))
    for i, t in enumerate(ts):
        def f(v, i=i):
            args = list(xs)
            args[i] = v
            return float((op(*args).data * weights).sum())
        num = nx.finite_diff_gradient(f, xs[i], 1e-5)
        assert nx.relative_error(t.grad, num) < 1e-4, i


@pytest.mark.parametrize("op,shapes", [
    (nx.matmul, [(3, 4), (4, 2)]),
    (nx.linear, [(3, 4), (2, 4), (2,)]),
    (nx.add, [(3, 3), (3, 3)]),
    (nx.sub, [(3, 3), (3, 3)]),
    (nx.mul, [(3, 3), (3, 3)]),
    (nx.relu, [(4, 5)]),
    (nx.sigmoid, [(4, 5)]),
    (nx.add_bias, [(4, 3), (3,)]),
    (nx.affine_combine, [(3, 4), (3, 4), (3, 4)]),
    (nx.transpose, [(3, 5)]),
], ids=lambda v: getattr(v, "__name__", ""))
def test_gradients_match_finite_differences(op, shapes):
    for seed in range(3):
        _check(op, shapes, seed)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    t = Tensor(logits, requires_grad=True)
    nx.backward(nx.cross_entropy_from_logits(t, labels))
    num = nx.finite_diff_gradient(lambda v: float(nx.cross_entropy_from_logits(v, labels).data), logits)
    assert nx.relative_error(t.grad, num) < 1e-6


class TestFiniteDiff:
    def test_sum(self):
        x = np.random.default_rng(8).normal(size=(3, 2))
        np.testing.assert_allclose(nx.finite_diff_gradient(lambda v: v.sum(), x), 1.0, atol=1e-9)

    def test_quadratic(self):
        x = np.random.default_rng(9).normal(size=5)
        g = nx.finite_diff_gradient(lambda v: 0.5 * (v ** 2).sum(), x, 1e-5)
        np.testing.assert_allclose(g, x, atol=1e-8)

    def test_eps_positive(self):
        with pytest.raises(ContractError):
            nx.finite_diff_gradient(lambda v: v.sum(), np.ones(2), 0.0)


def test_fuzzed_ops_stay_finite():
    rng = np.random.default_rng(10)
    unary = [nx.relu, nx.sigmoid, lambda a: nx.scale(a, -2.5), nx.transpose]
    binary = [nx.add, nx.sub, nx.mul]
    for i in range(10_000):
        a = rng.normal(scale=10 ** rng.uniform(-3, 3), size=(3, 4))
        kind = i % 5
        if kind == 0:
            out = unary[i % len(unary)](a).data
        elif kind == 1:
            out = binary[i % len(binary)](a, rng.normal(size=(3, 4))).data
        elif kind == 2:
            out = nx.affine_combine(nx.sigmoid(a).data, a, rng.normal(size=(3, 4))).data
        elif kind == 3:
            out = nx.softmax(a)
        else:
            out = nx.cross_entropy_from_logits(a, rng.integers(0, 4, size=3)).data
        assert np.all(np.isfinite(out))
