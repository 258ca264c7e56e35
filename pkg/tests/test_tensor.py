"""Autodiff core: op semantics, backward traversal, gradient checking."""

import numpy as np
import pytest

from arne import tensor as T
from arne.errors import ContractError, ShapeError
from arne.tensor import Tensor


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_allclose(T.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_inner_product(self):
        a = Tensor(np.array([[1.0, 2.0]]))
        b = Tensor(np.array([[3.0], [4.0]]))
        np.testing.assert_allclose(T.matmul(a, b).data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((4, 2)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(a, b)

    def test_gradcheck_5x7_7x3(self):
        with T.precision(np.float64):
            rng = np.random.default_rng(0)
            a = Tensor(rng.standard_normal((5, 7)), requires_grad=True)
            b = Tensor(rng.standard_normal((7, 3)), requires_grad=True)
            w = Tensor(rng.standard_normal((5, 3)))
            report = T.grad_check(lambda x, y: T.sum_(T.matmul(x, y) * w), [a, b],
                                  eps=1e-5, tol=1e-6)
            assert report.passed, report


class TestBackward:
    def test_identity_chain(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = T.reshape(x, (1,))
        y.backward()
        np.testing.assert_allclose(x.grad, [1.0])

    def test_square_sum(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        T.sum_(x * x).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_two_uses_accumulate(self):
        x = Tensor(np.ones(4), requires_grad=True)
        (T.sum_(x) + T.sum_(x)).backward()
        np.testing.assert_allclose(x.grad, np.full(4, 2.0))

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * x).backward()

    def test_each_node_visited_once(self):
        calls = []
        x = Tensor(np.ones(3), requires_grad=True)
        mid = x * 2.0
        original = mid._vjp

        def counting(g):
            calls.append(1)
            return original(g)

        mid._vjp = counting
        (T.sum_(mid) + T.sum_(mid)).backward()
        assert len(calls) == 1
        np.testing.assert_allclose(x.grad, np.full(3, 4.0))

    def test_accumulation_linearity(self):
        # grad through a fan-out equals the sum of single-consumer grads
        rng = np.random.default_rng(3)
        data = rng.standard_normal(5)

        def grad_of(fn):
            x = Tensor(data.copy(), requires_grad=True)
            fn(x).backward()
            return x.grad

        both = grad_of(lambda x: T.sum_(x * 3.0) + T.sum_(x * x))
        first = grad_of(lambda x: T.sum_(x * 3.0))
        second = grad_of(lambda x: T.sum_(x * x))
        np.testing.assert_allclose(both, first + second, rtol=1e-6)


class TestShapes:
    def test_reshape_roundtrip_bit_exact(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((3, 4, 5)))
        back = T.reshape(T.reshape(x, (12, 5)), (3, 4, 5))
        assert np.array_equal(back.data, x.data)

    def test_transpose_roundtrip_bit_exact(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((3, 4, 5)))
        back = T.transpose(T.transpose(x, (2, 0, 1)), (1, 2, 0))
        assert np.array_equal(back.data, x.data)

    def test_concat_then_slice(self):
        a = Tensor(np.arange(6.0).reshape(2, 3))
        b = Tensor(np.arange(6.0, 10.0).reshape(2, 2))
        joined = T.concat([a, b], axis=1)
        assert joined.shape == (2, 5)
        np.testing.assert_allclose(joined[:, 3:].data, b.data)

    def test_broadcast_to_backward_sums(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.sum_(T.broadcast_to(T.reshape(x, (1, 2)), (4, 2))).backward()
        np.testing.assert_allclose(x.grad, [4.0, 4.0])


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        y = T.softmax(Tensor(rng.standard_normal((20, 7)) * 5))
        assert (y.data >= 0).all()
        np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(20), atol=1e-9)

    def test_log_softmax_matches_log_of_softmax(self):
        with T.precision(np.float64):
            rng = np.random.default_rng(1)
            x = Tensor(rng.standard_normal((4, 9)))
            np.testing.assert_allclose(T.log_softmax(x).data, np.log(T.softmax(x).data),
                                       atol=1e-12)


class TestOrderlessSum:
    def test_matches_plain_sum(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((7, 5))
        out = T.orderless_sum(Tensor(x), axis=0)
        np.testing.assert_allclose(out.data, x.sum(axis=0), rtol=1e-6)

    def test_bit_exact_under_permutation(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((9, 16)).astype(np.float32)
        base = T.orderless_sum(Tensor(x), axis=0).data
        for _ in range(20):
            perm = rng.permutation(9)
            shuffled = T.orderless_sum(Tensor(x[perm]), axis=0).data
            assert np.array_equal(base, shuffled)


class TestGradCheckContract:
    def test_constant_function_zero_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        report = T.grad_check(lambda t: T.sum_(t.detach() * 0.0), [x])
        assert report.max_relative_error == 0.0
        assert report.passed

    def test_relu_away_from_kink(self):
        with T.precision(np.float64):
            rng = np.random.default_rng(6)
            data = rng.standard_normal(30)
            data[np.abs(data) < 1e-4] = 0.5
            x = Tensor(data, requires_grad=True)
            report = T.grad_check(lambda t: T.sum_(T.relu(t)), [x], eps=1e-5, tol=1e-4)
            assert report.passed

    def test_passed_equals_error_within_tol(self):
        with T.precision(np.float64):
            x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
            report = T.grad_check(lambda t: T.sum_(t * t), [x], tol=1e-4)
            assert report.passed == (report.max_relative_error <= report.tolerance)

    def test_restores_inputs_bitwise(self):
        with T.precision(np.float64):
            data = np.array([0.3, -1.7, 2.2])
            x = Tensor(data.copy(), requires_grad=True)
            T.grad_check(lambda t: T.sum_(t * t), [x])
            assert np.array_equal(x.data, data)

    def test_bad_eps_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ContractError):
            T.grad_check(lambda t: T.sum_(t), [x], eps=0.0)


class TestPrecisionSwitch:
    def test_default_float32(self):
        assert Tensor([1.0]).dtype == np.float32

    def test_context_switches_and_restores(self):
        with T.precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_row_major_contract(self):
        x = Tensor(np.asfortranarray(np.ones((3, 4))))
        assert x.data.flags["C_CONTIGUOUS"]


class TestNoGrad:
    def test_no_lineage_recorded(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert y._vjp is None and not y.requires_grad
