"""Reverse-mode gradients checked against central finite differences.

The finite-difference oracle lives here, independent of the library's own
grad_check, so the two can cross-validate each other.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graduq import autodiff as ad
from graduq.errors import DomainError, ShapeError


def fd_gradient(f, point, h=1e-5):
    """Central differences, one coordinate at a time."""
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] += h
        hi = f(bump.reshape(point.shape))
        bump[i] -= 2 * h
        lo = f(bump.reshape(point.shape))
        out[i] = (hi - lo) / (2 * h)
    return grad


def rel_err(a, b, floor=1e-5):
    """Relative error with a floor at the finite-difference noise scale:
    central differences at h=1e-5 carry ~1e-11 absolute noise, so components
    below ~1e-5 can only be certified absolutely."""
    return np.max(np.abs(a - b) / np.maximum.reduce([np.abs(a), np.abs(b), np.full_like(a, floor)]))


class TestMatmul:
    def test_identity(self):
        a = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = ad.Tensor(np.eye(2))
        assert np.array_equal(ad.matmul(a, eye).data, a.data)

    def test_dot_product(self):
        a = ad.Tensor([[1.0, 2.0]])
        b = ad.Tensor([[3.0], [4.0]])
        assert ad.matmul(a, b).data.item() == 11.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        bt = ad.Tensor(b)
        leaf = ad.Tensor(a)
        out = ad.sum_all(ad.matmul(leaf, bt))
        (g_a,) = ad.backward(out, [leaf])
        fd = fd_gradient(lambda m: (m @ b).sum(), a)
        assert rel_err(g_a, fd) < 1e-6

        at = ad.Tensor(a)
        leaf_b = ad.Tensor(b)
        out = ad.sum_all(ad.matmul(at, leaf_b))
        (g_b,) = ad.backward(out, [leaf_b])
        fd_b = fd_gradient(lambda m: (a @ m).sum(), b)
        assert rel_err(g_b, fd_b) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="3"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


class TestRelu:
    def test_elementwise(self):
        out = ad.relu(ad.Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative_zero_gradient(self):
        leaf = ad.Tensor([-3.0, -1.0, -0.5])
        out = ad.sum_all(ad.relu(leaf))
        assert np.all(out.data == 0.0)
        (g,) = ad.backward(out, [leaf])
        assert np.array_equal(g, np.zeros(3))

    def test_gradient_away_from_kink(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal(40)
        x = x[np.abs(x) > 1e-4]
        leaf = ad.Tensor(x)
        out = ad.sum_all(ad.relu(leaf))
        (g,) = ad.backward(out, [leaf])
        fd = fd_gradient(lambda v: np.maximum(v, 0.0).sum(), x)
        assert rel_err(g, fd) < 1e-6

    def test_subgradient_zero_at_zero(self):
        leaf = ad.Tensor([0.0])
        (g,) = ad.backward(ad.sum_all(ad.relu(leaf)), [leaf])
        assert g[0] == 0.0


class TestConv2d:
    def test_ones_with_scaling_kernel(self):
        x = ad.Tensor(np.ones((1, 3, 3)))
        k = ad.Tensor(np.full((1, 1, 1, 1), 2.0))
        b = ad.Tensor(np.zeros(1))
        out = ad.conv2d(x, k, b)
        assert out.data.shape == (1, 3, 3)
        assert np.all(out.data == 2.0)

    def test_single_valid_position(self):
        x = ad.Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        k = ad.Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
        b = ad.Tensor(np.zeros(1))
        out = ad.conv2d(x, k, b)
        assert out.data.shape == (1, 1, 1)
        assert out.data.item() == 5.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 6, 5))
        k = rng.standard_normal((3, 2, 3, 2))
        b = rng.standard_normal(3)

        def run(xv, kv, bv):
            return ad.conv2d(ad.Tensor(xv), ad.Tensor(kv), ad.Tensor(bv))

        leaf_x, leaf_k, leaf_b = ad.Tensor(x), ad.Tensor(k), ad.Tensor(b)
        out = ad.sum_all(ad.conv2d(leaf_x, leaf_k, leaf_b))
        g_x, g_k, g_b = ad.backward(out, [leaf_x, leaf_k, leaf_b])
        assert rel_err(g_x, fd_gradient(lambda v: run(v, k, b).data.sum(), x)) < 1e-5
        assert rel_err(g_k, fd_gradient(lambda v: run(x, v, b).data.sum(), k)) < 1e-5
        assert rel_err(g_b, fd_gradient(lambda v: run(x, k, v).data.sum(), b)) < 1e-5

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError, match="larger"):
            ad.conv2d(ad.Tensor(np.ones((1, 2, 2))), ad.Tensor(np.ones((1, 1, 3, 3))), ad.Tensor(np.zeros(1)))


class TestMaxpool:
    def test_single_window(self):
        out = ad.maxpool2d(ad.Tensor([[[1.0, 2.0], [3.0, 4.0]]]))
        assert out.data.item() == 4.0

    def test_tie_routes_to_first_position(self):
        leaf = ad.Tensor(np.ones((1, 2, 2)))
        out = ad.sum_all(ad.maxpool2d(leaf))
        (g,) = ad.backward(out, [leaf])
        assert np.array_equal(g, [[[1.0, 0.0], [0.0, 0.0]]])

    def test_odd_dimensions_floor(self):
        x = np.arange(15.0).reshape(1, 5, 3)
        out = ad.maxpool2d(ad.Tensor(x))
        assert out.data.shape == (1, 2, 1)

    def test_gradient_off_tie_points(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 4, 4))  # distinct values: ties measure-zero
        leaf = ad.Tensor(x)
        out = ad.sum_all(ad.maxpool2d(leaf))
        (g,) = ad.backward(out, [leaf])
        fd = fd_gradient(
            lambda v: ad.maxpool2d(ad.Tensor(v)).data.sum(), x, h=1e-6
        )
        assert rel_err(g, fd) < 1e-5

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ad.maxpool2d(ad.Tensor(np.ones((1, 1, 5))))


class TestLogSoftmax:
    def test_symmetric_two_class(self):
        out = ad.log_softmax(ad.Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [-np.log(2)] * 2, atol=1e-15)

    def test_no_overflow_for_large_logits(self):
        out = ad.log_softmax(ad.Tensor([1000.0, 1000.0]))
        assert np.allclose(out.data, [-np.log(2)] * 2, atol=1e-12)

    def test_closed_form(self):
        out = ad.log_softmax(ad.Tensor([np.log(2.0), 0.0]))
        assert np.allclose(out.data, [np.log(2 / 3), np.log(1 / 3)], atol=1e-15)

    def test_exp_sums_to_one(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            z = rng.standard_normal(rng.integers(2, 9)) * 10
            total = np.exp(ad.log_softmax(ad.Tensor(z)).data).sum()
            assert abs(total - 1.0) < 1e-12

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, z, c):
        z = np.asarray(z)
        a = ad.log_softmax(ad.Tensor(z)).data
        b = ad.log_softmax(ad.Tensor(z + c)).data
        assert np.max(np.abs(a - b)) < 1e-10

    def test_needs_two_classes(self):
        with pytest.raises(DomainError):
            ad.log_softmax(ad.Tensor([1.0]))

    def test_gradient(self):
        rng = np.random.default_rng(17)
        z = rng.standard_normal(5)
        leaf = ad.Tensor(z)
        out = ad.sum_all(ad.pick_rows(ad.log_softmax(ad.reshape(leaf, (1, 5))), [2]))
        (g,) = ad.backward(out, [leaf])
        fd = fd_gradient(
            lambda v: ad.log_softmax(ad.Tensor(v)).data[2], z
        )
        assert rel_err(g, fd) < 1e-6


class TestBackward:
    def test_square(self):
        x = ad.Tensor([3.0])
        (g,) = ad.backward(ad.sum_all(ad.mul(x, x)), [x])
        assert g[0] == 6.0

    def test_product(self):
        x, y = ad.Tensor([2.0]), ad.Tensor([5.0])
        gx, gy = ad.backward(ad.sum_all(ad.mul(x, y)), [x, y])
        assert gx[0] == 5.0 and gy[0] == 2.0

    def test_non_scalar_seed_rejected(self):
        x = ad.Tensor([1.0, 2.0])
        with pytest.raises(DomainError, match="scalar"):
            ad.backward(ad.relu(x), [x])

    def test_unreachable_leaf_gets_zeros(self):
        x, other = ad.Tensor([1.0]), ad.Tensor([[1.0, 2.0]])
        (g,) = ad.backward(ad.sum_all(ad.mul(x, x)), [other])
        assert np.array_equal(g, np.zeros((1, 2)))

    def test_repeated_backward_bit_identical(self):
        rng = np.random.default_rng(23)
        w1, w2 = ad.Tensor(rng.standard_normal((4, 8))), ad.Tensor(rng.standard_normal((8, 3)))
        x = ad.Tensor(rng.standard_normal((1, 4)))
        out = ad.sum_all(ad.log_softmax(ad.matmul(ad.relu(ad.matmul(x, w1)), w2)))
        first = ad.backward(out, [w1, w2, x])
        second = ad.backward(out, [w1, w2, x])
        for a, b in zip(first, second):
            assert np.array_equal(a, b)

    def test_mlp_against_finite_differences_many_seeds(self):
        # 3-layer MLP scalar output over many random draws
        for seed in range(100):
            rng = np.random.default_rng(seed)
            sizes = [(3, 6), (6, 5), (5, 2)]
            mats = [rng.standard_normal(s) for s in sizes]
            x = rng.standard_normal((1, 3))

            def forward(m0):
                h = np.maximum(x @ m0, 0.0) @ mats[1]
                h = np.maximum(h, 0.0) @ mats[2]
                z = h - h.max()
                return (z - np.log(np.exp(z).sum()))[0, 0]

            leaf = ad.Tensor(mats[0])
            t = ad.relu(ad.matmul(ad.Tensor(x), leaf))
            t = ad.relu(ad.matmul(t, ad.Tensor(mats[1])))
            out = ad.sum_all(ad.pick_rows(ad.log_softmax(ad.matmul(t, ad.Tensor(mats[2]))), [0]))
            (g,) = ad.backward(out, [leaf])
            fd = fd_gradient(forward, mats[0])
            assert rel_err(g, fd) < 1e-5


class TestGradCheck:
    def test_linear_function_near_exact(self):
        w = np.arange(1.0, 5.0)
        err = ad.grad_check(lambda t: ad.sum_all(ad.mul(t, ad.Tensor(w))), np.ones(4))
        assert err < 1e-10

    def test_quadratic_at_origin(self):
        err = ad.grad_check(lambda t: ad.sum_all(ad.mul(t, t)), np.zeros(3))
        assert err < 1e-8

    def test_random_mlp(self):
        rng = np.random.default_rng(31)
        w1, w2 = rng.standard_normal((4, 8)), rng.standard_normal((8, 1))

        def f(t):
            h = ad.relu(ad.matmul(ad.reshape(t, (1, 4)), ad.Tensor(w1)))
            return ad.sum_all(ad.matmul(h, ad.Tensor(w2)))

        assert ad.grad_check(f, rng.standard_normal(4), h=1e-5) < 1e-5

    def test_rejects_bad_step(self):
        with pytest.raises(DomainError):
            ad.grad_check(lambda t: ad.sum_all(t), np.ones(2), h=0.0)


class TestTensorInvariants:
    def test_rejects_non_finite(self):
        with pytest.raises(DomainError):
            ad.Tensor([1.0, np.nan])
        with pytest.raises(DomainError):
            ad.Tensor([np.inf])

    def test_row_major_flat_layout(self):
        t = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.data.size == 4
        assert list(t.data.reshape(-1)) == [1.0, 2.0, 3.0, 4.0]
