import math
import warnings

import numpy as np
import pytest

from qrewrite import autodiff as ad
from qrewrite.autodiff import Tensor
from qrewrite.errors import ShapeError


def t(data, grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        a = t([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(a, t(np.eye(2))).data, a.data)

    def test_hand_case(self):
        out = ad.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_dimension_error(self):
        with pytest.raises(ShapeError):
            ad.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))

    def test_associativity(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a, b, c = (t(rng.normal(size=(4, 5))), t(rng.normal(size=(5, 3))),
                       t(rng.normal(size=(3, 6))))
            left = ad.matmul(ad.matmul(a, b), c).data
            right = ad.matmul(a, ad.matmul(b, c)).data
            assert np.abs(left - right).max() <= 1e-9

    def test_backward_formulas(self):
        a = t([[1.0, 2.0], [3.0, 4.0]], grad=True)
        b = t([[5.0, 6.0], [7.0, 8.0]], grad=True)
        ad.sum_all(ad.matmul(a, b)).backward()
        ones = np.ones((2, 2))
        np.testing.assert_allclose(a.grad, ones @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ ones)


class TestSoftmax:
    def test_uniform(self):
        out = ad.softmax(t([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = rng.normal(size=6)
            c = rng.normal() * 50
            a = ad.softmax(t(x)).data
            b = ad.softmax(t(x + c)).data
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_closed_form(self):
        out = ad.softmax(t([0.0, math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)

    def test_empty_vector(self):
        with pytest.raises(ShapeError):
            ad.softmax(t(np.zeros(0)))

    def test_sums_to_one_for_extreme_inputs(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            scale = 10 ** rng.uniform(-3, 2.7)
            x = rng.normal(size=rng.integers(1, 9)) * scale
            y = ad.softmax(t(x)).data
            assert abs(y.sum() - 1.0) <= 1e-12
            assert (y >= 0).all()  # extreme gaps may underflow to exact 0

    def test_rows_masked_sum_to_one(self):
        rng = np.random.default_rng(5)
        x = t(rng.normal(size=(6, 10)))
        allow = rng.random((6, 10)) < 0.5
        allow[:, 0] = True
        y = ad.softmax_rows(x, allow).data
        np.testing.assert_allclose(y.sum(axis=1), np.ones(6), atol=1e-12)
        assert (y[~allow] == 0.0).all()


class TestLayerNorm:
    def test_constant_input(self):
        out = ad.layer_norm_rows(t([[3.0, 3.0, 3.0]]), t(np.ones(3)), t(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.zeros((1, 3)), atol=1e-2)

    def test_unit_pair(self):
        out = ad.layer_norm_rows(
            t([[1.0, -1.0]]), t(np.ones(2)), t(np.zeros(2)), eps=1e-12
        )
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_zero_gain_gives_bias(self):
        bias = t([5.0, -2.0, 0.5])
        out = ad.layer_norm_rows(t([[1.0, 2.0, 9.0]]), t(np.zeros(3)), bias)
        np.testing.assert_allclose(out.data, [bias.data], atol=1e-15)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = t(np.zeros((3, 4)))
        loss = ad.cross_entropy(logits, [0, 1, 2])
        assert abs(loss.item() - math.log(4.0)) < 1e-12

    def test_saturated_logits(self):
        logits = np.full((2, 5), -100.0)
        logits[0, 3] = 100.0
        logits[1, 1] = 100.0
        loss = ad.cross_entropy(t(logits), [3, 1])
        assert loss.item() < 1e-12

    def test_derived_value(self):
        loss = ad.cross_entropy(t([[0.0, math.log(3.0)]]), [1])
        assert abs(loss.item() - (-math.log(0.75))) < 1e-12

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(t(np.zeros((1, 4))), [4])

    def test_mask_selects_positions(self):
        logits = t(np.zeros((2, 4)))
        loss = ad.cross_entropy(logits, [0, 3], mask=[1, 0])
        assert abs(loss.item() - math.log(4.0)) < 1e-12


class TestBackward:
    def test_sum_gradient_is_ones(self):
        w = t(np.arange(4.0).reshape(2, 2), grad=True)
        ad.sum_all(w).backward()
        np.testing.assert_array_equal(w.grad, np.ones((2, 2)))

    def test_linear_gradient_outer_pattern(self):
        w = t(np.ones((2, 3)), grad=True)
        x = t([[1.0], [2.0], [3.0]])
        ad.sum_all(ad.matmul(w, x)).backward()
        np.testing.assert_allclose(w.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))

    def test_unused_parameter_gets_no_gradient(self):
        used = t(np.ones((2, 2)), grad=True)
        unused = t(np.ones((2, 2)), grad=True)
        ad.sum_all(used).backward()
        assert unused.grad is None  # None stands for all-zero

    def test_gradients_accumulate_until_cleared(self):
        w = t(np.ones((2, 2)), grad=True)
        ad.sum_all(w).backward()
        ad.sum_all(w).backward()
        np.testing.assert_array_equal(w.grad, 2 * np.ones((2, 2)))
        ad.zero_grads([w])
        assert w.grad is None

    def test_non_scalar_backward_rejected(self):
        w = t(np.ones((2, 2)), grad=True)
        with pytest.raises(ShapeError):
            ad.matmul(w, w).backward()

    def test_shared_subgraph(self):
        w = t([[2.0]], grad=True)
        y = ad.mul(w, w)
        ad.sum_all(ad.add(y, y)).backward()
        np.testing.assert_allclose(w.grad, [[8.0]])


class TestNoGrad:
    def test_no_graph_recorded(self):
        w = t(np.ones((2, 2)), grad=True)
        with ad.no_grad():
            out = ad.sum_all(ad.matmul(w, w))
        assert not out.requires_grad


class TestGradCheck:
    def test_quadratic_form_exact(self):
        rng = np.random.default_rng(0)
        w = t(rng.normal(size=(3, 3)), grad=True)
        a = rng.normal(size=(3, 3))

        def f():
            return ad.sum_all(ad.mul(ad.matmul(w, t(a)), w))

        err = ad.grad_check(f, {"w": w}, eps=1e-5, n_samples=9, rng=rng)
        assert err <= 1e-8

    def test_zero_samples_warns(self):
        w = t(np.ones((2, 2)), grad=True)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = ad.grad_check(lambda: ad.sum_all(w), {"w": w}, n_samples=0)
        assert out == 0.0
        assert caught

    def test_composite_pipeline(self):
        # matmul -> layer norm -> softmax-weighted mix -> cross entropy
        rng = np.random.default_rng(42)
        w1 = t(rng.normal(size=(4, 6)), grad=True)
        w2 = t(rng.normal(size=(6, 5)), grad=True)
        g = t(np.ones(6), grad=True)
        b = t(np.zeros(6), grad=True)
        x = rng.normal(size=(3, 4))

        def f():
            h = ad.layer_norm_rows(ad.matmul(t(x), w1), g, b)
            logits = ad.matmul(ad.softmax_rows(h), w2)
            return ad.cross_entropy(logits, [0, 2, 4])

        err = ad.grad_check(
            f, {"w1": w1, "w2": w2, "g": g, "b": b}, eps=1e-4, n_samples=60, rng=rng
        )
        assert err <= 1e-4


class TestStructuralOps:
    def test_concat_rows_roundtrip_gradient(self):
        a = t(np.ones((2, 3)), grad=True)
        b = t(np.ones((1, 3)), grad=True)
        out = ad.concat_rows([a, b])
        assert out.shape == (3, 3)
        ad.sum_all(ad.mul(out, t(np.arange(9.0).reshape(3, 3)))).backward()
        np.testing.assert_allclose(a.grad, np.arange(6.0).reshape(2, 3))
        np.testing.assert_allclose(b.grad, [[6.0, 7.0, 8.0]])

    def test_slice_cols_gradient_scatter(self):
        a = t(np.ones((2, 4)), grad=True)
        ad.sum_all(ad.slice_cols(a, 1, 3)).backward()
        expected = np.zeros((2, 4))
        expected[:, 1:3] = 1.0
        np.testing.assert_array_equal(a.grad, expected)

    def test_embedding_scatter_add(self):
        table = t(np.ones((5, 2)), grad=True)
        ad.sum_all(ad.embedding(table, [1, 1, 3])).backward()
        expected = np.zeros((5, 2))
        expected[1] = 2.0
        expected[3] = 1.0
        np.testing.assert_array_equal(table.grad, expected)

    def test_embedding_bounds(self):
        table = t(np.ones((5, 2)))
        with pytest.raises(IndexError):
            ad.embedding(table, [5])
        with pytest.raises(IndexError):
            ad.embedding(table, [-1])

    def test_bias_add_broadcast(self):
        a = t(np.zeros((3, 2)), grad=True)
        bias = t([1.0, 2.0], grad=True)
        out = ad.add(a, bias)
        np.testing.assert_array_equal(out.data, np.tile([1.0, 2.0], (3, 1)))
        ad.sum_all(out).backward()
        np.testing.assert_array_equal(bias.grad, [3.0, 3.0])
