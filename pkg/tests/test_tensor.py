import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwcmoe import tensor as T
from pwcmoe.rng import RngStream
from pwcmoe.tensor import Tensor


def rand(shape, seed=0, lo=-2.0, hi=2.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, shape)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        assert np.allclose(out.data, [[3.0], [4.0]])

    def test_inner_product(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.allclose(out.data, [[11.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradient_matches_finite_differences(self, fd_check):
        a = Tensor(rand((3, 4), 1), requires_grad=True)
        b = Tensor(rand((4, 2), 2), requires_grad=True)
        fd_check(lambda: T.tsum(T.matmul(a, b)), {"a": a, "b": b})


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]), temperature=1.0)
        assert np.allclose(out.data, [1 / 3] * 3)

    def test_hand_ratio(self):
        # exp(ln 2) : exp(0) = 2 : 1
        out = T.softmax(Tensor([math.log(2.0), 0.0]), temperature=1.0)
        assert np.allclose(out.data, [2 / 3, 1 / 3])

    def test_masked_component_exactly_zero(self):
        out = T.softmax(Tensor([5.0, T.NEG_INF]), temperature=1.0)
        assert out.data[0] == 1.0
        assert out.data[1] == 0.0

    def test_all_masked_raises(self):
        with pytest.raises(ValueError, match="no admissible component"):
            T.softmax(Tensor([T.NEG_INF, T.NEG_INF]))

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError):
            T.softmax(Tensor([1.0, 2.0]), temperature=0.0)

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=8),
           st.floats(-10, 10))
    @settings(max_examples=100, deadline=None)
    def test_sums_to_one_and_shift_invariant(self, logits, shift):
        base = T.softmax(Tensor(logits)).data
        shifted = T.softmax(Tensor([x + shift for x in logits])).data
        assert abs(base.sum() - 1.0) <= 1e-9
        assert np.allclose(base, shifted, atol=1e-9)

    def test_gradient(self, fd_check):
        x = Tensor(rand((5,), 3), requires_grad=True)
        w = rand((5,), 4)
        fd_check(lambda: T.tsum(T.softmax(x, temperature=0.7) * w), {"x": x})


class TestLayerNorm:
    def test_constant_input_maps_to_zero(self):
        out = T.layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.allclose(out.data, 0.0)

    def test_two_point_hand_case(self):
        out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                           epsilon=1e-12)
        assert np.allclose(out.data, [-1.0, 1.0], atol=1e-5)

    def test_standardizes(self):
        x = rand((8,), 5)
        out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)),
                           epsilon=1e-10).data
        assert abs(out.mean()) < 1e-9
        assert abs(out.var() - 1.0) < 1e-6

    def test_gradient(self, fd_check):
        x = Tensor(rand((6,), 6), requires_grad=True)
        gain = Tensor(rand((6,), 7, 0.5, 1.5), requires_grad=True)
        bias = Tensor(rand((6,), 8, -0.5, 0.5), requires_grad=True)
        w = rand((6,), 9)
        fd_check(lambda: T.tsum(T.layer_norm(x, gain, bias) * w),
                 {"x": x, "gain": gain, "bias": bias})


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert T.cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(math.log(2))

    def test_confident_correct(self):
        val = T.cross_entropy(Tensor([10.0, -10.0]), 0).item()
        assert val == pytest.approx(math.log(1 + math.exp(-20.0)), rel=1e-9)
        assert val == pytest.approx(2.06e-9, rel=0.01)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor([0.0, 0.0]), 2)

    def test_nonnegative(self):
        for seed in range(5):
            assert T.cross_entropy(Tensor(rand((4,), seed)), seed % 4).item() >= 0.0

    def test_gradient(self, fd_check):
        x = Tensor(rand((4,), 10), requires_grad=True)
        fd_check(lambda: T.cross_entropy(x, 2), {"x": x})


class TestBackward:
    def test_linear_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.backward(T.tsum(x))
        assert np.allclose(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.tsum(x * x))
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_accumulation_across_reuse(self):
        x = Tensor([1.0], requires_grad=True)
        y = x + x
        T.backward(T.tsum(y))
        assert np.allclose(x.grad, [2.0])

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(x + x)


class TestStraightThrough:
    def test_forward_hard_backward_soft(self):
        x = Tensor([1.0, 2.0, 0.5], requires_grad=True)
        z = T.softmax(x)
        hard = np.array([0.0, 1.0, 0.0])
        out = T.straight_through(z, hard)
        assert np.array_equal(out.data, hard)
        w = np.array([0.3, -0.2, 0.9])
        T.backward(T.tsum(out * w))
        x2 = Tensor([1.0, 2.0, 0.5], requires_grad=True)
        T.backward(T.tsum(T.softmax(x2) * w))
        assert np.array_equal(x.grad, x2.grad)


class TestIndexing:
    def test_gather_scatter_roundtrip_grad(self, fd_check):
        x = Tensor(rand((5, 3), 11), requires_grad=True)
        w = rand((4, 3), 12)
        fd_check(lambda: T.tsum(T.gather_rows(x, [0, 2, 2, 4]) * w), {"x": x})

    def test_scatter_rows_places_rows(self):
        out = T.scatter_rows(Tensor([[1.0, 2.0]]), [2], 4)
        assert np.allclose(out.data, [[0, 0], [0, 0], [1, 2], [0, 0]])

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            T.gather_rows(Tensor(np.zeros((3, 2))), [5])

    def test_narrow_and_concat_inverse(self):
        x = Tensor(rand((3, 6), 13))
        parts = [T.narrow(x, 1, i, 2) for i in (0, 2, 4)]
        assert np.array_equal(T.concat(parts, axis=1).data, x.data)

    def test_masked_fill_blocks_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        out = T.masked_fill(x, np.array([False, True]), T.NEG_INF)
        T.backward(T.tsum(out * np.array([1.0, 1.0])))
        assert np.allclose(x.grad, [1.0, 0.0])


class TestRngStream:
    def test_bit_identical_replay(self):
        a = RngStream(42, "shadowing").normal(size=1000)
        b = RngStream(42, "shadowing").normal(size=1000)
        assert np.array_equal(a, b)

    def test_distinct_labels_distinct_streams(self):
        a = RngStream(42, "shadowing").normal(size=1000)
        b = RngStream(42, "gumbel").normal(size=1000)
        assert not np.array_equal(a, b)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.1

    def test_gumbel_fixed_point(self):
        # u = 1/e maps to exactly 0
        assert -math.log(-math.log(1 / math.e)) == pytest.approx(0.0, abs=1e-12)

    def test_gumbel_moments(self):
        g = RngStream(7, "gumbel").gumbel(10**6)
        assert g.mean() == pytest.approx(0.5772, abs=0.01)
        assert g.var() == pytest.approx(math.pi**2 / 6, abs=0.02)

    def test_uniform_open_interval(self):
        u = RngStream(1, "u").uniform(10**5)
        assert u.min() > 0.0
        assert u.max() < 1.0


class TestFiniteness:
    def test_random_pipeline_stays_finite(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = Tensor(rng.uniform(-2, 2, (4, 4)), requires_grad=True)
            y = T.softmax(T.matmul(x, Tensor(rng.uniform(-2, 2, (4, 4)))))
            loss = T.tsum(T.relu(y) * y)
            T.backward(loss)
            T.assert_finite(loss)
            assert np.all(np.isfinite(x.grad))
