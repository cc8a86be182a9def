"""Engine tests: forward values, gradients vs finite differences, invariants."""

import numpy as np
import pytest

import pqat.autodiff as ad
from pqat.autodiff import RngStream, Tensor, finite_difference_check


def t(x, rg=False):
    return Tensor(np.asarray(x, dtype=np.float32), requires_grad=rg)


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(t([[1, 0], [0, 1]]), t([[3, 4], [5, 6]]))
        assert np.array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_product(self):
        out = ad.matmul(t([[1, 2]]), t([[3], [4]]))
        assert np.array_equal(out.data, [[11]])

    def test_shape_mismatch_reports_both(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))

    def test_gradients_match_finite_differences(self, rng):
        a = Tensor(rng.normal((4, 5)), requires_grad=True)
        b = Tensor(rng.normal((5, 3)), requires_grad=True)
        err = finite_difference_check(lambda: ad.tsum(ad.matmul(a, b)), [a, b])
        assert err < 1e-3


class TestConv2d:
    def test_sum_of_ones(self):
        out = ad.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))))
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data.ravel()[0] == 9.0

    def test_delta_kernel_reproduces_input(self, rng):
        x = Tensor(rng.normal((2, 1, 5, 5)))
        k = np.zeros((1, 1, 3, 3), dtype=np.float32)
        k[0, 0, 1, 1] = 1.0
        out = ad.conv2d(x, Tensor(k), pad=1)
        assert np.array_equal(out.data, x.data)

    def test_non_integral_output_rejected(self):
        with pytest.raises(ValueError, match="non-integral"):
            ad.conv2d(t(np.ones((1, 1, 5, 5))), t(np.ones((1, 1, 2, 2))), stride=2)

    def test_gradients_match_finite_differences(self, rng):
        x = Tensor(rng.normal((2, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
        err = finite_difference_check(
            lambda: ad.tsum(ad.conv2d(x, w, stride=1, pad=1)), [x, w]
        )
        assert err < 1e-3

    def test_strided_shapes(self, rng):
        out = ad.conv2d(Tensor(rng.normal((1, 1, 6, 6))), Tensor(rng.normal((2, 1, 3, 3))),
                        stride=1, pad=1)
        assert out.data.shape == (1, 2, 6, 6)


class TestClamp:
    def test_basic(self):
        out = ad.clamp(t([-1, 0.5, 2]), 0.0, 1.0)
        assert np.array_equal(out.data, [0, 0.5, 1])

    def test_huge_sentinels_identity(self, rng):
        x = Tensor(rng.normal((7,)))
        out = ad.clamp(x, -1e30, 1e30)
        assert np.array_equal(out.data, x.data)

    def test_gradient_by_cases(self):
        x = t([-1, 0.5, 2], rg=True)
        ad.tsum(ad.clamp(x, 0.0, 1.0)).backward()
        assert np.array_equal(x.grad, [0, 1, 0])

    def test_gradient_inclusive_at_boundary(self):
        x = t([0.0, 1.0], rg=True)
        ad.tsum(ad.clamp(x, 0.0, 1.0)).backward()
        assert np.array_equal(x.grad, [1, 1])

    def test_lo_above_hi_rejected(self):
        with pytest.raises(ValueError, match="lo"):
            ad.clamp(t([0.0]), 1.0, 0.0)


class TestElementwise:
    def test_softplus_at_zero(self):
        assert np.isclose(ad.softplus(t(0.0)).data, np.log(2.0))

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(t(0.0)).data == 0.5

    def test_pow2_value_and_gradient(self):
        x = t(3.0, rg=True)
        y = ad.pow2(x)
        y.backward()
        assert y.data == 8.0
        assert np.isclose(x.grad, np.log(2.0) * 8.0, rtol=1e-6)

    def test_broadcast_add_and_backward_reduction(self):
        a = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
        b = Tensor(np.ones((3,), dtype=np.float32), requires_grad=True)
        ad.tsum(a + b).backward()
        assert np.array_equal(a.grad, np.ones((2, 3)))
        assert np.array_equal(b.grad, [2, 2, 2])

    def test_incompatible_broadcast_rejected(self):
        with pytest.raises(ValueError, match="broadcast"):
            ad.add(t(np.ones((2, 3))), t(np.ones((4,))))

    UNARY = {
        "sigmoid": ad.sigmoid,
        "softplus": ad.softplus,
        "relu": lambda x: ad.relu(x + 2.0),  # keep clear of the kink at 0
        "exp": lambda x: ad.exp(x * 0.3),
        "log": lambda x: ad.log(ad.absolute(x) + 1.5),
        "sqrt": lambda x: ad.sqrt(ad.absolute(x) + 1.0),
        "pow2": lambda x: ad.pow2(x * 0.5),
        "abs": lambda x: ad.absolute(x + 3.0),  # clear of the kink at 0
        "neg": ad.neg,
        "mean": lambda x: ad.tmean(ad.mul(x, x)),
    }
    BINARY = {
        "add": ad.add,
        "sub": ad.sub,
        "mul": ad.mul,
        "div": lambda a, b: ad.div(a, ad.absolute(b) + 1.5),
    }

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_gradcheck_unary(self, name, seed):
        rng = RngStream(seed, 0)
        x = Tensor(rng.normal((5,)), requires_grad=True)
        op = self.UNARY[name]
        assert finite_difference_check(lambda: ad.tsum(op(x)), [x]) < 1e-3

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("name", sorted(BINARY))
    def test_gradcheck_binary(self, name, seed):
        rng = RngStream(seed, 1)
        x = Tensor(rng.normal((5,)), requires_grad=True)
        y = Tensor(rng.normal((5,)), requires_grad=True)
        op = self.BINARY[name]
        assert finite_difference_check(lambda: ad.tsum(op(x, y)), [x, y]) < 1e-3


class TestRoundSte:
    def test_documented_tie_rule(self):
        out = ad.round_ste(t([0.4, 0.5, 1.5, -0.5]))
        assert np.array_equal(out.data, [0, 1, 2, -1])

    def test_gradient_is_identity(self):
        x = t([0.3, -2.7, 5.5], rg=True)
        ad.tsum(ad.round_ste(x)).backward()
        assert np.array_equal(x.grad, [1, 1, 1])

    def test_integers_are_fixed_points(self):
        x = t([-3.0, 0.0, 7.0])
        assert np.array_equal(ad.round_ste(x).data, x.data)


class TestLosses:
    @pytest.mark.parametrize("x,delta,expected", [(0.0, 1.0, 0.0), (0.5, 1.0, 0.125), (2.0, 1.0, 1.5)])
    def test_huber_values(self, x, delta, expected):
        assert np.isclose(ad.huber(t(x), delta).data, expected)

    def test_huber_nonpositive_delta_rejected(self):
        with pytest.raises(ValueError, match="delta"):
            ad.huber(t(0.5), 0.0)

    def test_huber_gradient(self):
        x = t(2.0, rg=True)
        ad.huber(x, 1.0).backward()
        assert np.isclose(x.grad, 1.0)  # linear branch slope = delta * sign

    def test_mse_matches_manual(self, rng):
        a, b = rng.normal((6,)), rng.normal((6,))
        assert np.isclose(ad.mse(Tensor(a), Tensor(b)).data, ((a - b) ** 2).mean(), rtol=1e-6)

    def test_softmax_cross_entropy_matches_manual(self, rng):
        logits = rng.normal((4, 3))
        labels = np.array([0, 2, 1, 1])
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        want = -np.log(p[np.arange(4), labels]).mean()
        got = ad.softmax_cross_entropy(Tensor(logits), labels)
        assert np.isclose(got.data, want, rtol=1e-5)

    def test_softmax_cross_entropy_gradient(self, rng):
        logits = Tensor(rng.normal((4, 3)), requires_grad=True)
        labels = np.array([0, 2, 1, 1])
        err = finite_difference_check(
            lambda: ad.softmax_cross_entropy(logits, labels), [logits]
        )
        assert err < 1e-3


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        w = Tensor(rng.normal((3, 4)), requires_grad=True)
        ad.tsum(w).backward()
        assert np.array_equal(w.grad, np.ones((3, 4)))

    def test_half_square_gradient_is_w(self, rng):
        w = Tensor(rng.normal((5,)), requires_grad=True)
        (ad.tsum(ad.mul(w, w)) * 0.5).backward()
        assert np.allclose(w.grad, w.data, rtol=1e-6)

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            ad.mul(w, w).backward()

    def test_composite_graph_matches_finite_differences(self, rng):
        a = Tensor(rng.normal((3, 4)), requires_grad=True)
        b = Tensor(rng.normal((4, 2)), requires_grad=True)

        def f():
            h = ad.relu(ad.matmul(a, b))
            return ad.tmean(ad.mul(h, h) + ad.sigmoid(h))

        assert finite_difference_check(f, [a, b]) < 1e-3

    def test_accumulation_two_passes_exactly_double(self, rng):
        w = Tensor(rng.normal((4,)), requires_grad=True)
        loss = ad.tsum(ad.mul(w, w))
        loss.backward()
        once = w.grad.copy()
        loss.backward()
        assert np.array_equal(w.grad, 2 * once)

    def test_linearity_of_backward(self, rng):
        w = Tensor(rng.normal((4,)), requires_grad=True)

        def grad_of(fn):
            w.zero_grad()
            fn().backward()
            return w.grad.copy()

        l1 = lambda: ad.tsum(ad.mul(w, w))
        l2 = lambda: ad.tsum(ad.sigmoid(w))
        combo = lambda: 2.0 * l1() + 3.0 * l2()
        assert np.allclose(grad_of(combo), 2 * grad_of(l1) + 3 * grad_of(l2), rtol=1e-4, atol=1e-6)

    def test_shared_scalar_leaf_receives_both_branches(self):
        # one leaf feeding two graph branches must accumulate both parts
        x = Tensor(0.7, requires_grad=True)
        loss = ad.tsum(ad.sigmoid(x) + ad.mul(x, 3.0))
        loss.backward()
        s = 1 / (1 + np.exp(-0.7))
        assert np.isclose(x.grad, s * (1 - s) + 3.0, rtol=1e-5)

    def test_determinism_same_seed_identical_bits(self):
        def run():
            rng = RngStream(99, 5)
            a = Tensor(rng.normal((6, 6)), requires_grad=True)
            b = Tensor(rng.normal((6, 6)), requires_grad=True)
            loss = ad.tmean(ad.relu(ad.matmul(a, b)))
            loss.backward()
            return loss.data.copy(), a.grad.copy()

        (l1, g1), (l2, g2) = run(), run()
        assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


class TestFiniteDifferenceCheck:
    def test_quadratic_against_closed_form_gradient(self, rng):
        w = Tensor(rng.normal((6,)), requires_grad=True)
        # float64 oracle of the same quadratic keeps the numeric side exact
        w64 = w.data.astype(np.float64)

        fd = []
        eps = 1e-3
        for i in range(6):
            p = w64.copy(); p[i] += eps
            m = w64.copy(); m[i] -= eps
            fd.append((0.5 * (p @ p) - 0.5 * (m @ m)) / (2 * eps))
        err = np.abs(np.asarray(fd) - w64).max() / np.abs(w64).max()
        assert err < 1e-6

    def test_constant_function_gradient_exactly_zero(self):
        w = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        c = Tensor(5.0)

        def f():
            return ad.tsum(ad.mul(w, 0.0)) + c

        loss = f()
        loss.backward()
        assert np.array_equal(w.grad, np.zeros(4))


class TestRngStream:
    def test_replay_identical(self):
        a = RngStream(42, 7)
        b = RngStream(42, 7)
        assert np.array_equal(a.normal((10,)), b.normal((10,)))
        assert np.array_equal(a.uniform((10,)), b.uniform((10,)))
        assert np.array_equal(a.rademacher((10,)), b.rademacher((10,)))

    def test_streams_differ(self):
        assert not np.array_equal(RngStream(42, 1).normal((8,)), RngStream(42, 2).normal((8,)))

    def test_rademacher_values(self):
        v = RngStream(3, 3).rademacher((1000,))
        assert set(np.unique(v)) == {-1.0, 1.0}
        assert abs(v.mean()) < 0.2

    def test_uniform_in_unit_interval(self):
        u = RngStream(4, 4).uniform((1000,))
        assert u.min() >= 0.0 and u.max() < 1.0
