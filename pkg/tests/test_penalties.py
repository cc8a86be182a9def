"""Budget penalty tests: values at/off target, gradient direction, scaling."""

import numpy as np
import pytest

from pqat.autodiff import Tensor, zero_grads
from pqat.penalties import LayerCost, ResourceTarget, avg_bit_penalty, bops_penalty, layer_bops, total_loss


def bit_tensor(v):
    return Tensor(np.float32(v), requires_grad=True)


class TestAvgBitPenalty:
    def test_zero_when_mean_equals_target(self):
        t = ResourceTarget("avg_bit_weight", 4.0, lam=1.0)
        out = avg_bit_penalty([bit_tensor(4.0), bit_tensor(4.0)], [10, 10], t)
        assert out.data == 0.0

    def test_weighted_mean_off_target(self):
        t = ResourceTarget("avg_bit_weight", 4.0, lam=1.0, huber_delta=1.0)
        out = avg_bit_penalty([bit_tensor(3.0), bit_tensor(5.0)], [30, 10], t)
        # weighted mean 3.5, quadratic branch: 0.5 * 0.5^2
        assert np.isclose(out.data, 0.125, rtol=1e-6)

    def test_zero_lambda_kills_penalty(self):
        t = ResourceTarget("avg_bit_weight", 4.0, lam=0.0)
        out = avg_bit_penalty([bit_tensor(14.0)], [100], t)
        assert out.data == 0.0

    def test_empty_lists_rejected(self):
        t = ResourceTarget("avg_bit_weight", 4.0)
        with pytest.raises(ValueError, match="nonempty"):
            avg_bit_penalty([], [], t)

    def test_mismatched_lists_rejected(self):
        t = ResourceTarget("avg_bit_weight", 4.0)
        with pytest.raises(ValueError, match="matching"):
            avg_bit_penalty([bit_tensor(4.0)], [1, 2], t)

    def test_gradient_positive_when_over_budget(self):
        t = ResourceTarget("avg_bit_weight", 4.0, lam=1.0)
        bits = [bit_tensor(6.0), bit_tensor(6.0)]
        zero_grads(bits)
        avg_bit_penalty(bits, [10, 30], t).backward()
        assert all(float(b.grad) > 0 for b in bits)

    def test_gradient_negative_when_under_budget(self):
        t = ResourceTarget("avg_bit_weight", 4.0, lam=1.0)
        bits = [bit_tensor(2.5), bit_tensor(2.5)]
        zero_grads(bits)
        avg_bit_penalty(bits, [10, 30], t).backward()
        assert all(float(b.grad) < 0 for b in bits)

    def test_scales_linearly_in_lambda(self):
        bits = [3.0, 5.0]
        vals = []
        for lam in (0.5, 1.0, 2.0):
            t = ResourceTarget("avg_bit_weight", 4.5, lam=lam)
            vals.append(float(avg_bit_penalty([bit_tensor(b) for b in bits], [1, 1], t).data))
        assert np.isclose(vals[1], 2 * vals[0], rtol=1e-6)
        assert np.isclose(vals[2], 2 * vals[1], rtol=1e-6)

    def test_strictly_positive_off_target(self):
        t = ResourceTarget("avg_bit_weight", 4.0, lam=1.0)
        for mean_bits in (3.7, 4.3, 6.0):
            out = avg_bit_penalty([bit_tensor(mean_bits)], [7], t)
            assert out.data > 0.0


class TestLayerBops:
    def test_full_precision_reference_count(self):
        # 1.814e9 MACs at 32/32 bits lands on the published 1857.6 GBOPs
        cost = LayerCost(macs=1_814_062_500, n_weight_elems=1, n_act_elems=1)
        out = layer_bops(cost, bit_tensor(32.0), bit_tensor(32.0))
        assert np.isclose(out.data, 1857.6e9, rtol=1e-6)

    def test_small_product(self):
        cost = LayerCost(macs=1000, n_weight_elems=1, n_act_elems=1)
        assert layer_bops(cost, bit_tensor(4.0), bit_tensor(4.0)).data == 16000.0

    def test_linear_in_weight_bits(self):
        cost = LayerCost(macs=500, n_weight_elems=1, n_act_elems=1)
        one = float(layer_bops(cost, bit_tensor(4.0), bit_tensor(6.0)).data)
        two = float(layer_bops(cost, bit_tensor(8.0), bit_tensor(6.0)).data)
        assert two == 2 * one

    @pytest.mark.parametrize("bw,ba", [(2, 3), (4, 4), (5, 8)])
    def test_integer_bits_exact_product(self, bw, ba):
        cost = LayerCost(macs=12345, n_weight_elems=1, n_act_elems=1)
        out = layer_bops(cost, bit_tensor(float(bw)), bit_tensor(float(ba)))
        assert float(out.data) == float(12345 * bw * ba)


class TestBopsPenalty:
    def layer(self, macs, bw, ba):
        return (LayerCost(macs=macs, n_weight_elems=1, n_act_elems=1),
                bit_tensor(bw), bit_tensor(ba))

    def test_zero_at_target(self):
        layers = [self.layer(1000, 4.0, 4.0)]
        t = ResourceTarget("bops", 16000.0, lam=1.0)
        assert bops_penalty(layers, t).data == 0.0

    def test_ratio_excess_value(self):
        layers = [self.layer(1000, 4.0, 6.0)]  # 24000 = 1.5 * 16000
        t = ResourceTarget("bops", 16000.0, lam=1.0, huber_delta=1.0)
        assert np.isclose(bops_penalty(layers, t).data, 0.125, rtol=1e-6)

    def test_gradient_nonnegative_when_over_budget(self):
        layers = [self.layer(1000, 6.0, 6.0), self.layer(2000, 5.0, 5.0)]
        t = ResourceTarget("bops", 10000.0, lam=1.0)
        bits = [b for _, bw, ba in layers for b in (bw, ba)]
        zero_grads(bits)
        bops_penalty(layers, t).backward()
        assert all(float(b.grad) >= 0 for b in bits)

    def test_empty_rejected(self):
        t = ResourceTarget("bops", 100.0)
        with pytest.raises(ValueError, match="nonempty"):
            bops_penalty([], t)


class TestResourceTarget:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            ResourceTarget("latency", 1.0)

    def test_nonpositive_target_rejected(self):
        with pytest.raises(ValueError, match="target"):
            ResourceTarget("bops", 0.0)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError, match="lambda"):
            ResourceTarget("avg_bit_weight", 4.0, lam=-0.1)


class TestTotalLoss:
    def test_no_penalties_is_task_loss(self):
        task = Tensor(1.25)
        assert total_loss(task, []) is task

    def test_zero_penalties_add_nothing(self):
        out = total_loss(Tensor(1.0), [Tensor(0.0), Tensor(0.0)])
        assert out.data == 1.0

    def test_sums_terms(self):
        out = total_loss(Tensor(1.0), [Tensor(0.1), Tensor(0.2)])
        assert np.isclose(out.data, 1.3, rtol=1e-6)
