"""Trainer tests: schedule, optimizers, the two-stage pipeline, BN recal."""

import numpy as np
import pytest

from pqat.autodiff import Tensor
from pqat.data import make_gaussian_blobs
from pqat.models import NetworkSpec, build_network
from pqat.penalties import ResourceTarget
from pqat.training import (
    TrainConfig,
    adam_step,
    bn_recalibrate,
    cosine_warmup_lr,
    evaluate_quant,
    sgd_momentum_step,
    train_fp,
    train_lsq,
    train_two_stage,
)


class TestSchedule:
    def test_ramp_reaches_lr_at_warmup_end(self):
        assert cosine_warmup_lr(10, 100, 10, 0.5, 0.01) == 0.5

    def test_final_step_hits_floor(self):
        lr = cosine_warmup_lr(99, 100, 10, 0.5, 0.01)
        assert np.isclose(lr, 0.5 * 0.01, rtol=1e-9)

    def test_decay_midpoint(self):
        # halfway through decay the cosine term is zero
        warmup, total = 10, 100
        mid = warmup + (total - 1 - warmup) // 2
        # pick an even span so the midpoint is exact
        warmup, total = 9, 100
        mid = warmup + (total - 1 - warmup) // 2
        lr = cosine_warmup_lr(mid, total, warmup, 1.0, 0.2)
        assert np.isclose(lr, 0.2 + 0.8 / 2, rtol=1e-9)

    def test_warmup_not_below_total(self):
        with pytest.raises(ValueError, match="warmup"):
            cosine_warmup_lr(0, 10, 10, 0.1, 0.01)

    def test_step_bounds(self):
        with pytest.raises(ValueError, match="step"):
            cosine_warmup_lr(100, 100, 10, 0.1, 0.01)


class TestOptimizerSteps:
    def test_sgd_single_step_scales_weight(self):
        w = Tensor(np.array([2.0, -4.0], dtype=np.float32), requires_grad=True)
        grad = w.data.copy()  # gradient of 0.5 w^2 is w
        sgd_momentum_step(w, grad, {}, lr=0.1, momentum=0.9)
        assert np.allclose(w.data, [1.8, -3.6], rtol=1e-6)

    def test_sgd_momentum_accumulates(self):
        w = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        state = {}
        sgd_momentum_step(w, np.array([1.0], dtype=np.float32), state, lr=0.1)
        sgd_momentum_step(w, np.array([1.0], dtype=np.float32), state, lr=0.1)
        # second velocity = 0.9 * 1 + 1
        assert np.isclose(w.data[0], 1.0 - 0.1 - 0.1 * 1.9, rtol=1e-6)

    def test_adam_first_step_magnitude_is_lr(self):
        for scale in (1e-3, 1.0, 1e3):
            w = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
            adam_step(w, np.array([scale], dtype=np.float32), {}, lr=0.01)
            assert np.isclose(abs(w.data[0]), 0.01, rtol=1e-3)

    def test_zero_grad_zero_decay_is_noop(self):
        w = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
        sgd_momentum_step(w, np.zeros(1, dtype=np.float32), {}, lr=0.5)
        assert w.data[0] == 3.0
        adam_step(w, np.zeros(1, dtype=np.float32), {}, lr=0.5)
        assert w.data[0] == 3.0

    def test_weight_decay_pulls_toward_zero(self):
        w = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        sgd_momentum_step(w, np.zeros(1, dtype=np.float32), {}, lr=0.1, weight_decay=0.1)
        assert w.data[0] < 1.0


@pytest.fixture(scope="module")
def trained_run():
    data = make_gaussian_blobs(n=1200, classes=3, dim=16, seed=0)
    spec = NetworkSpec(kind="mlp", in_dim=16, hidden=[32, 16], classes=3, batch_norm=False)
    net = build_network(spec, seed=0)
    cfg = TrainConfig(
        stage1_epochs=6, stage2_epochs=2, pretrain_epochs=3, lr=0.02,
        warmup_epochs=1, batch_size=64, seed=0,
        targets=[ResourceTarget("avg_bit_weight", 4.0, lam=1.0),
                 ResourceTarget("avg_bit_activation", 4.0, lam=1.0)],
    )
    metrics, summary = train_two_stage(net, data, cfg)
    return data, spec, cfg, net, metrics, summary


class TestTwoStage:
    def test_metrics_cover_all_stages(self, trained_run):
        *_, metrics, _ = trained_run
        stages = {m["stage"] for m in metrics}
        assert {"fp", "stage1", "transition", "stage2"} <= stages

    def test_metrics_carry_per_layer_bits_and_alphas(self, trained_run):
        *_, metrics, _ = trained_run
        record = [m for m in metrics if m["stage"] == "stage1"][0]
        assert "dense0.w" in record["bits"] and "dense0.w" in record["alphas"]

    def test_bits_frozen_through_stage_two(self, trained_run):
        *_, metrics, _ = trained_run
        transition = [m for m in metrics if m["stage"] == "transition"][0]
        for m in metrics:
            if m["stage"] == "stage2":
                assert m["bits"] == transition["bits"]

    def test_budget_respected(self, trained_run):
        *_, summary = trained_run
        assert abs(summary["avg_bits_weight"] - 4.0) <= 0.5
        assert abs(summary["avg_bits_activation"] - 4.0) <= 0.5

    def test_stage2_keeps_or_improves_transition_accuracy(self, trained_run):
        *_, summary = trained_run
        assert summary["final_metric"] >= summary["transition_metric"] - 0.02

    def test_zero_stage2_still_emits_transition_eval(self):
        data = make_gaussian_blobs(n=300, classes=3, dim=8, seed=1)
        spec = NetworkSpec(kind="mlp", in_dim=8, hidden=[16], classes=3, batch_norm=False)
        net = build_network(spec, seed=1)
        cfg = TrainConfig(stage1_epochs=2, stage2_epochs=0, lr=0.02, warmup_epochs=1,
                          batch_size=64, seed=1)
        metrics, summary = train_two_stage(net, data, cfg)
        assert any(m["stage"] == "transition" for m in metrics)
        assert summary["transition_metric"] == summary["final_metric"]

    def test_pipeline_bit_reproducible_under_seed(self):
        data = make_gaussian_blobs(n=400, classes=3, dim=8, seed=2)
        spec = NetworkSpec(kind="mlp", in_dim=8, hidden=[16], classes=3, batch_norm=False)

        def run():
            net = build_network(spec, seed=2)
            cfg = TrainConfig(stage1_epochs=3, stage2_epochs=1, lr=0.02, warmup_epochs=1,
                              batch_size=64, seed=2,
                              targets=[ResourceTarget("avg_bit_weight", 4.0)])
            _, summary = train_two_stage(net, data, cfg)
            return net, summary

        net_a, sum_a = run()
        net_b, sum_b = run()
        assert sum_a == sum_b
        for (_, ta), (_, tb) in zip(net_a.parameters(), net_b.parameters()):
            assert np.array_equal(ta.data, tb.data)

    def test_unconstrained_high_bits_match_fp_within_a_point(self):
        data = make_gaussian_blobs(n=1200, classes=3, dim=16, seed=0)
        spec = NetworkSpec(kind="mlp", in_dim=16, hidden=[32, 16], classes=3, batch_norm=False)
        net_q = build_network(spec, seed=0)
        cfg = TrainConfig(stage1_epochs=6, stage2_epochs=2, pretrain_epochs=3, lr=0.02,
                          warmup_epochs=1, batch_size=64, seed=0)
        for _, qp in net_q.quantizers():
            qp.bit_raw.data = 30.0  # saturate at the top of the bit range
        _, s_q = train_two_stage(net_q, data, cfg)
        net_fp = build_network(spec, seed=0)
        cfg_fp = TrainConfig(stage1_epochs=9, stage2_epochs=2, lr=0.02, warmup_epochs=1,
                             batch_size=64, seed=0)
        train_fp(net_fp, data, cfg_fp)
        fp_metric = evaluate_quant(net_fp, data)["metric"]
        assert abs(s_q["final_metric"] - fp_metric) <= 0.01 + 1e-9

    def test_quantizer_params_free_of_weight_decay(self):
        data = make_gaussian_blobs(n=200, classes=2, dim=6, seed=4)
        spec = NetworkSpec(kind="mlp", in_dim=6, hidden=[8], classes=2, batch_norm=False)
        net = build_network(spec, seed=4)
        from pqat.training import Optimizer

        opt = Optimizer("sgd_momentum", weight_decay=0.5)
        opt.set_params(net.parameters(), net.quantizer_params())
        before = {n: t.data.copy() for n, t in net.quantizer_params()}
        # zero gradients everywhere: only decay could move anything
        for t in opt.params():
            t.grad = np.zeros_like(t.data)
        opt.step(0.1)
        for n, t in net.quantizer_params():
            assert np.array_equal(t.data, before[n]), n
        # while decayable weights did move
        assert not np.array_equal(net.layers[0].weight.data,
                                  build_network(spec, seed=4).layers[0].weight.data)


class TestRegression:
    def test_wave_regressor_trains_under_quantization(self):
        from pqat.data import make_regression_wave

        data = make_regression_wave(n=800, seed=0)
        spec = NetworkSpec(kind="tiny_regressor", in_dim=1, hidden=[32], batch_norm=False)
        net = build_network(spec, seed=0)
        cfg = TrainConfig(stage1_epochs=8, stage2_epochs=2, pretrain_epochs=6, lr=0.02,
                          warmup_epochs=1, batch_size=64, seed=0, optimizer="adam",
                          targets=[ResourceTarget("avg_bit_weight", 6.0)])
        metrics, summary = train_two_stage(net, data, cfg)
        assert summary["metric_name"] == "mse"
        # the wave has unit-order amplitude; fitting must beat the flat predictor
        assert summary["final_metric"] < 0.2
        assert abs(summary["avg_bits_weight"] - 6.0) <= 1.0


class TestLsqBaseline:
    def test_bits_pinned_and_frozen(self, blobs_small, mlp_spec):
        net = build_network(mlp_spec, seed=0)
        cfg = TrainConfig(stage1_epochs=2, stage2_epochs=0, lr=0.02, warmup_epochs=1,
                          batch_size=64, seed=0)
        _, summary = train_lsq(net, blobs_small, cfg, bit=4.0)
        assert all(round(b) == 4 for b in summary["bits"].values())
        assert all(qp.bit_frozen for _, qp in net.quantizers())
        assert all(qp.mode == "quant" for _, qp in net.quantizers())


class TestBnRecalibrate:
    def make_bn_net(self):
        spec = NetworkSpec(kind="small_cnn", in_shape=(1, 4, 4), channels=[4], classes=2)
        return build_network(spec, seed=0)

    def test_no_bn_is_noop(self, blobs_small, mlp_spec):
        net = build_network(mlp_spec, seed=0)
        before = net.clone_weights()
        bn_recalibrate(net, blobs_small, n_batches=2)
        after = net.clone_weights()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_constant_batches_average_to_batch_statistics(self):
        net = self.make_bn_net()
        net.set_mode("quant")
        inputs = np.full((32, 1, 4, 4), 0.5, dtype=np.float32)
        from pqat.data import Dataset
        from pqat.quantizer import quant_forward
        import pqat.autodiff as ad

        data = Dataset(inputs, np.zeros(32, dtype=np.int64))
        bn_recalibrate(net, data, n_batches=2, batch_size=16)
        bn = net.layers[0].bn
        # identical batches: the streaming average equals one batch's stats
        layer = net.layers[0]
        x = quant_forward(ad.Tensor(inputs[:16]), layer.a_quant)
        w = quant_forward(layer.weight, layer.w_quant)
        y = ad.conv2d(x, w, stride=1, pad=1) + ad.reshape(layer.bias, (1, -1, 1, 1))
        want_mean = y.data.mean(axis=(0, 2, 3))
        want_var = y.data.var(axis=(0, 2, 3))
        assert np.allclose(bn.running_mean, want_mean, atol=1e-5)
        assert np.allclose(bn.running_var, want_var, atol=1e-5)

    def test_never_touches_weights(self, blobs_small):
        spec = NetworkSpec(kind="small_cnn", in_shape=(1, 4, 4), channels=[4], classes=3)
        net = build_network(spec, seed=0)
        net.set_mode("quant")
        data = make_gaussian_blobs(n=200, classes=3, dim=16, seed=5)
        before = net.clone_weights()
        bn_recalibrate(net, data, n_batches=3)
        for name, t in net.parameters():
            assert np.array_equal(t.data, before[name]), name
