"""Loss terms and the FLOPs budget model."""

import math

import numpy as np
import pytest
from count_flops import count_resnet

from kdfs import tensor as T
from kdfs.errors import ContractError, DataError, DimensionError, NumericError
from kdfs.layers import Architecture, build_resnet
from kdfs.objective import (LossWeights, build_flops_model, ce_loss, flops_of,
                            flops_regularizer, kd_loss, total_loss)
from kdfs.sampler import SamplerParams, gumbel_softmax, ste_forward_backward
from kdfs.tensor import Tape, Tensor, backward, finite_diff_check


class TestCeLoss:
    def test_uniform_logits_give_log_k(self):
        logits = Tensor(np.zeros((4, 10)))
        labels = np.array([0, 3, 7, 9])
        assert ce_loss(logits, labels).item() == pytest.approx(math.log(10), rel=1e-6)

    def test_saturates_to_zero_with_margin(self):
        logits = np.zeros((2, 5))
        logits[0, 1] = logits[1, 4] = 100.0
        assert ce_loss(Tensor(logits), np.array([1, 4])).item() < 1e-6

    def test_matches_log_sum_exp_oracle(self, rng):
        z = rng.standard_normal((6, 8)) * 3
        labels = rng.integers(0, 8, size=6)
        lse = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)
        expected = float((lse - z[np.arange(6), labels]).mean())
        assert ce_loss(Tensor(z), labels).item() == pytest.approx(expected, rel=1e-6)

    def test_out_of_range_label(self):
        with pytest.raises(DataError):
            ce_loss(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_gradcheck(self, rng):
        labels = rng.integers(0, 5, size=4)
        for trial in range(10):
            r = np.random.default_rng(trial)
            z = Tensor(r.standard_normal((4, 5)), requires_grad=True)
            assert finite_diff_check(lambda v: ce_loss(v, labels), z) < 1e-3


def _kl_oracle(t, s, temp):
    at = np.exp(t / temp - np.logaddexp.reduce(t / temp, axis=1, keepdims=True))
    ls = s / temp - np.logaddexp.reduce(s / temp, axis=1, keepdims=True)
    lt = t / temp - np.logaddexp.reduce(t / temp, axis=1, keepdims=True)
    return float(temp * temp * (at * (lt - ls)).sum(axis=1).mean())


class TestKdLoss:
    def test_identical_logits_zero(self, rng):
        z = rng.standard_normal((3, 7)).astype(np.float32)
        assert kd_loss(Tensor(z), Tensor(z.copy()), 3.0).item() == pytest.approx(0.0, abs=1e-7)

    def test_two_class_value(self):
        t = Tensor(np.array([[1.0, 0.0]]))
        s = Tensor(np.array([[0.0, 1.0]]))
        # KL(softmax([1,0]) || softmax([0,1])) = (e-1)/(e+1) computed exactly
        expected = (math.e - 1) / (math.e + 1)
        assert kd_loss(t, s, 1.0).item() == pytest.approx(expected, rel=1e-6)
        assert expected == pytest.approx(0.4621, abs=1e-4)

    def test_matches_high_precision_oracle(self, rng):
        t = rng.standard_normal((5, 9)) * 2
        s = rng.standard_normal((5, 9)) * 2
        got = kd_loss(Tensor(t), Tensor(s), 3.0).item()
        assert got == pytest.approx(_kl_oracle(t, s, 3.0), rel=1e-5)

    def test_nonnegative(self, rng):
        for trial in range(20):
            r = np.random.default_rng(trial)
            t, s = r.standard_normal((4, 6)), r.standard_normal((4, 6))
            assert kd_loss(Tensor(t), Tensor(s), 3.0).item() >= 0.0

    def test_teacher_side_isolated(self, rng):
        t = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        s = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        with Tape():
            backward(kd_loss(t, s, 2.0))
        assert t.grad is None and s.grad is not None

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            kd_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), 3.0)

    def test_gradcheck(self, rng):
        t = rng.standard_normal((3, 6))
        for trial in range(10):
            r = np.random.default_rng(trial)
            s = Tensor(r.standard_normal((3, 6)), requires_grad=True)
            assert finite_diff_check(lambda v: kd_loss(Tensor(t), v, 3.0), s) < 1e-3


def _net(widths, blocks, size=16, cin=1, classes=4, seed=0):
    return build_resnet(Architecture(list(widths), list(blocks), classes=classes,
                                     in_channels=cin, image_size=size), seed)


class TestFlopsModel:
    def test_all_ones_equals_teacher_total(self):
        net = _net([8, 16], [1, 2])
        model = build_flops_model(net)
        ones = [np.ones(c) for c in net.mask_sizes()]
        assert flops_of(model, ones) == flops_of(model) == model.teacher_total()

    def test_single_conv_term_value(self):
        # one interior 3x3 conv, 16 in / 16 out, 32x32 output
        assert 32 * 32 * 16 * 9 * 16 == 2_359_296
        net = _net([16, 32, 64], [9, 9, 9], size=32, cin=3, classes=10)
        model = build_flops_model(net)
        conv = next(c for c in model.conv_costs if c.layer_id == "s0.b0.c2")
        assert conv.fixed_factor * conv.in_channels * conv.out_channels == 2_359_296

    def test_matches_counting_script_on_five_architectures(self):
        cases = [([16, 32, 64], [9, 9, 9], 32, 3, 10), ([16, 32, 64], [1, 1, 1], 28, 1, 10),
                 ([8, 16, 32], [2, 2, 2], 16, 1, 4), ([4], [1], 8, 2, 2),
                 ([12, 24], [3, 2], 20, 3, 7)]
        for widths, blocks, size, cin, k in cases:
            net = _net(widths, blocks, size=size, cin=cin, classes=k)
            oracle = count_resnet(widths, blocks, size, cin, k)
            assert flops_of(build_flops_model(net)) == oracle["flops"]
            assert net.param_count() == oracle["params"]

    def test_halving_adjacent_masks_quarters_interior_term(self):
        net = _net([8, 8], [1, 1], size=8)
        model = build_flops_model(net)
        full = [np.ones(8) for _ in range(4)]
        half = [np.ones(8) for _ in range(4)]
        half[0][:4] = 0  # conv1 of block 0
        half[1][:4] = 0  # conv2 of block 0
        conv2 = next(c for c in model.conv_costs if c.layer_id == "s0.b0.c2")
        term_full = conv2.fixed_factor * 8 * 8
        term_half = conv2.fixed_factor * 4 * 4
        drop_conv1 = next(c for c in model.conv_costs if c.layer_id == "s0.b0.c1")
        drop_c1 = drop_conv1.fixed_factor * drop_conv1.in_channels * 4
        drop_next = next(c for c in model.conv_costs if c.layer_id == "s1.b0.c1")
        drop_n = drop_next.fixed_factor * 0  # next block input is full width
        expected = flops_of(model, full) - (term_full - term_half) \
            - (drop_conv1.fixed_factor * drop_conv1.in_channels * 8 - drop_c1) - drop_n
        assert flops_of(model, half) == expected
        assert term_half * 4 == term_full

    def test_budget_monotone_in_mask_zeroing(self, rng):
        net = _net([6, 10], [2, 1])
        model = build_flops_model(net)
        masks = [np.ones(c) for c in net.mask_sizes()]
        prev = flops_of(model, masks)
        order = [(i, j) for i, c in enumerate(net.mask_sizes()) for j in range(c)]
        rng.shuffle(order)
        for i, j in order[:20]:
            if masks[i][j] == 0:
                continue
            masks[i][j] = 0
            cur = flops_of(model, masks)
            assert cur <= prev
            prev = cur

    def test_graph_matches_integer_path_and_is_differentiable(self, rng):
        net = _net([6, 8], [1, 1])
        model = build_flops_model(net)
        sampler = SamplerParams.init(net.mask_sizes(), seed=0)
        with Tape():
            pis, masks = sampler.sample(1.0)
            g = model.graph(masks)
            backward(g)
        hard = [m.data for m in masks]
        assert int(round(g.item())) == flops_of(model, hard)
        assert any(p.grad is not None and np.abs(p.grad).sum() > 0 for p in sampler.ps)

    def test_unresolved_masks_rejected(self):
        net = _net([4], [1])
        model = build_flops_model(net)
        with pytest.raises(ContractError):
            flops_of(model, [np.ones(4)])  # needs two masks


class TestFlopsRegularizer:
    def test_on_budget_is_zero(self):
        assert flops_regularizer(50.0, 100.0, 0.5) == 0.0

    def test_normalized_distance(self):
        assert flops_regularizer(70.0, 100.0, 0.5) == pytest.approx(0.2)

    def test_overbudget_gradient_pushes_down(self):
        # numeric probe: d reg / d student_flops > 0 above the target
        s = Tensor(np.asarray(70.0, dtype=np.float64), requires_grad=True)
        err = finite_diff_check(lambda v: flops_regularizer(v, 100.0, 0.5), s, eps=1e-3)
        assert err < 1e-6
        assert s.grad > 0

    def test_piecewise_linear_minimum_at_target(self):
        vals = [flops_regularizer(x, 100.0, 0.4) for x in (59.0, 60.0, 61.0)]
        assert vals[1] == 0.0 and vals[0] == pytest.approx(vals[2]) and vals[0] > 0

    def test_squared_variant(self):
        assert flops_regularizer(70.0, 100.0, 0.5, squared=True) == pytest.approx(0.04)


class TestTotalLoss:
    def _scalars(self, *vals):
        return [Tensor(np.asarray(v, dtype=np.float32)) for v in vals]

    def test_weighted_sum_arithmetic(self):
        ce, kd, rl, reg = self._scalars(1.0, 2.0, 0.001, 0.0001)
        w = LossWeights(lambda_kd=0.05, lambda_rl=1000.0, lambda_reg=10000.0)
        assert total_loss(ce, kd, [rl], reg, w).item() == pytest.approx(3.1, rel=1e-5)

    def test_all_zero_weights_reduce_to_ce(self):
        ce, kd, rl, reg = self._scalars(1.7, 9.9, 5.0, 3.0)
        w = LossWeights(lambda_kd=0.0, lambda_rl=0.0, lambda_reg=0.0)
        assert total_loss(ce, kd, [rl], reg, w).item() == pytest.approx(1.7)

    def test_default_weights_match_published_setting(self):
        w = LossWeights()
        assert (w.lambda_kd, w.lambda_rl, w.lambda_reg) == (0.05, 1000.0, 10000.0)
        assert w.kd_temperature == 3.0

    def test_non_finite_term_named(self):
        ce, kd, rl = self._scalars(1.0, 2.0, 0.5)
        reg = Tensor(np.asarray(np.inf, dtype=np.float32))
        with pytest.raises(NumericError, match="reg"):
            total_loss(ce, kd, [rl], reg, LossWeights())

    def test_invalid_weights_rejected(self):
        with pytest.raises(ContractError):
            LossWeights(lambda_kd=-0.1)
        with pytest.raises(ContractError):
            LossWeights(compression_rate=1.0)
        with pytest.raises(ContractError):
            LossWeights(kd_temperature=0.0)

    def test_single_backward_populates_all_parameter_groups(self, rng):
        # end-to-end differentiability: W, decoder weights and sampler scores
        # all receive gradients from one backward pass
        from kdfs.decoder import build_stage_decoders, rl_loss
        from kdfs.layers import forward
        net = _net([5, 6], [1, 1], size=8)
        teacher = _net([5, 6], [1, 1], size=8, seed=9)
        teacher.set_requires_grad(False)
        sampler = SamplerParams.init(net.mask_sizes(), seed=0)
        decoders = build_stage_decoders([5, 6], depth=1, seed=0)
        model = build_flops_model(net)
        x = Tensor(rng.standard_normal((2, 1, 8, 8)).astype(np.float32))
        y = np.array([0, 2])
        with Tape():
            pis, masks = sampler.sample(1.0)
            trace = forward(net, x, masks, mode="train")
            t_trace = forward(teacher, x, mode="eval")
            ce = ce_loss(trace.logits, y)
            kd = kd_loss(t_trace.logits, trace.logits, 3.0)
            rls = [rl_loss(Tensor(t_trace.stage_features[s].data),
                           decoders[s].forward(trace.stage_features[s]))
                   for s in range(2)]
            reg = flops_regularizer(model.graph(masks), model.teacher_total(), 0.5)
            backward(total_loss(ce, kd, rls, reg, LossWeights()))
        for name, p in net.named_params():
            assert p.grad is not None, name
        for d in decoders:
            for name, p in d.named_params():
                assert p.grad is not None, name
        for i, p in enumerate(sampler.ps):
            assert p.grad is not None, f"sampler.p{i}"
