"""Gumbel sampling statistics, relaxation, straight-through gradients, and
temperature schedules."""

import math

import numpy as np
import pytest

from kdfs import rng as rngmod
from kdfs import tensor as T
from kdfs.errors import ContractError
from kdfs.sampler import (MaskState, SamplerParams, TemperatureSchedule,
                          gumbel_noise, gumbel_softmax, hard_mask,
                          inference_mask, ste_forward_backward, temperature_at)
from kdfs.tensor import Tape, Tensor, backward

EULER_MASCHERONI = 0.5772156649015329


class TestGumbelNoise:
    def test_fixed_point_at_one_over_e(self):
        # u = 1/e gives -log(-log(1/e)) = -log(1) = 0
        assert -math.log(-math.log(1 / math.e)) == pytest.approx(0.0, abs=1e-12)

    def test_moments_match_gumbel_distribution(self):
        gen = rngmod.stream(0, 99)
        draws = np.concatenate([gumbel_noise(gen, 10_000).ravel() for _ in range(50)])
        assert draws.size == 1_000_000
        assert abs(draws.mean() - EULER_MASCHERONI) < 0.01
        assert abs(draws.var() - math.pi ** 2 / 6) < 0.05

    def test_shape_and_finiteness(self):
        g = gumbel_noise(rngmod.stream(1, 1), 17)
        assert g.shape == (17, 2)
        assert np.isfinite(g).all()


def _softmax_oracle(row, tau):
    # float64 with explicit max-subtraction is exact far beyond the
    # 5-decimal comparisons below
    z = (np.asarray(row, dtype=np.float64)) / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


class TestGumbelSoftmax:
    def test_symmetric_row(self):
        pi = gumbel_softmax(Tensor(np.zeros((1, 2))), np.zeros((1, 2)), 1.0)
        np.testing.assert_allclose(pi.data, [[0.5, 0.5]], atol=1e-7)

    def test_known_value(self):
        pi = gumbel_softmax(Tensor(np.array([[1.0, 3.0]])), np.zeros((1, 2)), 1.0)
        np.testing.assert_allclose(pi.data, [[0.11920292, 0.88079708]], atol=5e-6)
        np.testing.assert_allclose(pi.data[0], _softmax_oracle([1.0, 3.0], 1.0), atol=5e-6)

    def test_low_temperature_saturates(self):
        pi = gumbel_softmax(Tensor(np.array([[1.0, 3.0]], dtype=np.float64)),
                            np.zeros((1, 2)), 0.01)
        assert pi.data[0, 1] >= 1 - 1e-8

    def test_temperature_contract(self):
        with pytest.raises(ContractError):
            gumbel_softmax(Tensor(np.zeros((1, 2))), np.zeros((1, 2)), 0.0)

    def test_rows_stochastic_for_extreme_inputs(self, rng):
        p = Tensor(rng.standard_normal((64, 2)) * 50)
        g = gumbel_noise(rngmod.stream(2, 3), 64)
        for tau in (2.0, 1.0, 0.5, 0.1, 0.01):
            pi = gumbel_softmax(p, g, tau)
            np.testing.assert_allclose(pi.data.sum(axis=1), 1.0, atol=1e-6)
            assert np.isfinite(pi.data).all()

    def test_entropy_strictly_sharpens_as_tau_drops(self, rng):
        p = Tensor(rng.standard_normal((100, 2)))
        g = gumbel_noise(rngmod.stream(5, 5), 100)

        def entropy(tau):
            pi = gumbel_softmax(p, g, tau).data.astype(np.float64)
            pi = np.clip(pi, 1e-300, 1.0)
            return -(pi * np.log(pi)).sum(axis=1)

        taus = [2.0, 1.0, 0.5, 0.1]
        ents = [entropy(t) for t in taus]
        for hi, lo in zip(ents, ents[1:]):
            assert (lo < hi).all()


class TestHardMask:
    @pytest.mark.parametrize("row,expect", [([0.2, 0.8], 1.0), ([0.8, 0.2], 0.0),
                                            ([0.5, 0.5], 1.0)])
    def test_argmax_with_keep_ties(self, row, expect):
        assert hard_mask(np.array([row]))[0] == expect

    def test_mask_state_validation(self, rng):
        pi = gumbel_softmax(Tensor(rng.standard_normal((8, 2))),
                            gumbel_noise(rngmod.stream(0, 0), 8), 0.7)
        state = MaskState(pi=pi.data, m=hard_mask(pi))
        state.validate()
        bad = MaskState(pi=pi.data, m=1.0 - hard_mask(pi))
        with pytest.raises(ContractError):
            bad.validate()


class TestSTE:
    def test_gradient_copied_to_second_column(self, rng):
        c = rng.standard_normal(6).astype(np.float32)
        pi = Tensor(rng.random((6, 2)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            m = ste_forward_backward(pi)
            backward(T.tsum(T.mul(m, Tensor(c))))
        np.testing.assert_allclose(pi.grad[:, 1], c, rtol=1e-6)
        assert not pi.grad[:, 0].any()
        # tape inspection: gradient received by pi equals gradient emitted at m
        m_grad = tape.grads[m.node[1]]
        np.testing.assert_array_equal(pi.grad[:, 1], m_grad)

    def test_zero_coefficients_zero_gradient(self, rng):
        pi = Tensor(rng.random((4, 2)).astype(np.float32), requires_grad=True)
        with Tape():
            m = ste_forward_backward(pi)
            backward(T.scale(T.tsum(m), 0.0))
        assert not pi.grad.any()

    def test_forward_is_hard_mask(self, rng):
        pi = Tensor(rng.random((9, 2)).astype(np.float32))
        np.testing.assert_array_equal(ste_forward_backward(pi).data, hard_mask(pi))

    def test_budget_pressure_lowers_keep_score(self):
        # one optimizer step against a pure cost objective must push the
        # keep column down relative to the drop column for the priciest filter
        from kdfs.trainer import AdaMax
        p = Tensor(np.array([[0.0, 0.5], [0.0, 0.5]], dtype=np.float32), requires_grad=True)
        costs = Tensor(np.array([5.0, 1.0], dtype=np.float32))
        opt = AdaMax([p])
        before = (p.data[:, 1] - p.data[:, 0]).copy()
        with Tape():
            pi = gumbel_softmax(p, np.zeros((2, 2)), 1.0)
            m = ste_forward_backward(pi)
            backward(T.tsum(T.mul(m, costs)))
        opt.step(0.05)
        after = p.data[:, 1] - p.data[:, 0]
        assert after[0] < before[0]  # high-cost filter pushed toward drop
        assert after[0] <= after[1] + 1e-6


class TestTemperatureSchedule:
    def test_linear_endpoints(self):
        s = TemperatureSchedule("linear", 1.0, 0.1, epochs=350)
        assert temperature_at(s, 0) == pytest.approx(1.0)
        assert temperature_at(s, 350) == pytest.approx(0.1)

    def test_exponential_endpoints_and_midpoint(self):
        s = TemperatureSchedule("exponential", 1.0, 0.01, epochs=100)
        assert temperature_at(s, 0) == pytest.approx(1.0)
        assert temperature_at(s, 100) == pytest.approx(0.01)
        assert temperature_at(s, 50) == pytest.approx(math.sqrt(1.0 * 0.01))

    def test_monotone_between_endpoints(self):
        for kind in ("linear", "exponential"):
            s = TemperatureSchedule(kind, 1.0, 0.1, epochs=10)
            vals = [temperature_at(s, e) for e in range(11)]
            assert all(a > b for a, b in zip(vals, vals[1:]))
            assert all(0.1 <= v <= 1.0 for v in vals)

    def test_out_of_range_epoch(self):
        s = TemperatureSchedule("linear", 1.0, 0.1, epochs=5)
        with pytest.raises(ContractError):
            temperature_at(s, 6)

    def test_bad_kind_rejected(self):
        with pytest.raises(ContractError):
            TemperatureSchedule("cosine", 1.0, 0.1, epochs=5)


class TestInferenceMask:
    @pytest.mark.parametrize("row,expect", [([0.3, 0.7], 1.0), ([0.7, 0.3], 0.0)])
    def test_thresholds_scores(self, row, expect):
        assert inference_mask(np.array([row]))[0] == expect

    def test_matches_noise_free_training_mask(self, rng):
        p = Tensor(rng.standard_normal((32, 2)))
        for tau in (3.0, 1.0, 0.2, 0.01):
            pi = gumbel_softmax(p, np.zeros((32, 2)), tau)
            np.testing.assert_array_equal(inference_mask(p), hard_mask(pi))


class TestSamplerParams:
    def test_init_shapes_and_seeding(self):
        s1 = SamplerParams.init([4, 8, 8], seed=3)
        s2 = SamplerParams.init([4, 8, 8], seed=3)
        assert [p.shape for p in s1.ps] == [(4, 2), (8, 2), (8, 2)]
        for a, b in zip(s1.ps, s2.ps):
            assert np.array_equal(a.data, b.data)

    def test_streams_independent_of_layer_order(self):
        s = SamplerParams.init([4, 4], seed=0)
        g0 = gumbel_noise(s.gens[0], 4)
        s2 = SamplerParams.init([4, 4], seed=0)
        g1_first = gumbel_noise(s2.gens[1], 4)
        g0_second = gumbel_noise(s2.gens[0], 4)
        assert np.array_equal(g0, g0_second)
        assert not np.array_equal(g0, g1_first)

    def test_sample_returns_consistent_pairs(self):
        s = SamplerParams.init([6], seed=1)
        pis, masks = s.sample(0.5)
        np.testing.assert_array_equal(masks[0].data, hard_mask(pis[0]))


def test_gumbel_max_frequency_matches_softmax():
    # the argmax of (P+G)/tau is tau-invariant and lands on column 2 with
    # probability softmax(P)[2] (the Gumbel-max construction)
    gen = rngmod.stream(11, 100)
    rows = np.random.default_rng(0).standard_normal((50, 2)) * 1.5
    p = Tensor(rows)
    hits = np.zeros(50)
    n = 100_000
    for _ in range(n):
        g = gumbel_noise(gen, 50)
        hits += hard_mask(gumbel_softmax(p, g, 1.0))
    target = np.exp(rows[:, 1]) / (np.exp(rows[:, 0]) + np.exp(rows[:, 1]))
    assert np.abs(hits / n - target).max() < 0.01
