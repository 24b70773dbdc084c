"""Stopping machinery: regret, normalization, smoothing, gate, controller."""

from __future__ import annotations

import math

import numpy as np
import pytest

from espolab.mdpcore import log_softmax
from espolab.stopper import (
    BetaController,
    EmaStats,
    SmoothedScore,
    StopDecisionInput,
    WarmupGate,
    accumulate,
    anneal_beta,
    normalize_regret,
    should_stop,
    step_regret,
    update_beta,
    update_ema,
    warmup_step,
)


class TestStepRegret:
    def test_mode_sample_gives_zero(self):
        lp = log_softmax([2.0, 0.0, -1.0])
        assert step_regret(lp, 0) == 0.0

    def test_logit_gap_preserved(self):
        lp = log_softmax([2.0, 0.0])
        assert abs(step_regret(lp, 1) - 2.0) < 1e-12

    def test_three_token_derived_case(self):
        lp = log_softmax([1.0, 0.5, -0.3])
        assert abs(step_regret(lp, 2) - 1.3) < 1e-12

    def test_nonnegative_and_zero_iff_mode(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            logits = rng.normal(0, 2, size=rng.integers(2, 10))
            lp = log_softmax(logits)
            a = int(rng.integers(len(logits)))
            g = step_regret(lp, a)
            assert g >= 0.0
            assert (g == 0.0) == (logits[a] == logits.max())


class TestNormalizeRegret:
    def test_centering(self):
        stats = EmaStats(frozen_mu=0.7, frozen_var=2.0)
        assert normalize_regret(0.7, stats) == 0.0

    def test_clipping(self):
        stats = EmaStats(frozen_mu=0.0, frozen_var=1.0, clip_bound=5.0)
        assert normalize_regret(10.0, stats) == 5.0
        assert normalize_regret(-10.0, stats) == -5.0

    def test_derived_scaling(self):
        stats = EmaStats(frozen_mu=0.5, frozen_var=0.25, stabilizer=1e-8, clip_bound=5.0)
        expected = (1.5 - 0.5) / math.sqrt(0.25 + 1e-8)
        got = normalize_regret(1.5, stats)
        assert got == pytest.approx(expected, abs=1e-15)
        assert got == pytest.approx(2.0, abs=1e-6)

    def test_bounded_for_random_inputs(self):
        rng = np.random.default_rng(3)
        stats = EmaStats(frozen_mu=0.2, frozen_var=0.01, clip_bound=5.0)
        for _ in range(500):
            assert abs(normalize_regret(float(rng.normal(0, 50)), stats)) <= 5.0


class TestAccumulate:
    def test_geometric_recursion(self):
        score = SmoothedScore(0.0, alpha_s=0.9)
        expected = [0.1, 0.19, 0.271]
        for want in expected:
            score = accumulate(score, 1.0)
            assert score.z == pytest.approx(want, abs=1e-12)

    def test_fixed_point(self):
        score = SmoothedScore(0.37, alpha_s=0.9)
        assert accumulate(score, 0.37).z == pytest.approx(0.37, abs=1e-15)

    def test_negative_pull(self):
        score = SmoothedScore(0.5, alpha_s=0.9)
        assert accumulate(score, -5.0).z == pytest.approx(-0.05, abs=1e-12)


class TestShouldStop:
    def test_low_value_state_stops(self):
        inp = StopDecisionInput(z=1.5, value_estimate=0.1, value_floor=0.2,
                                warmup_active=False)
        assert should_stop(inp, BetaController(beta=7.0)) is True

    def test_warmup_gates_everything(self):
        inp = StopDecisionInput(z=1.5, value_estimate=0.1, value_floor=0.2,
                                warmup_active=True)
        assert should_stop(inp, BetaController(beta=7.0)) is False

    def test_high_value_grants_tolerance(self):
        inp = StopDecisionInput(z=1.5, value_estimate=0.5, value_floor=0.2,
                                warmup_active=False)
        assert should_stop(inp, BetaController(beta=7.0)) is False

    def test_tie_continues(self):
        inp = StopDecisionInput(z=1.4, value_estimate=0.1, value_floor=0.2,
                                warmup_active=False)
        assert should_stop(inp, BetaController(beta=7.0)) is False

    def test_monotone_in_beta_and_value(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            z = float(rng.normal(0, 2))
            v = float(rng.normal(0, 1))
            floor = float(rng.uniform(0.01, 1.0))
            beta = float(rng.uniform(0, 10))
            inp = StopDecisionInput(z, v, floor, False)
            fired = should_stop(inp, BetaController(beta=beta))
            higher_beta = should_stop(inp, BetaController(beta=beta + rng.uniform(0, 5)))
            higher_value = should_stop(
                StopDecisionInput(z, v + rng.uniform(0, 3), floor, False),
                BetaController(beta=beta))
            if not fired:
                assert not higher_beta
                assert not higher_value


class TestUpdateEma:
    def test_blend_arithmetic(self):
        stats = EmaStats(mu_g=0.0, var_g=1.0, alpha_ema=0.99)
        out = update_ema(stats, [1.0])
        assert out.mu_g == pytest.approx(0.01, abs=1e-12)
        assert out.frozen_mu == out.mu_g
        assert out.frozen_var == out.var_g

    def test_fixed_point(self):
        # batch [0, 4] has mean 2 and population variance 4
        stats = EmaStats(mu_g=2.0, var_g=4.0, frozen_mu=2.0, frozen_var=4.0)
        out = update_ema(stats, [0.0, 4.0])
        assert out.mu_g == pytest.approx(2.0, abs=1e-12)
        assert out.var_g == pytest.approx(4.0, abs=1e-12)

    def test_permutation_invariance_is_bit_exact(self):
        rng = np.random.default_rng(5)
        values = [float(v) for v in rng.normal(0, 1, size=1000)]
        shuffled = list(values)
        rng.shuffle(shuffled)
        stats = EmaStats()
        a = update_ema(stats, values)
        b = update_ema(stats, shuffled)
        assert a.mu_g == b.mu_g
        assert a.var_g == b.var_g

    def test_population_variance_formula(self):
        stats = EmaStats(mu_g=0.0, var_g=0.0, alpha_ema=0.5)
        out = update_ema(stats, [0.0, 2.0])  # mean 1, population var 1
        assert out.var_g == pytest.approx(0.5, abs=1e-12)

    def test_empty_batch_warns_and_keeps_stats(self, caplog):
        stats = EmaStats(mu_g=0.3)
        with caplog.at_level("WARNING"):
            out = update_ema(stats, [])
        assert out == stats
        assert "empty batch" in caplog.text

    def test_frozen_copies_change_only_through_update(self):
        stats = EmaStats()
        frozen_before = (stats.frozen_mu, stats.frozen_var)
        _ = normalize_regret(3.0, stats)
        assert (stats.frozen_mu, stats.frozen_var) == frozen_before


class TestBetaController:
    def test_proportional_step(self):
        ctrl = BetaController(beta=7.0, eta_beta=0.1, target_rate=0.25)
        assert update_beta(ctrl, 0.5).beta == pytest.approx(7.025, abs=1e-12)

    def test_setpoint_is_fixed_point(self):
        ctrl = BetaController(beta=4.0, eta_beta=0.1, target_rate=0.25)
        assert update_beta(ctrl, 0.25).beta == 4.0

    def test_clipping_at_bounds(self):
        ctrl = BetaController(beta=10.0, eta_beta=0.1, target_rate=0.25, beta_max=10.0)
        assert update_beta(ctrl, 1.0).beta == 10.0
        ctrl = BetaController(beta=0.0, eta_beta=0.1, target_rate=0.25, beta_min=0.0)
        assert update_beta(ctrl, 0.0).beta == 0.0

    def test_zero_stop_batch_decreases_beta_by_gain_times_target(self):
        ctrl = BetaController(beta=7.0, eta_beta=0.1, target_rate=0.25)
        out = update_beta(ctrl, 0.0)
        assert out.beta == pytest.approx(7.0 - 0.1 * 0.25, abs=1e-12)

    def test_direction_matches_rate_error(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            ctrl = BetaController(beta=float(rng.uniform(1, 9)), eta_beta=0.1)
            rate = float(rng.uniform(0, 1))
            new = update_beta(ctrl, rate)
            if new.beta != ctrl.beta:  # unclipped
                assert math.copysign(1, new.beta - ctrl.beta) == math.copysign(
                    1, rate - ctrl.target_rate)

    def test_rate_outside_unit_interval_rejected(self):
        with pytest.raises(ValueError):
            update_beta(BetaController(), 1.5)


class TestWarmupGate:
    def run_trace(self, losses, total_steps=1000):
        gate = WarmupGate()
        release_step = None
        for step, loss in enumerate(losses, start=1):
            gate = warmup_step(gate, loss, step, total_steps)
            if not gate.active and release_step is None:
                release_step = step
        return gate, release_step

    def test_absolute_threshold_exit(self):
        _gate, released = self.run_trace([0.4, 0.4, 0.4])
        assert released == 3

    def test_delta_threshold_exit(self):
        _gate, released = self.run_trace([2.0, 1.95, 1.90, 1.85])
        assert released == 4

    def test_oscillation_hits_unconditional_cap(self):
        losses = [0.0 if i % 2 == 0 else 2.0 for i in range(10)]
        gate = WarmupGate()
        release_step = None
        total = 40  # cap = ceil(0.1 * 40) = 4
        for step, loss in enumerate(losses, start=1):
            gate = warmup_step(gate, loss, step, total)
            if not gate.active and release_step is None:
                release_step = step
        assert release_step == math.ceil(0.10 * total) == 4

    def test_gate_never_rearms(self):
        gate = WarmupGate(active=False, consecutive_hits=0)
        out = warmup_step(gate, 100.0, 1, 1000)
        assert out.active is False

    def test_counter_resets_on_miss(self):
        _gate, released = self.run_trace([0.4, 0.4, 9.0, 0.4, 0.4, 0.4])
        assert released == 6  # the miss at step 3 resets the streak


class TestAnnealBeta:
    def test_starts_at_beta_max(self):
        ctrl = BetaController(beta=7.0, beta_max=10.0)
        assert anneal_beta(ctrl, 0, 30).beta == 10.0

    def test_lands_on_configured_beta(self):
        ctrl = BetaController(beta=7.0, beta_max=10.0)
        assert anneal_beta(ctrl, 30, 30).beta == 7.0

    def test_midpoint_is_arithmetic_mean(self):
        ctrl = BetaController(beta=7.0, beta_max=10.0)
        assert anneal_beta(ctrl, 15, 30).beta == pytest.approx(8.5, abs=1e-12)

    def test_zero_horizon_is_identity(self):
        ctrl = BetaController(beta=3.0, beta_max=10.0)
        assert anneal_beta(ctrl, 0, 0) == ctrl


class TestSetpointTracking:
    def test_rolling_rate_converges_to_target(self):
        # synthetic stationary system: stop probability strictly decreasing
        # in beta; rolling 50-batch rate inside +/-0.05 of 0.25 by update 200
        rng = np.random.default_rng(99)
        ctrl = BetaController(beta=7.0, eta_beta=0.1, target_rate=0.25,
                              beta_min=0.0, beta_max=10.0)
        batch = 64
        rates = []
        for _ in range(300):
            p = 1.0 / (1.0 + math.exp(2.0 * (ctrl.beta - 5.0)))
            stops = rng.binomial(batch, p)
            rate = stops / batch
            rates.append(rate)
            ctrl = update_beta(ctrl, rate)
        rolling = [sum(rates[i - 50:i]) / 50 for i in range(50, 301)]
        hit = next((i + 50 for i, r in enumerate(rolling) if abs(r - 0.25) <= 0.05), None)
        assert hit is not None and hit <= 200
        assert abs(rolling[200 - 50] - 0.25) <= 0.05
