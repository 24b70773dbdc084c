"""Regret-gated stopping machinery.

Per-step surrogate regret, frozen-batch EMA normalization, exponential
smoothing, the value-gated stop decision, the proportional stop-rate
controller, and the adaptive critic-warmup gate.

Batch statistics are functional value types: updates return new instances,
and rollout workers only ever see a frozen StopperSnapshot, so no collection
can observe statistics influenced by its own batch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum

__all__ = [
    "BetaController",
    "EmaStats",
    "SmoothedScore",
    "StopDecisionInput",
    "StopRule",
    "StopperSnapshot",
    "StopperState",
    "WarmupGate",
    "accumulate",
    "anneal_beta",
    "normalize_regret",
    "should_stop",
    "step_regret",
    "update_beta",
    "update_ema",
    "warmup_step",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class EmaStats:
    """Running EMA of per-batch regret mean/variance plus the frozen copies
    actually used during generation. Frozen copies change only at batch
    boundaries (update_ema)."""

    mu_g: float = 0.0
    var_g: float = 1.0
    frozen_mu: float = 0.0
    frozen_var: float = 1.0
    stabilizer: float = 1e-8
    clip_bound: float = 5.0
    alpha_ema: float = 0.99


@dataclass(frozen=True, slots=True)
class SmoothedScore:
    """Per-trajectory exponentially smoothed stopping statistic, z_0 = 0."""

    z: float = 0.0
    alpha_s: float = 0.9


@dataclass(frozen=True, slots=True)
class BetaController:
    """Proportional setpoint controller for the stop-threshold multiplier."""

    beta: float = 7.0
    eta_beta: float = 0.1
    target_rate: float = 0.25
    beta_min: float = 0.0
    beta_max: float = 10.0


@dataclass(frozen=True, slots=True)
class WarmupGate:
    """Stopping stays disabled until the critic's loss stabilizes.

    The gate releases when, for required_consecutive steps in a row, either
    |loss| < abs_threshold or |loss - previous loss| < delta_threshold; it
    releases unconditionally once ceil(step_cap_fraction * total_steps)
    training steps have elapsed. Once released it never re-arms.
    """

    active: bool = True
    consecutive_hits: int = 0
    abs_threshold: float = 0.5
    delta_threshold: float = 0.1
    required_consecutive: int = 3
    step_cap_fraction: float = 0.10
    last_loss: float | None = None


class StopRule(Enum):
    ESPO = "espo"              # z > beta * max(V, value_floor)
    VALUE_ONLY = "value_only"  # V < fixed threshold
    REGRET_ONLY = "regret_only"  # z > fixed threshold


@dataclass(frozen=True, slots=True)
class StopDecisionInput:
    z: float
    value_estimate: float
    value_floor: float
    warmup_active: bool


def step_regret(log_probs, sampled: int) -> float:
    """Surrogate regret g = max log-prob minus the sampled token's log-prob.

    Zero exactly when the sampled token is a policy mode; equals the raw
    logit gap because log-softmax preserves differences.
    """
    lp_max = max(float(v) for v in log_probs)
    return lp_max - float(log_probs[sampled])


def normalize_regret(g: float, stats: EmaStats) -> float:
    """Clipped z-score of g under the frozen batch statistics."""
    scaled = (g - stats.frozen_mu) / math.sqrt(stats.frozen_var + stats.stabilizer)
    c = stats.clip_bound
    if scaled > c:
        return c
    if scaled < -c:
        return -c
    return scaled


def accumulate(score: SmoothedScore, g_norm: float) -> SmoothedScore:
    """z' = alpha_s * z + (1 - alpha_s) * g_norm."""
    return SmoothedScore(score.alpha_s * score.z + (1.0 - score.alpha_s) * g_norm,
                         score.alpha_s)


def should_stop(inp: StopDecisionInput, ctrl: BetaController) -> bool:
    """Value-gated stop test; always False while warmup is active.

    Strict inequality: ties continue.
    """
    if inp.warmup_active:
        return False
    return inp.z > ctrl.beta * max(inp.value_estimate, inp.value_floor)


def update_ema(stats: EmaStats, batch_regrets) -> EmaStats:
    """Blend running statistics with one batch's mean/variance and refresh the
    frozen copies for the next batch.

    Variance is the population formula (divide by N). Sums use math.fsum so
    the result is invariant under permutation of the batch. Called exactly
    once per rollout batch; an empty batch leaves stats unchanged.
    """
    values = list(batch_regrets)
    if not values:
        logger.warning("update_ema called with an empty batch; statistics unchanged")
        return stats
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    a = stats.alpha_ema
    mu = a * stats.mu_g + (1.0 - a) * mean
    sigma2 = a * stats.var_g + (1.0 - a) * var
    return replace(stats, mu_g=mu, var_g=sigma2, frozen_mu=mu, frozen_var=sigma2)


def update_beta(ctrl: BetaController, empirical_stop_rate: float) -> BetaController:
    """beta <- clip(beta + eta * (stop_rate - target), beta_min, beta_max)."""
    if not 0.0 <= empirical_stop_rate <= 1.0:
        raise ValueError(f"stop rate {empirical_stop_rate} outside [0, 1]")
    beta = ctrl.beta + ctrl.eta_beta * (empirical_stop_rate - ctrl.target_rate)
    beta = min(max(beta, ctrl.beta_min), ctrl.beta_max)
    return replace(ctrl, beta=beta)


def warmup_step(gate: WarmupGate, critic_loss: float, step: int, total_steps: int) -> WarmupGate:
    """Advance the warmup gate after one training step (1-based step index)."""
    if not gate.active:
        return gate
    hit = abs(critic_loss) < gate.abs_threshold or (
        gate.last_loss is not None
        and abs(critic_loss - gate.last_loss) < gate.delta_threshold)
    hits = gate.consecutive_hits + 1 if hit else 0
    hits = min(hits, gate.required_consecutive)
    cap = math.ceil(gate.step_cap_fraction * total_steps)
    active = hits < gate.required_consecutive and step < cap
    return replace(gate, active=active, consecutive_hits=hits, last_loss=critic_loss)


def anneal_beta(ctrl: BetaController, steps_since_warmup: int, anneal_horizon: int) -> BetaController:
    """Effective controller during the post-warmup anneal.

    beta interpolates linearly from beta_max down to the controller's current
    beta over anneal_horizon steps; at and beyond the horizon the controller
    is returned unchanged (and only then do setpoint updates apply).
    """
    if anneal_horizon <= 0 or steps_since_warmup >= anneal_horizon:
        return ctrl
    frac = steps_since_warmup / anneal_horizon
    beta = ctrl.beta_max + (ctrl.beta - ctrl.beta_max) * frac
    return replace(ctrl, beta=beta)


@dataclass(frozen=True, slots=True)
class StopperSnapshot:
    """Frozen view handed to rollout workers for one batch.

    Carries everything the per-step decision needs: frozen normalization
    statistics, the smoothing constant, the effective (annealed) beta, the
    value floor, warmup status, and which rule variant is in force.
    """

    frozen_mu: float = 0.0
    frozen_var: float = 1.0
    stabilizer: float = 1e-8
    clip_bound: float = 5.0
    alpha_s: float = 0.9
    beta: float = 7.0
    value_floor: float = 0.2
    warmup_active: bool = False
    rule: StopRule = StopRule.ESPO
    rule_threshold: float = 0.0
    snapshot_id: int = 0

    def normalize(self, g: float) -> float:
        scaled = (g - self.frozen_mu) / math.sqrt(self.frozen_var + self.stabilizer)
        c = self.clip_bound
        if scaled > c:
            return c
        if scaled < -c:
            return -c
        return scaled

    def decide(self, z: float, value_estimate: float) -> bool:
        if self.warmup_active:
            return False
        if self.rule is StopRule.VALUE_ONLY:
            return value_estimate < self.rule_threshold
        if self.rule is StopRule.REGRET_ONLY:
            return z > self.rule_threshold
        return z > self.beta * max(value_estimate, self.value_floor)


class StopperState:
    """Mutable batch-boundary side of the machinery.

    Owns the EMA statistics, the controller, the warmup gate, and the anneal
    progress; produces one StopperSnapshot per batch and consumes one
    end_of_batch per training step. All mutation happens in the serialized
    control phase between batches.
    """

    def __init__(self, stats: EmaStats, controller: BetaController, gate: WarmupGate,
                 value_floor: float, alpha_s: float,
                 rule: StopRule = StopRule.ESPO, rule_threshold: float = 0.0,
                 anneal_horizon: int = 0, beta_updates_enabled: bool = True):
        self.stats = stats
        self.controller = controller
        self.gate = gate
        self.value_floor = value_floor
        self.alpha_s = alpha_s
        self.rule = rule
        self.rule_threshold = rule_threshold
        self.anneal_horizon = anneal_horizon
        self.beta_updates_enabled = beta_updates_enabled
        self.steps_since_warmup = 0
        self.snapshot_counter = 0

    @property
    def anneal_complete(self) -> bool:
        return self.steps_since_warmup >= self.anneal_horizon

    def effective_beta(self) -> float:
        return anneal_beta(self.controller, self.steps_since_warmup, self.anneal_horizon).beta

    def snapshot(self) -> StopperSnapshot:
        self.snapshot_counter += 1
        return StopperSnapshot(
            frozen_mu=self.stats.frozen_mu,
            frozen_var=self.stats.frozen_var,
            stabilizer=self.stats.stabilizer,
            clip_bound=self.stats.clip_bound,
            alpha_s=self.alpha_s,
            beta=self.effective_beta(),
            value_floor=self.value_floor,
            warmup_active=self.gate.active,
            rule=self.rule,
            rule_threshold=self.rule_threshold,
            snapshot_id=self.snapshot_counter,
        )

    def end_of_batch(self, batch_regrets, stop_rate: float, critic_loss: float,
                     step: int, total_steps: int) -> None:
        """Serialized batch-boundary update: EMA, warmup gate, anneal progress,
        then (only once annealing has completed) the setpoint controller."""
        self.stats = update_ema(self.stats, batch_regrets)
        was_released = not self.gate.active
        if self.gate.active:
            self.gate = warmup_step(self.gate, critic_loss, step, total_steps)
        if was_released:
            if self.anneal_complete and self.beta_updates_enabled:
                self.controller = update_beta(self.controller, stop_rate)
            self.steps_since_warmup += 1

    def state_dict(self) -> dict:
        return {
            "stats": [self.stats.mu_g, self.stats.var_g, self.stats.frozen_mu,
                      self.stats.frozen_var],
            "beta": self.controller.beta,
            "gate": [self.gate.active, self.gate.consecutive_hits, self.gate.last_loss],
            "steps_since_warmup": self.steps_since_warmup,
            "anneal_horizon": self.anneal_horizon,
            "snapshot_counter": self.snapshot_counter,
        }

    def load_state_dict(self, state: dict) -> None:
        mu, var, fmu, fvar = state["stats"]
        self.stats = replace(self.stats, mu_g=mu, var_g=var, frozen_mu=fmu, frozen_var=fvar)
        self.controller = replace(self.controller, beta=state["beta"])
        active, hits, last_loss = state["gate"]
        self.gate = replace(self.gate, active=active, consecutive_hits=hits, last_loss=last_loss)
        self.steps_since_warmup = state["steps_since_warmup"]
        self.anneal_horizon = state["anneal_horizon"]
        self.snapshot_counter = state["snapshot_counter"]
