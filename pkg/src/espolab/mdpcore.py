"""Numeric primitives and trajectory records shared by every other module.

Policies are categorical distributions over a small token vocabulary,
represented as unnormalized logit vectors. Everything here is a pure function
over value data; records are treated as immutable once constructed, so they
can be shared freely across rollout workers.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "Counterfactual",
    "StepRecord",
    "StopReason",
    "Trajectory",
    "derived_rng",
    "entropy",
    "log_softmax",
    "sample_token",
    "trajectory_rng",
]

# Stream tags keep training / evaluation / initialization draws on disjoint
# branches of the same master seed.
TRAIN_STREAM = 0
EVAL_STREAM = 1
INIT_STREAM = 2


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    """Convert logits to log-probabilities with max-subtraction stability.

    Works on a single logit vector or row-wise on a 2-D table. Adding a
    constant to all logits leaves the output unchanged (up to float rounding),
    and logit differences are preserved exactly up to rounding, which is what
    makes the regret signal computable from either representation.
    """
    arr = np.asarray(logits, dtype=np.float64)
    if arr.shape[axis] < 2:
        raise ValueError("log_softmax requires a vocabulary of at least 2")
    if not np.all(np.isfinite(arr)):
        raise ValueError("log_softmax requires finite logits")
    shifted = arr - arr.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return shifted - lse


def sample_token(log_probs, rng: np.random.Generator) -> int:
    """Draw a token index from a log-probability vector.

    Deterministic given the generator state: one uniform draw per call.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    cum = np.cumsum(np.exp(lp)).tolist()
    return pick_from_cumulative(cum, rng)


def pick_from_cumulative(cum_probs, rng: np.random.Generator) -> int:
    """Sample an index from an inclusive cumulative-probability list."""
    u = rng.random() * cum_probs[-1]
    idx = bisect.bisect_right(cum_probs, u)
    last = len(cum_probs) - 1
    return last if idx > last else idx


def entropy(log_probs) -> float:
    """Shannon entropy of a log-probability vector, in nats."""
    lp = np.asarray(log_probs, dtype=np.float64)
    p = np.exp(lp)
    nz = p > 0.0
    h = float(-(p[nz] * lp[nz]).sum())
    return 0.0 if h < 0.0 else h


def derived_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (master_seed, key...).

    Streams are keyed, not sequential, so any draw order across workers or
    call sites yields identical results.
    """
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.PCG64(ss))


def trajectory_rng(master_seed: int, batch_index: int, traj_index: int) -> np.random.Generator:
    """Per-trajectory stream keyed by (batch, index): independent of the order
    in which trajectories are collected."""
    return derived_rng(master_seed, TRAIN_STREAM, batch_index, traj_index)


class StopReason(Enum):
    NATURAL_END = "natural_end"
    HORIZON_CAP = "horizon_cap"
    EARLY_STOP = "early_stop"


@dataclass(slots=True)
class StepRecord:
    """One generation step as recorded at collection time.

    Treated as immutable after construction. regret_raw is g_t (always equal
    to log_prob_max - log_prob_sampled), regret_normalized is the clipped
    z-scored value under the frozen batch statistics, and smoothed_score is
    the running statistic z_t after this step's accumulation.
    """

    state_id: int
    action: int
    log_prob_sampled: float
    log_prob_max: float
    value_estimate: float
    reward: float
    regret_raw: float
    regret_normalized: float
    smoothed_score: float


@dataclass(frozen=True, slots=True)
class Counterfactual:
    """Where the stop criterion would have fired, and what the full rollout
    actually earned. Present only on trajectories collected in
    counterfactual-extend mode whose criterion fired."""

    hypothetical_stop_index: int
    hypothetical_outcome_reward: float


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[StepRecord, ...]
    stop_reason: StopReason
    outcome_reward: float
    counterfactual: Counterfactual | None = field(default=None)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def effective_length(self) -> int:
        """Length after applying the simulated truncation point, if any."""
        if self.counterfactual is not None:
            return self.counterfactual.hypothetical_stop_index + 1
        return len(self.steps)

    def check_invariants(self, t_max: int | None = None, tol: float = 1e-12) -> None:
        """Raise AssertionError if any structural invariant is violated.

        Used by tests; not called on the hot path.
        """
        assert self.steps, "trajectory must contain at least one step"
        for rec in self.steps[:-1]:
            assert rec.reward == 0.0, "non-final steps must carry zero reward"
        for rec in self.steps:
            assert rec.regret_raw >= 0.0
            assert rec.log_prob_sampled <= rec.log_prob_max <= 0.0 + tol
            gap = rec.log_prob_max - rec.log_prob_sampled
            assert abs(rec.regret_raw - gap) <= tol
        assert self.steps[-1].reward == self.outcome_reward
        if t_max is not None:
            assert len(self.steps) <= t_max
            if self.stop_reason is StopReason.HORIZON_CAP:
                assert len(self.steps) == t_max
        if self.counterfactual is not None:
            assert 0 <= self.counterfactual.hypothetical_stop_index < len(self.steps)
