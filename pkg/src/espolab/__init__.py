"""espolab: a desk-scale laboratory for regret-gated early termination of PPO
rollouts with absorbing failure transitions, on synthetic token-level MDPs."""

__version__ = "0.1.0"

from .config import RunConfig, build_run_config, config_hash  # noqa: F401
from .mdpcore import (  # noqa: F401
    StepRecord,
    StopReason,
    Trajectory,
    entropy,
    log_softmax,
    sample_token,
)
from .stopper import (  # noqa: F401
    BetaController,
    EmaStats,
    SmoothedScore,
    StopperSnapshot,
    WarmupGate,
)
