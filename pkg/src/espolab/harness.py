"""Experiment orchestration: single runs, the ablation matrix, checkpoint
evaluation, false-positive measurement, and cross-run comparison."""

from __future__ import annotations

import dataclasses
import os
import statistics
import time

from .config import ConfigError, RunConfig, env_signature, require_valid
from .metrics import MetricsWriter, read_manifest, read_metrics, write_manifest
from .policy import load_params
from .rollout import COUNTERFACTUAL, RolloutBatch, evaluate_policy
from .trainer import TrainingRun, env_spec_from_config
from .envs import build_environment
from .variants import variant_config_diff

__all__ = [
    "ComparisonRow",
    "ablate",
    "compare_runs",
    "evaluate_run",
    "false_positive_rate",
    "render_comparison",
    "run_experiment",
    "token_saving_pct",
]

ABLATION_VARIANTS = ("espo", "ppo", "espo_no_warmup", "espo_no_penalty",
                     "value_only", "regret_only", "random_stop")


def false_positive_rate(batch: RolloutBatch) -> float:
    """Share of trajectories whose criterion fired but whose full rollout
    still earned reward 1. Only defined for counterfactual-extend batches."""
    if batch.mode.kind != COUNTERFACTUAL:
        raise ValueError("false_positive_rate requires a counterfactual-extend batch")
    if not batch.size:
        return 0.0
    hits = sum(1 for t in batch.trajectories
               if t.counterfactual is not None
               and t.counterfactual.hypothetical_outcome_reward == 1.0)
    return hits / batch.size


def run_experiment(config: RunConfig, resume_checkpoint=None) -> str:
    """Execute one run, writing metrics.csv, manifest.json, and side files to
    config.out_dir. Fails fast if the output path is unwritable."""
    require_valid(config)
    if not config.out_dir:
        raise ConfigError("run_experiment needs out_dir")
    os.makedirs(config.out_dir, exist_ok=True)
    probe = os.path.join(config.out_dir, ".write_probe")
    try:
        with open(probe, "w") as fh:
            fh.write("ok")
        os.remove(probe)
    except OSError as exc:
        raise ConfigError(f"output path {config.out_dir} is not writable: {exc}") from exc

    started = time.monotonic()
    if resume_checkpoint is not None:
        run = TrainingRun.resume(config, resume_checkpoint)
        writer = MetricsWriter(os.path.join(config.out_dir, "metrics.csv"),
                               resume_at_step=run.step_index)
    else:
        run = TrainingRun(config)
        writer = MetricsWriter(os.path.join(config.out_dir, "metrics.csv"))
    write_manifest(config.out_dir, config, status="running")
    with writer:
        for row in run.run():
            writer.write(row)
    write_manifest(config.out_dir, config, status="complete",
                   wall_time_s=time.monotonic() - started)
    return config.out_dir


def evaluate_run(run_dir, checkpoint: str = "final", episodes: int | None = None,
                 seed: int | None = None) -> dict:
    """Greedy and sampled success rates for a saved checkpoint."""
    manifest = read_manifest(run_dir)
    cfg = RunConfig(**{k: _from_flat(k, v) for k, v in manifest["config"].items()})
    actor, _critic = load_params(os.path.join(run_dir, "checkpoints", checkpoint, "params.txt"))
    env = build_environment(env_spec_from_config(cfg), cfg.state_budget)
    episodes = episodes or cfg.eval_episodes
    seed = cfg.seed if seed is None else seed
    greedy = evaluate_policy(actor, env, cfg.t_max, episodes, seed, 0, greedy=True)
    sampled = evaluate_policy(actor, env, cfg.t_max, episodes, seed, 0, greedy=False)
    return {"checkpoint": checkpoint, "episodes": episodes,
            "greedy_success": greedy, "sampled_success": sampled}


def _from_flat(key: str, raw: str):
    from .config import SCHEMA, _coerce

    if key not in SCHEMA:
        raise ConfigError(f"manifest holds unknown config key {key!r}")
    return _coerce(key, SCHEMA[key][0], raw)


def config_from_manifest(run_dir) -> RunConfig:
    manifest = read_manifest(run_dir)
    return RunConfig(**{k: _from_flat(k, v) for k, v in manifest["config"].items()})


def token_saving_pct(tokens: float, baseline_tokens: float) -> float:
    """Percentage of rollout tokens saved relative to a baseline count."""
    if baseline_tokens <= 0:
        raise ValueError("baseline token count must be positive")
    return 100.0 * (1.0 - tokens / baseline_tokens)


@dataclasses.dataclass(frozen=True)
class ComparisonRow:
    variant: str
    seeds: int
    success_mean: float
    success_std: float
    tokens_mean: float
    tokens_std: float
    saving_pct: float


def _final_success(run_dir) -> float:
    eval_path = os.path.join(run_dir, "eval.csv")
    if os.path.exists(eval_path):
        with open(eval_path, encoding="utf-8") as fh:
            fh.readline()
            last = None
            for line in fh:
                if line.strip():
                    last = line
        if last is not None:
            return float(last.split(",")[1])
    rows = read_metrics(os.path.join(run_dir, "metrics.csv"))
    if not rows:
        raise ValueError(f"{run_dir} has no metrics rows")
    return rows[-1].success_rate


def compare_runs(run_dirs, baseline_variant: str = "ppo") -> list[ComparisonRow]:
    """Aggregate completed runs into a per-variant summary with token savings
    against the designated baseline variant."""
    if len(run_dirs) < 2:
        raise ValueError("compare_runs needs at least two runs")
    groups: dict[str, list[tuple[float, float]]] = {}
    signatures = set()
    for run_dir in run_dirs:
        cfg = config_from_manifest(run_dir)
        signatures.add(env_signature(cfg))
        rows = read_metrics(os.path.join(run_dir, "metrics.csv"))
        if not rows:
            raise ValueError(f"{run_dir} has no metrics rows")
        tokens = float(rows[-1].cumulative_tokens)
        success = _final_success(run_dir)
        groups.setdefault(cfg.variant, []).append((success, tokens))
    if len(signatures) > 1:
        raise ValueError("runs use different environments and cannot be compared")
    if baseline_variant not in groups:
        raise ValueError(f"no runs with baseline variant {baseline_variant!r}")
    baseline_tokens = statistics.fmean(t for _s, t in groups[baseline_variant])

    out = []
    for variant, entries in sorted(groups.items()):
        succ = [s for s, _t in entries]
        toks = [t for _s, t in entries]
        out.append(ComparisonRow(
            variant=variant,
            seeds=len(entries),
            success_mean=statistics.fmean(succ),
            success_std=statistics.pstdev(succ) if len(succ) > 1 else 0.0,
            tokens_mean=statistics.fmean(toks),
            tokens_std=statistics.pstdev(toks) if len(toks) > 1 else 0.0,
            saving_pct=token_saving_pct(statistics.fmean(toks), baseline_tokens),
        ))
    return out


def render_comparison(rows: list[ComparisonRow]) -> str:
    header = (f"{'variant':<18} {'seeds':>5} {'success':>18} "
              f"{'cumulative tokens':>26} {'saving%':>8}")
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row.variant:<18} {row.seeds:>5} "
            f"{row.success_mean:>10.4f}±{row.success_std:<7.4f} "
            f"{row.tokens_mean:>16.2f}±{row.tokens_std:<9.2f} "
            f"{row.saving_pct:>8.2f}")
    return "\n".join(lines)


def ablate(base_config: RunConfig, out_root, variants=ABLATION_VARIANTS) -> dict[str, str]:
    """Run the variant matrix from one base config.

    The full method runs first (recording stop events); calibration-dependent
    variants point at it as their reference. Each run writes to its own
    subdirectory of out_root.
    """
    os.makedirs(out_root, exist_ok=True)
    if "espo" not in variants:
        raise ConfigError("the ablation matrix needs the espo reference run")
    run_dirs: dict[str, str] = {}

    def configured(variant: str, **overrides) -> RunConfig:
        cfg = dataclasses.replace(base_config, variant=variant,
                                  out_dir=os.path.join(out_root, variant), **overrides)
        require_valid(cfg)
        return cfg

    reference = configured("espo", record_stop_events=True)
    run_dirs["espo"] = run_experiment(reference)
    for variant in variants:
        if variant == "espo":
            continue
        overrides = {}
        if variant in ("value_only", "regret_only", "random_stop"):
            overrides["reference_run"] = run_dirs["espo"]
        run_dirs[variant] = run_experiment(configured(variant, **overrides))

    summary = compare_runs(list(run_dirs.values()), baseline_variant="ppo"
                           if "ppo" in run_dirs else "espo")
    with open(os.path.join(out_root, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(render_comparison(summary) + "\n")
    return run_dirs


def check_variant_isolation(variant: str) -> dict:
    """Expose the single-knob config diff for a variant (test/debug helper)."""
    diff = variant_config_diff(variant)
    if variant != "espo" and len(diff) != 1:
        raise AssertionError(f"variant {variant} changes {len(diff)} knobs")
    return diff
