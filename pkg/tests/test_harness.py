"""Harness surface: dispatch, FP measurement, metrics files, compare, CLI."""

from __future__ import annotations

import dataclasses
import os

import pytest

from espolab.cli import main as cli_main
from espolab.config import ConfigError, RunConfig, config_hash
from espolab.harness import (
    ablate,
    check_variant_isolation,
    compare_runs,
    evaluate_run,
    false_positive_rate,
    render_comparison,
    run_experiment,
    token_saving_pct,
)
from espolab.mdpcore import Counterfactual, StopReason
from espolab.metrics import (
    MetricsRow,
    MetricsWriter,
    read_manifest,
    read_metrics,
    write_manifest,
)
from espolab.rollout import CollectionMode, RolloutBatch
from espolab.variants import variant_config_diff, variant_dispatch

from conftest import plain_snapshot
from test_rollout import make_traj


def tiny_config(**overrides):
    defaults = dict(variant="espo", vocab_size=4, target_length=3, t_max=12,
                    batch_size=8, total_steps=10, seed=3, actor_init_scale=1.0,
                    beta_init=1.0, beta_max=2.0, eta_beta=0.1)
    defaults.update(overrides)
    return RunConfig(**defaults)


class TestVariantDispatch:
    def test_unknown_variant_rejected(self):
        cfg = dataclasses.replace(RunConfig(), variant="mystery")
        with pytest.raises(ConfigError):
            variant_dispatch(cfg)

    def test_each_ablation_changes_exactly_one_knob(self):
        assert check_variant_isolation("espo") == {}
        for variant in ("ppo", "espo_no_warmup", "espo_no_penalty",
                        "value_only", "regret_only", "random_stop"):
            assert len(check_variant_isolation(variant)) == 1
            assert len(variant_config_diff(variant)) == 1

    def test_no_penalty_keeps_truncation_but_zeroes_reward(self):
        cfg = tiny_config(variant="espo_no_penalty", total_steps=6)
        from espolab.trainer import TrainingRun

        run = TrainingRun(cfg)
        saw_stop = False
        for _ in range(6):
            run.step()
            for traj in run.last_batch.trajectories:
                if traj.stop_reason is StopReason.EARLY_STOP:
                    saw_stop = True
                    assert traj.outcome_reward == 0.0
                    assert traj.steps[-1].reward == 0.0
        assert saw_stop

    def test_value_only_and_regret_only_rules(self):
        from espolab.stopper import StopRule

        plan_d = variant_dispatch(tiny_config(variant="value_only",
                                              value_stop_threshold=0.25))
        assert plan_d.rule is StopRule.VALUE_ONLY and plan_d.rule_threshold == 0.25
        assert plan_d.beta_updates_enabled is False
        plan_e = variant_dispatch(tiny_config(variant="regret_only",
                                              regret_stop_threshold=0.5))
        assert plan_e.rule is StopRule.REGRET_ONLY and plan_e.rule_threshold == 0.5


class TestFalsePositiveRate:
    def build_batch(self, fired_correct=1, fired_wrong=2, plain=5):
        trajs = []
        for _ in range(fired_correct):
            trajs.append(make_traj(8, outcome=1.0, counterfactual=Counterfactual(3, 1.0)))
        for _ in range(fired_wrong):
            trajs.append(make_traj(8, outcome=0.0, counterfactual=Counterfactual(2, 0.0)))
        for _ in range(plain):
            trajs.append(make_traj(6))
        return RolloutBatch(tuple(trajs), plain_snapshot(),
                            CollectionMode.counterfactual_extend(),
                            0, fired_correct + fired_wrong,
                            sum(len(t.steps) for t in trajs))

    def test_counting_example(self):
        assert false_positive_rate(self.build_batch()) == 0.125

    def test_no_triggers_means_zero(self):
        batch = self.build_batch(fired_correct=0, fired_wrong=0, plain=8)
        assert false_positive_rate(batch) == 0.0

    def test_mode_mismatch_errors(self):
        batch = RolloutBatch((make_traj(3),), plain_snapshot(),
                             CollectionMode.standard(), 0, 0, 3)
        with pytest.raises(ValueError, match="counterfactual"):
            false_positive_rate(batch)


class TestMetricsFiles:
    def test_run_writes_rows_manifest_and_final_checkpoint(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path / "run"))
        out = run_experiment(cfg)
        rows = read_metrics(os.path.join(out, "metrics.csv"))
        assert len(rows) == cfg.total_steps
        manifest = read_manifest(out)
        assert manifest["config_hash"] == config_hash(cfg)
        assert manifest["status"] == "complete"
        assert manifest["wall_time_s"] is not None
        assert os.path.exists(os.path.join(out, "checkpoints", "final", "params.txt"))
        assert os.path.exists(os.path.join(out, "eval.csv"))
        for a, b in zip(rows, rows[1:]):
            assert b.cumulative_tokens >= a.cumulative_tokens

    def test_byte_identical_reruns(self, tmp_path):
        cfg_a = tiny_config(out_dir=str(tmp_path / "a"))
        cfg_b = tiny_config(out_dir=str(tmp_path / "b"))
        run_experiment(cfg_a)
        run_experiment(cfg_b)
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b

    def test_rows_round_trip_through_csv(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path / "run"))
        from espolab.trainer import train_run

        rows = list(train_run(dataclasses.replace(cfg, out_dir="")))
        path = tmp_path / "metrics.csv"
        with MetricsWriter(path) as writer:
            for row in rows:
                writer.write(row)
        assert read_metrics(path) == rows

    def test_writer_resume_guards_row_count(self, tmp_path):
        path = tmp_path / "metrics.csv"
        with MetricsWriter(path) as writer:
            writer.write(MetricsRow(1, 10, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0,
                                    7.0, 0.0, 1.0, 0.0, 0.0, True))
        with pytest.raises(ValueError, match="resume"):
            MetricsWriter(path, resume_at_step=5)

    def test_unwritable_out_dir_fails_fast(self):
        cfg = tiny_config(out_dir="/proc/definitely/not/writable")
        with pytest.raises((ConfigError, OSError)):
            run_experiment(cfg)

    def test_stop_events_and_dumps_written(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path / "run"), record_stop_events=True,
                          dump_trajectories=True, total_steps=6)
        out = run_experiment(cfg)
        events = (tmp_path / "run" / "stop_events.tsv").read_text().splitlines()
        assert events[0].startswith("step\t")
        assert len(events) > 1
        assert (tmp_path / "run" / "trajectories.tsv").exists()


class TestCompareRuns:
    def synthetic_run(self, path, variant, tokens, success, seed=0):
        """Minimal on-disk run: manifest + two metrics rows."""
        os.makedirs(path, exist_ok=True)
        cfg = RunConfig(variant=variant, seed=seed)
        write_manifest(path, cfg, status="complete", wall_time_s=1.0)
        with MetricsWriter(os.path.join(path, "metrics.csv")) as writer:
            writer.write(MetricsRow(1, tokens // 2, 1.0, 1.0, 0.0, 0.0, 1.0,
                                    success / 2, 7.0, 0.0, 1.0, 0.0, 0.0, False))
            writer.write(MetricsRow(2, tokens, 1.0, 1.0, 0.0, 0.0, 1.0,
                                    success, 7.0, 0.0, 1.0, 0.0, 0.0, False))
        return path

    def test_published_token_counts_reproduce_reported_saving(self, tmp_path):
        a = self.synthetic_run(str(tmp_path / "espo"), "espo", 839_240_000, 0.46)
        b = self.synthetic_run(str(tmp_path / "ppo"), "ppo", 1_072_400_000, 0.45)
        rows = compare_runs([a, b], baseline_variant="ppo")
        espo_row = next(r for r in rows if r.variant == "espo")
        assert abs(espo_row.saving_pct - 21.7) <= 0.1

    def test_identical_runs_compare_to_zero(self, tmp_path):
        a = self.synthetic_run(str(tmp_path / "x"), "ppo", 1000, 0.5, seed=0)
        b = self.synthetic_run(str(tmp_path / "y"), "espo", 1000, 0.5, seed=0)
        rows = compare_runs([a, b], baseline_variant="ppo")
        for row in rows:
            assert row.saving_pct == 0.0
        assert rows[0].success_mean == rows[1].success_mean

    def test_seed_aggregation_matches_direct_statistics(self, tmp_path):
        import statistics

        tokens = [1000, 1100, 900, 1050, 950]
        succ = [0.5, 0.6, 0.4, 0.55, 0.45]
        dirs = [self.synthetic_run(str(tmp_path / f"e{i}"), "espo", t, s, seed=i)
                for i, (t, s) in enumerate(zip(tokens, succ))]
        dirs.append(self.synthetic_run(str(tmp_path / "base"), "ppo", 2000, 0.3))
        rows = compare_runs(dirs, baseline_variant="ppo")
        espo_row = next(r for r in rows if r.variant == "espo")
        assert espo_row.seeds == 5
        assert espo_row.success_mean == pytest.approx(statistics.fmean(succ))
        assert espo_row.success_std == pytest.approx(statistics.pstdev(succ))
        assert espo_row.tokens_std == pytest.approx(statistics.pstdev(tokens))

    def test_mismatched_environments_rejected(self, tmp_path):
        a = self.synthetic_run(str(tmp_path / "a"), "ppo", 1000, 0.5)
        b = str(tmp_path / "b")
        os.makedirs(b)
        write_manifest(b, RunConfig(variant="espo", vocab_size=5), status="complete")
        with MetricsWriter(os.path.join(b, "metrics.csv")) as writer:
            writer.write(MetricsRow(1, 10, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0,
                                    7.0, 0.0, 1.0, 0.0, 0.0, False))
        with pytest.raises(ValueError, match="environments"):
            compare_runs([a, b])

    def test_token_saving_pct(self):
        assert token_saving_pct(839.24, 1072.40) == pytest.approx(21.7419, abs=1e-3)
        with pytest.raises(ValueError):
            token_saving_pct(1.0, 0.0)

    def test_render_has_one_line_per_variant(self, tmp_path):
        a = self.synthetic_run(str(tmp_path / "a"), "ppo", 1000, 0.5)
        b = self.synthetic_run(str(tmp_path / "b"), "espo", 800, 0.5)
        text = render_comparison(compare_runs([a, b]))
        assert "espo" in text and "ppo" in text
        assert "20.00" in text  # (1 - 800/1000) * 100


class TestAblateAndEval:
    def test_full_matrix_smoke(self, tmp_path):
        base = tiny_config(total_steps=8, record_stop_events=False)
        dirs = ablate(base, str(tmp_path / "matrix"))
        assert set(dirs) == {"espo", "ppo", "espo_no_warmup", "espo_no_penalty",
                             "value_only", "regret_only", "random_stop"}
        for d in dirs.values():
            assert len(read_metrics(os.path.join(d, "metrics.csv"))) == 8
        assert (tmp_path / "matrix" / "summary.txt").exists()
        # calibration consumed the espo reference
        ref_events = os.path.join(dirs["espo"], "stop_events.tsv")
        assert os.path.exists(ref_events)

    def test_evaluate_run_reports_rates(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path / "run"), eval_episodes=64)
        out = run_experiment(cfg)
        report = evaluate_run(out, episodes=32)
        assert set(report) == {"checkpoint", "episodes", "greedy_success",
                               "sampled_success"}
        assert 0.0 <= report["greedy_success"] <= 1.0
        assert 0.0 <= report["sampled_success"] <= 1.0


class TestCli:
    def test_train_eval_compare_round_trip(self, tmp_path, capsys):
        run_a = str(tmp_path / "a")
        run_b = str(tmp_path / "b")
        argv = ["train", "--variant", "ppo", "--vocab-size", "4",
                "--target-length", "3", "--t-max", "12", "--batch-size", "8",
                "--total-steps", "6", "--eval-episodes", "16"]
        assert cli_main(argv + ["--seed", "1", "--out-dir", run_a]) == 0
        assert cli_main(argv + ["--seed", "2", "--out-dir", run_b]) == 0
        assert cli_main(["eval", run_a, "--episodes", "8"]) == 0
        assert cli_main(["compare", run_a, run_b, "--baseline", "ppo"]) == 0
        out = capsys.readouterr().out
        assert "ppo" in out

    def test_config_file_and_env_precedence(self, tmp_path, monkeypatch, capsys):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("variant = ppo\nvocab_size = 4\ntarget_length = 3\n"
                            "t_max = 10\nbatch_size = 4\ntotal_steps = 3\n"
                            "eval_episodes = 8\n")
        monkeypatch.setenv("ESPOLAB_TOTAL_STEPS", "99")  # file wins over env
        out_dir = str(tmp_path / "run")
        assert cli_main(["train", "--config", str(cfg_file),
                         "--out-dir", out_dir]) == 0
        rows = read_metrics(os.path.join(out_dir, "metrics.csv"))
        assert len(rows) == 3

    def test_invalid_config_is_a_clean_error(self, tmp_path, capsys):
        rc = cli_main(["train", "--variant", "bogus",
                       "--out-dir", str(tmp_path / "x")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_resume_appends_identical_rows(self, tmp_path):
        import shutil

        out = str(tmp_path / "run")
        argv = ["train", "--variant", "espo", "--vocab-size", "4",
                "--target-length", "3", "--t-max", "12", "--batch-size", "8",
                "--total-steps", "10", "--seed", "3", "--actor-init-scale", "1.0",
                "--beta-init", "1.0", "--beta-max", "2.0", "--eval-episodes", "8",
                "--checkpoint-every", "5", "--out-dir", out]
        assert cli_main(argv) == 0
        full = (tmp_path / "run" / "metrics.csv").read_bytes()

        # simulate an interruption after step 5: keep the mid-run checkpoint
        # and the first five metrics rows, then resume with the same config
        resumed = str(tmp_path / "resumed")
        shutil.copytree(out, resumed)
        lines = (tmp_path / "resumed" / "metrics.csv").read_text().splitlines(True)
        (tmp_path / "resumed" / "metrics.csv").write_text("".join(lines[:6]))
        argv2 = [a if a != out else resumed for a in argv]
        assert cli_main([*argv2, "--resume",
                         os.path.join(resumed, "checkpoints", "step_000005")]) == 0
        assert (tmp_path / "resumed" / "metrics.csv").read_bytes() == full
