import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cmbpo.cli import main
from cmbpo.config import ConfigError, ExperimentConfig, load_config
from cmbpo.report import summarize_runs
from cmbpo.training import train
from cmbpo.verify import run_verification

TINY_GRID = """
# desk test config
env = gridworld
grid_size = 4
cost_limit = 1.0
episode_horizon = 40
grid_discount = 0.9
algo = cpo
epochs = 2
real_steps_per_epoch = 150
policy_batch_size = 300
value_batch_size = 128
value_train_repeats = 4
buffer_capacity = 100
seed = 7
"""


class TestConfig:
    def test_defaults_mirror_reference_settings(self):
        cfg = ExperimentConfig()
        assert cfg.ensemble_size == 7
        assert cfg.ensemble_elites == 5
        assert cfg.target_kl == 0.01
        assert cfg.h0 == 5
        assert cfg.beta == 2.0
        assert cfg.alpha0 == 0.4
        assert cfg.gamma == 0.99 and cfg.cost_gamma == 0.97
        assert cfg.lam == 0.95 and cfg.cost_lam == 0.5
        assert cfg.cg_iters == 10 and cfg.cg_damping == 0.1
        assert cfg.backtrack_steps == 10
        assert cfg.value_learn_rate == 3e-4
        assert cfg.model_learn_rate == 1e-3
        assert cfg.model_batch_size == 2048

    def test_file_parsing(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text(TINY_GRID + "policy_hidden = 16,16\n")
        cfg = load_config(str(path))
        assert cfg.env == "gridworld"
        assert cfg.grid_size == 4
        assert cfg.policy_hidden == (16, 16)
        assert cfg.seed == 7

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("nonsense = 1\n")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_env_var_override(self, tmp_path, monkeypatch):
        path = tmp_path / "cfg.txt"
        path.write_text("seed = 1\n")
        monkeypatch.setenv("CMBPO_SEED", "99")
        monkeypatch.setenv("CMBPO_TARGET_KL", "0.25")
        cfg = load_config(str(path))
        assert cfg.seed == 99
        assert cfg.target_kl == 0.25

    def test_override_dict_last(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CMBPO_SEED", "99")
        cfg = load_config(None, {"seed": 5})
        assert cfg.seed == 5

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(algo="sac")
        with pytest.raises(ConfigError):
            ExperimentConfig(alpha0=1.5)

    def test_cost_slack_scale_modes(self):
        cfg = ExperimentConfig(episode_horizon=200, cost_gamma=0.97)
        episode = cfg.cpo_config("episode")
        discounted = cfg.cpo_config("discounted")
        assert episode.cost_slack_scale == pytest.approx(1.0 / (200 * 0.03))
        assert discounted.cost_slack_scale == 1.0

    def test_round_trip_text(self, tmp_path):
        cfg = ExperimentConfig(seed=3, policy_hidden=(8, 4))
        path = tmp_path / "echo.txt"
        path.write_text(cfg.to_text())
        assert load_config(str(path)) == cfg


class TestTrainCli:
    def test_epochs_zero_header_only(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(TINY_GRID.replace("epochs = 2", "epochs = 0"))
        rc = main(["train", "--config", str(cfg_path), "--out",
                   str(tmp_path / "run")])
        assert rc == 0
        lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["type"] == "header"
        csv_lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert len(csv_lines) == 1  # header row only
        assert (tmp_path / "run" / "checkpoint_00000.npz").exists()

    def test_identical_seeds_identical_metrics(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(TINY_GRID)
        main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
        main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "b")])
        assert ((tmp_path / "a" / "metrics.jsonl").read_bytes()
                == (tmp_path / "b" / "metrics.jsonl").read_bytes())

    def test_seed_and_algo_flags(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(TINY_GRID)
        main(["train", "--config", str(cfg_path), "--seed", "3",
              "--algo", "cpo", "--out", str(tmp_path / "c")])
        header = json.loads(
            (tmp_path / "c" / "metrics.jsonl").read_text().splitlines()[0])
        assert header["seed"] == 3
        assert header["algo"] == "cpo"

    def test_console_entry_point(self, tmp_path):
        res = subprocess.run(
            [sys.executable, "-m", "cmbpo.cli", "verify", "--suite", "identity",
             "--trials", "2", "--seed", "0"],
            capture_output=True, text=True,
        )
        assert res.returncode == 0
        assert json.loads(res.stdout)["violations"] == 0


class TestVerifyCli:
    def test_single_trial_deterministic(self, tmp_path):
        s1 = run_verification("boundary", 1, 42, tmp_path / "v1")
        s2 = run_verification("boundary", 1, 42, tmp_path / "v2")
        r1 = (tmp_path / "v1" / "verify_boundary.jsonl").read_text()
        r2 = (tmp_path / "v2" / "verify_boundary.jsonl").read_text()
        assert r1 == r2
        assert s1["violations"] == s2["violations"] == 0

    def test_all_suite_small(self, tmp_path):
        summary = run_verification("all", 25, 0, tmp_path)
        assert summary["violations"] == 0
        assert summary["min_slack"] is not None
        assert (tmp_path / "verify_all_summary.json").exists()

    def test_equal_policy_mode_slacks_vanish(self):
        summary = run_verification("boundary", 20, 1, None, equal_policies=True)
        assert summary["violations"] == 0
        assert abs(summary["min_slack"]) < 1e-10

    def test_exit_codes(self):
        assert main(["verify", "--suite", "lemma", "--trials", "3",
                     "--seed", "2"]) == 0
        with pytest.raises(ValueError):
            run_verification("nope", 1, 0)


class TestReportCli:
    def _tiny_run(self, tmp_path, name, algo, seed, epochs=2):
        cfg = ExperimentConfig(
            env="gridworld", grid_size=4, cost_limit=1.0, episode_horizon=40,
            grid_discount=0.9, algo=algo, epochs=epochs,
            real_steps_per_epoch=120, policy_batch_size=240,
            value_batch_size=128, value_train_repeats=2,
            init_steps=300, model_batch_size=64, model_train_epochs=3,
            ensemble_size=2, ensemble_elites=1, model_hidden=(16,),
            model_rollouts_per_epoch=40, probe_rollouts=10,
            max_rollout_horizon=5, buffer_capacity=100, seed=seed,
        )
        out = tmp_path / name
        train(cfg, out)
        return out

    def test_empty_run_table(self, tmp_path):
        run = self._tiny_run(tmp_path, "empty", "cpo", 0, epochs=0)
        csv_text = summarize_runs([run])
        lines = csv_text.strip().splitlines()
        assert len(lines) == 2  # header + one run row
        assert "not_reached" not in lines[0]

    def test_ratio_row_for_algo_pair(self, tmp_path):
        a = self._tiny_run(tmp_path, "r1", "cmbpo", 0)
        b = self._tiny_run(tmp_path, "r2", "cpo", 0)
        csv_text = summarize_runs([a, b])
        assert "ratio cmbpo/cpo" in csv_text

    def test_unreachable_threshold_sentinel(self, tmp_path):
        run = self._tiny_run(tmp_path, "r3", "cpo", 1)
        csv_text = summarize_runs([run], thresholds=[1e9])
        assert "not_reached" in csv_text

    def test_cli_report_prints(self, tmp_path, capsys):
        run = self._tiny_run(tmp_path, "r4", "cpo", 2)
        rc = main(["report", str(run)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "final_return" in out
