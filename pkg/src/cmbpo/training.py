"""Training orchestration: the model-based loop and the model-free baseline.

Per epoch (model-based mode):
  1. collect real environment steps with the current policy,
  2. retrain the dynamics ensemble on the replay buffer,
  3. probe model disagreement and adapt the real-sample ratio alpha,
  4. generate branched model rollouts under the cumulative-uncertainty gate,
  5. build the alpha-mixed training batch, take one constrained
     trust-region policy step, refit both value functions,
  6. emit one metrics record.

`--algo cpo` collapses this to the classic on-policy constrained update
(steps 2 to 4 skipped, alpha pinned to 1).  Every random draw descends from
the master seed, so identical seeds yield byte-identical metrics files.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .cpo import (
    cpo_step,
    fisher_vector_product,
    gae_advantages,
    line_search,
    normalize_advantages,
    surrogate_grads,
    value_fit,
)
from .dynamics import EnsembleModel, train_ensemble
from .envs import make_env
from .policy import GaussianMlpPolicy, SoftmaxTablePolicy, ValueFunction
from .rollouts import (
    ReplayBuffer,
    TaggedTrajectory,
    TransitionBatch,
    branched_rollouts,
    mix_batches,
)
from .uncertainty import calibrate_budgets, disagreement_batch, update_mixing

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "metrics.csv"

CSV_COLUMNS = [
    "epoch", "env_steps", "mean_return", "mean_episode_cost", "jc_discounted",
    "alpha", "mean_disagreement", "mean_rollout_horizon", "max_rollout_horizon",
    "policy_kl", "cumulative_cost", "case_label",
]


class TrainingError(RuntimeError):
    pass


class Trainer:
    def __init__(self, config: ExperimentConfig, out_dir: str | Path):
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        ss = np.random.SeedSequence(config.seed)
        (env_ss, collect_ss, rollout_ss, probe_ss, mix_ss, value_ss,
         policy_ss, vf_ss, cvf_ss, model_ss) = ss.spawn(10)
        self.env_rng = np.random.default_rng(env_ss)
        self.collect_rng = np.random.default_rng(collect_ss)
        self.rollout_rng = np.random.default_rng(rollout_ss)
        self.probe_rng = np.random.default_rng(probe_ss)
        self.mix_rng = np.random.default_rng(mix_ss)
        self.value_rng = np.random.default_rng(value_ss)

        self.env = make_env(config.env_spec())
        if self.env.kind == "gridworld":
            # judge and estimate costs at the CMDP's own discount
            self.cpo_cfg = config.cpo_config(
                self.env.cost_accounting,
                gamma=config.grid_discount, cost_gamma=config.grid_discount,
            )
        else:
            self.cpo_cfg = config.cpo_config(self.env.cost_accounting)

        if self.env.discrete:
            self.policy = SoftmaxTablePolicy(self.env.state_dim, self.env.n_actions)
            self.model_action_dim = self.env.n_actions
        else:
            self.policy = GaussianMlpPolicy(
                self.env.state_dim, self.env.action_dim, config.policy_hidden,
                np.random.default_rng(policy_ss), init_log_std=config.init_log_std,
            )
            self.model_action_dim = self.env.action_dim
        self.value_fn = ValueFunction(self.env.state_dim, config.value_hidden,
                                      np.random.default_rng(vf_ss),
                                      learn_rate=config.value_learn_rate)
        self.cost_value_fn = ValueFunction(self.env.state_dim, config.value_hidden,
                                           np.random.default_rng(cvf_ss),
                                           learn_rate=config.value_learn_rate)

        self.ensemble: EnsembleModel | None = None
        if config.algo == "cmbpo":
            self.ensemble = EnsembleModel.create(
                self.env.state_dim, self.model_action_dim, config.model_hidden,
                config.ensemble_size, config.ensemble_elites,
                int(np.random.default_rng(model_ss).integers(2**31)),
            )

        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.budget = None
        self.model_retrains = 0
        self.policy_version = 0
        self.env_steps = 0
        self.cumulative_cost = 0.0
        self.ep_costs = deque(maxlen=config.cost_window)
        self.ep_costs_discounted = deque(maxlen=config.cost_window)
        self._metrics_fh = None

    # ------------------------------------------------------------------
    # helpers
    # ------------------------------------------------------------------
    def _action_features(self, actions: np.ndarray) -> np.ndarray:
        """Model-input encoding of actions (one-hot for discrete tasks)."""
        if not self.env.discrete:
            return np.atleast_2d(actions)
        idx = np.asarray(actions, dtype=int).reshape(-1)
        out = np.zeros((len(idx), self.env.n_actions))
        out[np.arange(len(idx)), idx] = 1.0
        return out

    def _sample_actions(self, states: np.ndarray, rng: np.random.Generator):
        return self.policy.sample(states, rng)

    def _collect(self, n_steps: int) -> tuple[list[TaggedTrajectory], dict]:
        episodes = []
        returns, costs = [], []
        steps = 0
        gc = self.cpo_cfg.cost_gamma
        while steps < n_steps:
            state = self.env.reset(self.env_rng)
            traj_s, traj_a, traj_r, traj_c = [], [], [], []
            done = False
            for _ in range(self.env.horizon):
                action = self._sample_actions(state[None, :], self.collect_rng)[0]
                next_state, r, c, done = self.env.step(state, action, self.env_rng)
                traj_s.append(state)
                traj_a.append(action)
                traj_r.append(r)
                traj_c.append(c)
                state = next_state
                steps += 1
                if done:
                    break
            traj = TaggedTrajectory(
                states=np.stack(traj_s),
                actions=np.array(traj_a),
                rewards=np.array(traj_r),
                costs=np.array(traj_c),
                final_state=np.asarray(state),
                terminal=done,
                policy_id=self.policy_version,
                truncation="terminal" if done else "horizon",
            )
            self.buffer.add(traj, self.policy.snapshot())
            episodes.append(traj)
            ep_cost = float(np.sum(traj_c))
            disc = float(np.sum(np.array(traj_c) * gc ** np.arange(len(traj_c))))
            returns.append(float(np.sum(traj_r)))
            costs.append(ep_cost)
            self.ep_costs.append(ep_cost)
            self.ep_costs_discounted.append(disc)
            self.cumulative_cost += ep_cost
        self.env_steps += steps
        stats = {
            "steps": steps,
            "n_episodes": len(episodes),
            "mean_return": float(np.mean(returns)),
            "mean_episode_cost": float(np.mean(costs)),
        }
        return episodes, stats

    def _trajectory_batch(self, trajectories: list[TaggedTrajectory]) -> TransitionBatch | None:
        if not trajectories:
            return None
        parts = []
        for traj in trajectories:
            adv, targets = gae_advantages(traj, self.value_fn,
                                          self.cpo_cfg.gamma, self.cpo_cfg.lam)
            cadv, ctargets = gae_advantages(traj, self.cost_value_fn,
                                            self.cpo_cfg.cost_gamma,
                                            self.cpo_cfg.cost_lam, signal="cost")
            logp = self.policy.log_probs(traj.states, traj.actions)
            parts.append(TransitionBatch(
                states=traj.states,
                actions=np.asarray(traj.actions),
                advantages=adv,
                cost_advantages=cadv,
                log_probs=logp,
                value_targets=targets,
                cost_value_targets=ctargets,
            ))
        return TransitionBatch.concatenate(parts)

    def _train_model(self) -> dict:
        states, actions, next_states, rewards, _ = self.buffer.transition_arrays()
        metrics = train_ensemble(
            self.ensemble, states, self._action_features(actions),
            next_states, rewards, self.config.model_train_config(),
        )
        self.model_retrains += 1
        every = self.config.recalibrate_every
        if self.budget is not None and every > 0 and self.model_retrains % every == 0:
            alpha = self.budget.alpha
            self._calibrate()
            self.budget.alpha = alpha
        return metrics

    def _calibrate(self) -> None:
        states, actions, *_ = self.buffer.transition_arrays()

        def act(batch_states, rng):
            return self._action_features(self._sample_actions(batch_states, rng))

        self.budget = calibrate_budgets(
            self.ensemble, states, self._action_features(actions), act,
            self.config.alpha0, self.config.h0, self.probe_rng,
            beta=self.config.beta,
            n_rollouts=self.config.dh_calib_rollouts,
            average_rollouts=self.config.dh_average_rollouts,
            alpha_floor=self.config.alpha_floor,
            max_horizon=self.config.max_rollout_horizon,
            elites_only_disagreement=self.config.disagreement_elites_only,
            snap=self.env.snap,
        )

    def _model_rollouts(self, n_rollouts: int, rng) -> list[TaggedTrajectory]:
        return branched_rollouts(
            self.ensemble, self.policy, self.buffer, self.budget,
            self.env.cost_fn, self.env.term_fn, n_rollouts, rng,
            policy_id=self.policy_version, snap=self.env.snap,
            action_encoder=self._action_features,
        )

    def _probe_disagreement(self) -> float:
        probes = self._model_rollouts(self.config.probe_rollouts, self.probe_rng)
        values = np.concatenate([p.uncertainties for p in probes]) if probes else np.array([])
        if values.size:
            return float(values.mean())
        states, _, *_ = self.buffer.transition_arrays()
        idx = self.probe_rng.integers(len(states), size=min(len(states), 256))
        acts = self._action_features(self._sample_actions(states[idx], self.probe_rng))
        d = disagreement_batch(self.ensemble, states[idx], acts,
                               elites_only=self.budget.elites_only_disagreement)
        return float(d.mean())

    def _jc_estimate(self) -> tuple[float, float]:
        """(estimate used for the constraint, discounted estimate for logs)."""
        disc = float(np.mean(self.ep_costs_discounted)) if self.ep_costs_discounted else 0.0
        if self.env.cost_accounting == "episode":
            used = float(np.mean(self.ep_costs)) if self.ep_costs else disc
        else:
            used = disc
        return used, disc

    def _update_policy(self, batch: TransitionBatch, jc_estimate: float) -> dict:
        adv = normalize_advantages(batch.advantages)
        actions = batch.actions
        g, b, c_slack = surrogate_grads(
            self.policy, batch.states, actions, adv, batch.cost_advantages,
            jc_estimate, self.cpo_cfg,
        )

        def apply_h(v):
            return fisher_vector_product(self.policy, batch.states, v,
                                         damping=self.cpo_cfg.cg_damping)

        direction, case_label = cpo_step(g, b, c_slack, apply_h, self.cpo_cfg)
        bx = float(b @ direction)
        result = line_search(
            self.policy, direction, batch.states, actions, adv,
            batch.cost_advantages, batch.log_probs, c_slack, case_label,
            self.cpo_cfg,
        )
        if result.accepted and result.measured_kl > 1.05 * self.cpo_cfg.target_kl:
            raise TrainingError("accepted update violates the trust region")
        if case_label == "recovery" and np.any(direction != 0.0) and bx >= 0.0:
            raise TrainingError("recovery direction fails to decrease the cost surrogate")
        if result.accepted and np.any(direction != 0.0):
            self.policy_version += 1

        vloss = value_fit(self.value_fn, batch.states, batch.value_targets,
                          self.cpo_cfg, self.value_rng)
        cvloss = value_fit(self.cost_value_fn, batch.states, batch.cost_value_targets,
                           self.cpo_cfg, self.value_rng)
        return {
            "case_label": case_label,
            "accepted": bool(result.accepted),
            "backtracks": int(result.backtracks),
            "policy_kl": float(result.measured_kl),
            "surrogate_improvement": float(result.surrogate_improvement),
            "cost_surrogate_change": float(result.cost_surrogate_change),
            "c_slack": float(c_slack),
            "b_dot_x": bx,
            "value_loss": float(vloss[-1]),
            "cost_value_loss": float(cvloss[-1]),
        }

    # ------------------------------------------------------------------
    # run
    # ------------------------------------------------------------------
    def _emit(self, record: dict) -> None:
        self._metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._metrics_fh.flush()

    def _checkpoint(self, epoch: int) -> None:
        path = self.out_dir / f"checkpoint_{epoch:05d}.npz"
        np.savez(
            path,
            epoch=epoch,
            policy=self.policy.get_flat(),
            value=self.value_fn.net.get_flat(),
            cost_value=self.cost_value_fn.net.get_flat(),
        )
        if self.ensemble is not None and self.ensemble.trained:
            from .dynamics import save_ensemble
            save_ensemble(self.ensemble, str(self.out_dir / f"ensemble_{epoch:05d}.npz"))

    def run(self) -> Path:
        cfg = self.config
        with open(self.out_dir / METRICS_FILE, "w") as fh:
            self._metrics_fh = fh
            self._emit({"type": "header", "algo": cfg.algo, "env": cfg.env,
                        "seed": cfg.seed, "cost_limit": cfg.cost_limit,
                        "epochs": cfg.epochs,
                        "real_steps_per_epoch": cfg.real_steps_per_epoch})
            self._checkpoint(0)
            model_based = cfg.algo == "cmbpo"

            if model_based and cfg.epochs > 0:
                self._collect(cfg.init_steps)
                self._train_model()
                self._calibrate()

            for epoch in range(1, cfg.epochs + 1):
                _, stats = self._collect(cfg.real_steps_per_epoch)
                real_trajs = [t for t in self.buffer.trajectories
                              if t.policy_id == self.policy_version]

                alpha = 1.0
                d_bar = 0.0
                model_trajs: list[TaggedTrajectory] = []
                if model_based:
                    if (epoch - 1) % cfg.model_train_every == 0:
                        self._train_model()
                    d_bar = self._probe_disagreement()
                    alpha = update_mixing(d_bar, self.budget)
                    if (1.0 - alpha) * d_bar > self.budget.d_m:
                        raise TrainingError("mixing constraint violated")
                    model_trajs = self._model_rollouts(cfg.model_rollouts_per_epoch,
                                                       self.rollout_rng)
                    for traj in model_trajs:
                        if float(np.sum(traj.uncertainties)) > self.budget.d_h + 1e-12:
                            raise TrainingError("rollout exceeded the uncertainty budget")

                real_batch = self._trajectory_batch(real_trajs)
                model_batch = self._trajectory_batch(model_trajs)
                batch = mix_batches(real_batch, model_batch, alpha,
                                    cfg.policy_batch_size, self.mix_rng)
                jc_used, jc_disc = self._jc_estimate()
                update = self._update_policy(batch, jc_used)

                horizons = [len(t) for t in model_trajs]
                causes = sorted({t.truncation for t in model_trajs})
                record = {
                    "type": "epoch",
                    "epoch": epoch,
                    "env_steps": self.env_steps,
                    "n_episodes": stats["n_episodes"],
                    "mean_return": stats["mean_return"],
                    "mean_episode_cost": stats["mean_episode_cost"],
                    "jc_discounted": jc_disc,
                    "jc_estimate": jc_used,
                    "alpha": float(alpha),
                    "mean_disagreement": float(d_bar),
                    "d_m": float(self.budget.d_m) if self.budget else 0.0,
                    "d_h": float(self.budget.d_h) if self.budget else 0.0,
                    "n_model_trajectories": len(model_trajs),
                    "n_model_steps": int(np.sum(horizons)) if horizons else 0,
                    "mean_rollout_horizon": float(np.mean(horizons)) if horizons else 0.0,
                    "max_rollout_horizon": int(np.max(horizons)) if horizons else 0,
                    "max_cumulative_uncertainty": float(max(
                        (np.sum(t.uncertainties) for t in model_trajs), default=0.0)),
                    "truncation_causes": {c: sum(t.truncation == c for t in model_trajs)
                                          for c in causes},
                    "cumulative_cost": float(self.cumulative_cost),
                    **update,
                }
                self._emit(record)
                if epoch % cfg.checkpoint_every == 0:
                    self._checkpoint(epoch)

            self._checkpoint(cfg.epochs)
        self._metrics_fh = None
        self._write_csv()
        config_path = self.out_dir / "config.txt"
        config_path.write_text(cfg.to_text())
        return self.out_dir

    def _write_csv(self) -> None:
        rows = []
        with open(self.out_dir / METRICS_FILE) as fh:
            for line in fh:
                rec = json.loads(line)
                if rec.get("type") == "epoch":
                    rows.append([rec.get(col, "") for col in CSV_COLUMNS])
        with open(self.out_dir / SUMMARY_FILE, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            writer.writerows(rows)


def train(config: ExperimentConfig, out_dir: str | Path) -> Path:
    """Run one experiment; returns the run directory."""
    return Trainer(config, out_dir).run()
