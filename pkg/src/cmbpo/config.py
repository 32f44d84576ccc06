"""Experiment configuration: flat key=value files with env-var overrides.

Config files are plain text, one `key = value` per line, '#' comments.
Tuples are comma-separated (`policy_hidden = 64,64`).  Any key can be
overridden through the environment as CMBPO_<KEY_IN_UPPERCASE>.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .cpo import CpoConfig
from .dynamics import ModelTrainConfig
from .envs import EnvSpec

ENV_PREFIX = "CMBPO_"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # environment
    env: str = "point_circle"
    episode_horizon: int = 400
    cost_limit: float = 10.0
    grid_size: int = 5
    slip_prob: float = 0.1
    grid_discount: float = 0.95
    circle_radius: float = 1.0
    corridor_half_width: float = 0.6
    accel_limit: float = 1.0
    speed_limit: float = 2.0
    dt: float = 0.1
    control_cost: float = 0.5
    start_noise: float = 0.01
    # ensemble
    ensemble_size: int = 7
    ensemble_elites: int = 5
    model_hidden: tuple[int, ...] = (64, 64)
    model_learn_rate: float = 1e-3
    model_batch_size: int = 2048
    model_train_epochs: int = 100
    model_holdout_fraction: float = 0.1
    model_patience: int = 5
    model_train_every: int = 1
    # uncertainty budgets
    alpha0: float = 0.4
    h0: int = 5
    beta: float = 2.0
    alpha_floor: float = 0.05
    max_rollout_horizon: int = 100
    dh_average_rollouts: bool = True
    dh_calib_rollouts: int = 64
    disagreement_elites_only: bool = False
    # 0: calibrate budgets once on the initial model (paper-style);
    # k > 0: re-anchor d_m/d_h to current in-distribution disagreement
    # after every k-th model retrain
    recalibrate_every: int = 0
    # policy optimization
    target_kl: float = 0.01
    gamma: float = 0.99
    cost_gamma: float = 0.97
    lam: float = 0.95
    cost_lam: float = 0.5
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_steps: int = 10
    backtrack_coeff: float = 0.8
    policy_hidden: tuple[int, ...] = (64, 64)
    value_hidden: tuple[int, ...] = (64, 64)
    value_learn_rate: float = 3e-4
    value_batch_size: int = 2048
    value_train_repeats: int = 8
    init_log_std: float = -0.5
    # training loop
    algo: str = "cmbpo"
    epochs: int = 100
    real_steps_per_epoch: int = 4000
    model_rollouts_per_epoch: int = 400
    probe_rollouts: int = 64
    policy_batch_size: int = 4000
    buffer_capacity: int = 100
    init_steps: int = 4000
    cost_window: int = 10
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        counts = (
            self.episode_horizon, self.ensemble_size, self.ensemble_elites,
            self.epochs + 1, self.real_steps_per_epoch, self.policy_batch_size,
            self.buffer_capacity, self.init_steps, self.model_rollouts_per_epoch,
        )
        if any(c <= 0 for c in counts):
            raise ConfigError("all count parameters must be positive")
        if self.algo not in ("cmbpo", "cpo"):
            raise ConfigError("algo must be 'cmbpo' or 'cpo'")
        if not 0 <= self.alpha0 <= 1:
            raise ConfigError("alpha0 must lie in [0, 1]")

    # -- derived sub-configs ------------------------------------------------
    def env_spec(self) -> EnvSpec:
        return EnvSpec(
            kind=self.env,
            episode_horizon=self.episode_horizon,
            cost_limit=self.cost_limit,
            seed=self.seed,
            grid_size=self.grid_size,
            slip_prob=self.slip_prob,
            discount=self.grid_discount,
            circle_radius=self.circle_radius,
            corridor_half_width=self.corridor_half_width,
            accel_limit=self.accel_limit,
            speed_limit=self.speed_limit,
            dt=self.dt,
            control_cost=self.control_cost,
            start_noise=self.start_noise,
        )

    def cpo_config(self, cost_accounting: str, gamma: float | None = None,
                   cost_gamma: float | None = None) -> CpoConfig:
        g = self.gamma if gamma is None else gamma
        gc = self.cost_gamma if cost_gamma is None else cost_gamma
        scale = 1.0
        if cost_accounting == "episode":
            scale = 1.0 / (self.episode_horizon * (1.0 - gc))
        return CpoConfig(
            target_kl=self.target_kl,
            cost_limit=self.cost_limit,
            cg_iters=self.cg_iters,
            cg_damping=self.cg_damping,
            backtrack_steps=self.backtrack_steps,
            backtrack_coeff=self.backtrack_coeff,
            gamma=g,
            cost_gamma=gc,
            lam=self.lam,
            cost_lam=self.cost_lam,
            value_learn_rate=self.value_learn_rate,
            value_batch_size=self.value_batch_size,
            value_train_repeats=self.value_train_repeats,
            cost_slack_scale=scale,
        )

    def model_train_config(self) -> ModelTrainConfig:
        return ModelTrainConfig(
            epochs=self.model_train_epochs,
            batch_size=self.model_batch_size,
            learn_rate=self.model_learn_rate,
            holdout_fraction=self.model_holdout_fraction,
            patience=self.model_patience,
        )

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _parse_value(raw: str, field: dataclasses.Field):
    raw = raw.strip()
    t = field.type
    if t in ("int",):
        return int(raw)
    if t in ("float",):
        return float(raw)
    if t in ("bool",):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{field.name}: cannot parse boolean from {raw!r}")
    if t.startswith("tuple"):
        if not raw:
            return ()
        return tuple(int(x) for x in raw.split(","))
    return raw


def load_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from defaults, an optional file, env vars, overrides."""
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    values: dict = {}
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in fields:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = _parse_value(raw, fields[key])
    for name, f in fields.items():
        env_key = ENV_PREFIX + name.upper()
        if env_key in os.environ:
            values[name] = _parse_value(os.environ[env_key], f)
    for key, val in (overrides or {}).items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = val
    return ExperimentConfig(**values)
