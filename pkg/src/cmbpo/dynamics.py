"""Probabilistic ensemble dynamics model.

Each member is a tanh MLP mapping (state, action) to a diagonal Gaussian
over the next-state delta plus a scalar reward head.  Training minimizes a
variance-target objective: the mean head regresses the observed state
change, and the variance head regresses the per-dimension squared error of
the mean head, with no gradient flowing through that target.  Rollout
predictions use the mean only (no sampling from the Gaussian); successor
states are formed recursively as s' = s + mean.

Members share input/target normalization statistics (fit on the training
split only) but are initialized and shuffled independently.  After each
training round the members with the lowest holdout loss become the elite
subset used for rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import Adam, Mlp, sigmoid, softplus

VAR_MIN = 1e-8
VAR_MAX = 1e4


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianPrediction:
    """Diagonal-Gaussian next-state-delta and reward prediction (raw units)."""

    mean: np.ndarray
    var: np.ndarray
    reward_mean: float
    reward_var: float

    def __post_init__(self):
        if np.any(self.var <= 0.0) or self.reward_var <= 0.0:
            raise ModelError("prediction variance must be strictly positive")
        if self.mean.shape != self.var.shape:
            raise ModelError("mean/var dimension mismatch")


@dataclass
class Normalizer:
    """Affine statistics for inputs (state||action), delta targets, rewards."""

    in_mean: np.ndarray
    in_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    reward_mean: float
    reward_std: float

    @staticmethod
    def identity(state_dim: int, action_dim: int) -> "Normalizer":
        return Normalizer(
            in_mean=np.zeros(state_dim + action_dim),
            in_std=np.ones(state_dim + action_dim),
            target_mean=np.zeros(state_dim),
            target_std=np.ones(state_dim),
            reward_mean=0.0,
            reward_std=1.0,
        )

    @staticmethod
    def fit(inputs: np.ndarray, targets: np.ndarray, rewards: np.ndarray) -> "Normalizer":
        def stats(x):
            mean = x.mean(axis=0)
            std = x.std(axis=0)
            # near-constant dimensions are left unscaled
            std = np.where(std < 1e-6, 1.0, std)
            return mean, std

        in_mean, in_std = stats(inputs)
        t_mean, t_std = stats(targets)
        r_mean, r_std = stats(rewards.reshape(-1, 1))
        return Normalizer(in_mean, in_std, t_mean, t_std, float(r_mean[0]), float(r_std[0]))

    def norm_in(self, x: np.ndarray) -> np.ndarray:
        return (x - self.in_mean) / self.in_std

    def norm_target(self, t: np.ndarray) -> np.ndarray:
        return (t - self.target_mean) / self.target_std

    def denorm_target(self, t: np.ndarray) -> np.ndarray:
        return t * self.target_std + self.target_mean

    def norm_reward(self, r: np.ndarray) -> np.ndarray:
        return (r - self.reward_mean) / self.reward_std

    def denorm_reward(self, r: np.ndarray) -> np.ndarray:
        return r * self.reward_std + self.reward_mean


class DynamicsMember:
    """One ensemble member: MLP with mean/variance heads for delta and reward."""

    def __init__(self, state_dim: int, action_dim: int, hidden: tuple[int, ...],
                 rng: np.random.Generator):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.net = Mlp(state_dim + action_dim, hidden, 2 * state_dim + 2, rng)

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def _split(self, out: np.ndarray):
        ds = self.state_dim
        return out[:, :ds], out[:, ds:2 * ds], out[:, 2 * ds], out[:, 2 * ds + 1]

    def raw_forward(self, x_norm: np.ndarray):
        """Normalized-space heads: (mean, var, r_mean, r_var, cache, raw heads)."""
        out, cache = self.net.forward(x_norm)
        mean, raw_var, r_mean, raw_rvar = self._split(out)
        var = np.minimum(softplus(raw_var) + VAR_MIN, VAR_MAX)
        r_var = np.minimum(softplus(raw_rvar) + VAR_MIN, VAR_MAX)
        return mean, var, r_mean, r_var, cache, raw_var, raw_rvar


def forward(member: DynamicsMember, state: np.ndarray, action: np.ndarray,
            normalizer: Normalizer | None = None) -> GaussianPrediction:
    """Deterministic single-input prediction in raw (denormalized) units."""
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if state.shape != (member.state_dim,) or action.shape != (member.action_dim,):
        raise ModelError("forward: input dimension mismatch")
    norm = normalizer or Normalizer.identity(member.state_dim, member.action_dim)
    x = norm.norm_in(np.concatenate([state, action])[None, :])
    mean, var, r_mean, r_var, *_ = member.raw_forward(x)
    return GaussianPrediction(
        mean=norm.denorm_target(mean[0]),
        var=var[0] * norm.target_std**2,
        reward_mean=float(norm.denorm_reward(r_mean[0])),
        reward_var=float(r_var[0] * norm.reward_std**2),
    )


def _prepare_batch(member, states, actions, next_states, rewards, normalizer):
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    next_states = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if len(states) == 0:
        raise ModelError("empty batch")
    norm = normalizer or Normalizer.identity(member.state_dim, member.action_dim)
    x = norm.norm_in(np.concatenate([states, actions], axis=1))
    y = norm.norm_target(next_states - states)
    z = norm.norm_reward(rewards)
    return x, y, z


def model_loss(member: DynamicsMember, states, actions, next_states, rewards,
               normalizer: Normalizer | None = None,
               frozen_var_targets: tuple[np.ndarray, np.ndarray] | None = None) -> float:
    """Variance-target loss, averaged over the batch.

    Per sample: ||mean - dstate||^2 + ||var - SE||^2 for the state head and
    the analogous two terms for the reward head, where SE is the
    per-dimension squared error of the mean head.  SE acts as a constant
    target; `frozen_var_targets` pins it explicitly (used by gradient
    checks that must differentiate the same function the gradient claims).
    """
    x, y, z = _prepare_batch(member, states, actions, next_states, rewards, normalizer)
    mean, var, r_mean, r_var, *_ = member.raw_forward(x)
    se = (mean - y) ** 2
    se_r = (r_mean - z) ** 2
    if frozen_var_targets is not None:
        se, se_r = frozen_var_targets
    loss = (
        np.sum((mean - y) ** 2, axis=1)
        + np.sum((var - se) ** 2, axis=1)
        + (r_mean - z) ** 2
        + (r_var - se_r) ** 2
    )
    return float(loss.mean())


def variance_targets(member: DynamicsMember, states, actions, next_states, rewards,
                     normalizer: Normalizer | None = None):
    """Current stop-gradient variance targets (SE, SE_reward) for a batch."""
    x, y, z = _prepare_batch(member, states, actions, next_states, rewards, normalizer)
    mean, _, r_mean, *_ = member.raw_forward(x)
    return (mean - y) ** 2, (r_mean - z) ** 2


def model_loss_grad(member: DynamicsMember, states, actions, next_states, rewards,
                    normalizer: Normalizer | None = None) -> tuple[float, np.ndarray]:
    """Loss and its analytic gradient w.r.t. the member's flat parameters.

    The gradient treats the squared-error variance targets as constants;
    no gradient flows through them.
    """
    x, y, z = _prepare_batch(member, states, actions, next_states, rewards, normalizer)
    n = len(x)
    mean, var, r_mean, r_var, cache, raw_var, raw_rvar = member.raw_forward(x)
    se = (mean - y) ** 2
    se_r = (r_mean - z) ** 2
    loss = float(np.mean(
        np.sum((mean - y) ** 2, axis=1)
        + np.sum((var - se) ** 2, axis=1)
        + (r_mean - z) ** 2
        + (r_var - se_r) ** 2
    ))
    dmean = 2.0 * (mean - y) / n
    dvar = 2.0 * (var - se) / n
    draw_var = dvar * sigmoid(raw_var)
    draw_var[var >= VAR_MAX] = 0.0
    dr_mean = 2.0 * (r_mean - z) / n
    dr_var = 2.0 * (r_var - se_r) / n
    draw_rvar = dr_var * sigmoid(raw_rvar)
    draw_rvar[r_var >= VAR_MAX] = 0.0
    dout = np.concatenate(
        [dmean, draw_var, dr_mean[:, None], draw_rvar[:, None]], axis=1
    )
    return loss, member.net.backward(cache, dout)


@dataclass
class ModelTrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learn_rate: float = 1e-3
    holdout_fraction: float = 0.1
    patience: int = 5
    min_transitions: int | None = None  # default 2 * batch_size


@dataclass
class EnsembleModel:
    """M probabilistic regressors with an elite subset and shared scaling.

    var_floor, when set by training, is the per-dimension holdout MSE of the
    elite means (raw units).  Ensemble-level predictions clamp head variances
    below it: the trained variance targets track training-set residuals,
    which shrink far below the out-of-sample error as the fit improves, and
    an unfloored KL disagreement would inflate with 1/sigma^2 over training
    instead of measuring relative member spread.
    """

    members: list[DynamicsMember]
    member_seeds: list[int]
    n_elite: int
    normalizer: Normalizer
    elite_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    train_rounds: int = 0
    var_floor: np.ndarray | None = None

    def __post_init__(self):
        if not 1 <= self.n_elite <= len(self.members):
            raise ModelError("n_elite must be between 1 and ensemble size")

    @staticmethod
    def create(state_dim: int, action_dim: int, hidden: tuple[int, ...],
               n_members: int, n_elite: int, seed: int) -> "EnsembleModel":
        seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_members)]
        members = [
            DynamicsMember(state_dim, action_dim, hidden, np.random.default_rng(s))
            for s in seeds
        ]
        return EnsembleModel(
            members=members,
            member_seeds=seeds,
            n_elite=n_elite,
            normalizer=Normalizer.identity(state_dim, action_dim),
        )

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def trained(self) -> bool:
        return self.elite_indices.size > 0

    @property
    def state_dim(self) -> int:
        return self.members[0].state_dim

    def predict_all(self, states: np.ndarray, actions: np.ndarray,
                    members: list[int] | None = None):
        """Per-member raw-unit Gaussians: means (M, B, ds), vars (M, B, ds)."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        x = self.normalizer.norm_in(np.concatenate([states, actions], axis=1))
        idxs = range(self.size) if members is None else members
        means, variances, r_means = [], [], []
        for i in idxs:
            m, v, rm, _, *_ = self.members[i].raw_forward(x)
            means.append(self.normalizer.denorm_target(m))
            variances.append(v * self.normalizer.target_std**2)
            r_means.append(self.normalizer.denorm_reward(rm))
        var = np.stack(variances)
        if self.var_floor is not None:
            var = np.maximum(var, self.var_floor)
        return np.stack(means), var, np.stack(r_means)


def train_ensemble(ensemble: EnsembleModel, states, actions, next_states, rewards,
                   config: ModelTrainConfig | None = None) -> dict:
    """Train every member on independently shuffled minibatches.

    A single holdout split (fit-independent) scores the members; the lowest
    holdout losses become elites.  Normalization is refit on the training
    split before each round.  Early stopping restores each member's best
    parameters.  Returns per-member holdout histories.
    """
    config = config or ModelTrainConfig()
    states = np.asarray(states, dtype=np.float64)
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    next_states = np.asarray(next_states, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    n = len(states)
    min_needed = config.min_transitions or 2 * config.batch_size
    if n < min_needed:
        raise ModelError(f"need at least {min_needed} transitions, got {n}")

    round_idx = ensemble.train_rounds
    split_rng = np.random.default_rng([0x5EED5EED, ensemble.member_seeds[0], round_idx])
    perm = split_rng.permutation(n)
    n_holdout = max(1, int(round(config.holdout_fraction * n)))
    holdout_idx, train_idx = perm[:n_holdout], perm[n_holdout:]

    tr = (states[train_idx], actions[train_idx], next_states[train_idx], rewards[train_idx])
    ho = (states[holdout_idx], actions[holdout_idx], next_states[holdout_idx], rewards[holdout_idx])
    ensemble.normalizer = Normalizer.fit(
        np.concatenate([tr[0], tr[1]], axis=1), tr[2] - tr[0], tr[3]
    )

    histories = []
    epochs_run = []
    for m_idx, member in enumerate(ensemble.members):
        rng = np.random.default_rng([ensemble.member_seeds[m_idx], round_idx])
        opt = Adam(member.n_params, lr=config.learn_rate)
        best_loss = model_loss(member, *ho, ensemble.normalizer)
        best_params = member.net.get_flat()
        history = [best_loss]
        stale = 0
        epoch = 0
        n_train = len(train_idx)
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n_train)
            for start in range(0, n_train, config.batch_size):
                sel = order[start:start + config.batch_size]
                _, grad = model_loss_grad(
                    member, tr[0][sel], tr[1][sel], tr[2][sel], tr[3][sel],
                    ensemble.normalizer,
                )
                opt.step(member.net.flat, grad)
            loss = model_loss(member, *ho, ensemble.normalizer)
            history.append(loss)
            if loss < best_loss - 1e-12:
                best_loss = loss
                best_params = member.net.get_flat()
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
        member.net.set_flat(best_params)
        histories.append(history)
        epochs_run.append(epoch)

    final_losses = np.array([min(h) for h in histories])
    order = np.argsort(final_losses, kind="stable")
    ensemble.elite_indices = order[: ensemble.n_elite].copy()
    ensemble.train_rounds += 1

    # per-dimension holdout MSE of the elite means anchors the variance floor
    ho_x = ensemble.normalizer.norm_in(np.concatenate([ho[0], ho[1]], axis=1))
    ho_delta = ho[2] - ho[0]
    sq_errors = []
    for i in ensemble.elite_indices:
        mean_n, *_ = ensemble.members[i].raw_forward(ho_x)
        pred = ensemble.normalizer.denorm_target(mean_n)
        sq_errors.append((pred - ho_delta) ** 2)
    ensemble.var_floor = np.maximum(np.stack(sq_errors).mean(axis=(0, 1)), 1e-12)

    return {
        "holdout_initial": [h[0] for h in histories],
        "holdout_final": final_losses.tolist(),
        "holdout_history": histories,
        "epochs_run": epochs_run,
        "elite_indices": ensemble.elite_indices.tolist(),
    }


def predict_next(ensemble: EnsembleModel, state: np.ndarray, action: np.ndarray,
                 rng: np.random.Generator) -> tuple[np.ndarray, float, int]:
    """One deterministic-mean step with a uniformly chosen elite member."""
    if not ensemble.trained:
        raise ModelError("ensemble has no elites; train it first")
    member_idx = int(ensemble.elite_indices[rng.integers(ensemble.n_elite)])
    pred = forward(ensemble.members[member_idx], np.asarray(state), np.asarray(action),
                   ensemble.normalizer)
    return np.asarray(state) + pred.mean, pred.reward_mean, member_idx


def predict_next_batch(ensemble: EnsembleModel, states: np.ndarray, actions: np.ndarray,
                       rng: np.random.Generator):
    """Vectorized predict_next over a batch of rollouts.

    Returns (next_states, rewards, member_indices).  Members are drawn
    uniformly from the elites, independently per row.
    """
    if not ensemble.trained:
        raise ModelError("ensemble has no elites; train it first")
    states = np.atleast_2d(states)
    n = len(states)
    choice = rng.integers(ensemble.n_elite, size=n)
    member_ids = ensemble.elite_indices[choice]
    means, _, r_means = ensemble.predict_all(states, actions,
                                             members=list(ensemble.elite_indices))
    rows = np.arange(n)
    next_states = states + means[choice, rows]
    rewards = r_means[choice, rows]
    return next_states, rewards, member_ids


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_ensemble(ensemble: EnsembleModel, path: str) -> None:
    member = ensemble.members[0]
    np.savez(
        path,
        version=1,
        state_dim=member.state_dim,
        action_dim=member.action_dim,
        hidden=np.array(member.net.hidden, dtype=int),
        n_elite=ensemble.n_elite,
        params=np.stack([m.net.get_flat() for m in ensemble.members]),
        member_seeds=np.array(ensemble.member_seeds, dtype=np.int64),
        elite_indices=ensemble.elite_indices,
        train_rounds=ensemble.train_rounds,
        in_mean=ensemble.normalizer.in_mean,
        in_std=ensemble.normalizer.in_std,
        target_mean=ensemble.normalizer.target_mean,
        target_std=ensemble.normalizer.target_std,
        reward_stats=np.array([ensemble.normalizer.reward_mean,
                               ensemble.normalizer.reward_std]),
        var_floor=(ensemble.var_floor if ensemble.var_floor is not None
                   else np.zeros(0)),
    )


def load_ensemble(path: str) -> EnsembleModel:
    data = np.load(path)
    hidden = tuple(int(h) for h in data["hidden"])
    params = data["params"]
    seeds = [int(s) for s in data["member_seeds"]]
    members = []
    for i in range(len(params)):
        m = DynamicsMember(int(data["state_dim"]), int(data["action_dim"]), hidden,
                           np.random.default_rng(0))
        m.net.set_flat(params[i])
        members.append(m)
    norm = Normalizer(
        in_mean=data["in_mean"], in_std=data["in_std"],
        target_mean=data["target_mean"], target_std=data["target_std"],
        reward_mean=float(data["reward_stats"][0]),
        reward_std=float(data["reward_stats"][1]),
    )
    floor = data["var_floor"] if "var_floor" in data else np.zeros(0)
    return EnsembleModel(
        members=members,
        member_seeds=seeds,
        n_elite=int(data["n_elite"]),
        normalizer=norm,
        elite_indices=data["elite_indices"].astype(int),
        train_rounds=int(data["train_rounds"]),
        var_floor=floor if floor.size else None,
    )
