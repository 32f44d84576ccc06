"""Replay storage, Boltzmann start-state sampling, and branched rollouts.

Real trajectories are stored whole, tagged with a snapshot of the policy
that collected them.  Model rollouts branch off stored states: trajectories
are chosen with probability proportional to exp(-beta * mean KL between the
current policy and the collecting one), then a start state is drawn
uniformly inside the chosen trajectory.  Rollouts advance with
deterministic-mean ensemble predictions and stop at environment
termination, at the cumulative-uncertainty gate, or at the hard horizon
cap, whichever comes first.  Model transitions never enter the real buffer.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dynamics import EnsembleModel, predict_next_batch
from .uncertainty import UncertaintyBudget, disagreement_batch, horizon_gate


class RolloutError(RuntimeError):
    pass


@dataclass
class TaggedTrajectory:
    """One trajectory with the id of the policy that produced it.

    states[t] is the state the t-th action was taken from; final_state is
    the last successor.  `uncertainties` holds per-step ensemble
    disagreement for model rollouts (None for real data).  `truncation`
    records why the trajectory ended: terminal | gate | cap | horizon.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    final_state: np.ndarray
    terminal: bool
    policy_id: int
    truncation: str = "horizon"
    uncertainties: np.ndarray | None = None
    mean_kl_to_current: float = 0.0

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def next_states(self) -> np.ndarray:
        return np.vstack([self.states[1:], self.final_state[None, :]])


class ReplayBuffer:
    """FIFO trajectory store with per-policy parameter snapshots."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise RolloutError("buffer capacity must be positive")
        self.capacity = capacity
        self.trajectories: deque[TaggedTrajectory] = deque()
        self.snapshots: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def add(self, trajectory: TaggedTrajectory, policy_snapshot: np.ndarray) -> None:
        if trajectory.policy_id not in self.snapshots:
            self.snapshots[trajectory.policy_id] = np.array(policy_snapshot, copy=True)
        self.trajectories.append(trajectory)
        while len(self.trajectories) > self.capacity:
            evicted = self.trajectories.popleft()
            if not any(t.policy_id == evicted.policy_id for t in self.trajectories):
                self.snapshots.pop(evicted.policy_id, None)

    def refresh_kl(self, policy) -> None:
        """Recompute each trajectory's mean KL(current || collecting policy)."""
        current = policy.get_flat()
        for traj in self.trajectories:
            snap = self.snapshots[traj.policy_id]
            traj.mean_kl_to_current = policy.kl_between(current, snap, traj.states)

    def transition_arrays(self):
        """(states, actions, next_states, rewards, costs) over all storage."""
        if not self.trajectories:
            raise RolloutError("replay buffer is empty")
        states = np.concatenate([t.states for t in self.trajectories])
        actions = np.concatenate([_as_2d(t.actions) for t in self.trajectories])
        next_states = np.concatenate([t.next_states for t in self.trajectories])
        rewards = np.concatenate([t.rewards for t in self.trajectories])
        costs = np.concatenate([t.costs for t in self.trajectories])
        return states, actions, next_states, rewards, costs


def _as_2d(actions: np.ndarray) -> np.ndarray:
    actions = np.asarray(actions)
    return actions[:, None] if actions.ndim == 1 else actions


def boltzmann_weights(buffer: ReplayBuffer, current_policy, beta: float) -> np.ndarray:
    """Trajectory weights proportional to exp(-beta * mean KL to current)."""
    if len(buffer) == 0:
        raise RolloutError("cannot weight an empty buffer")
    buffer.refresh_kl(current_policy)
    kls = np.array([t.mean_kl_to_current for t in buffer.trajectories])
    logits = -beta * kls
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def branched_rollouts(
    ensemble: EnsembleModel,
    policy,
    buffer: ReplayBuffer,
    budget: UncertaintyBudget,
    cost_fn,
    term_fn,
    n_rollouts: int,
    rng: np.random.Generator,
    policy_id: int = -1,
    snap=None,
    action_encoder=None,
) -> list[TaggedTrajectory]:
    """Generate gated model rollouts branching from buffered states.

    Every emitted trajectory satisfies sum_t D_KL^E <= d_h by construction:
    the gate is checked before each step, including the first, so a budget
    below the first step's disagreement produces empty rollouts (dropped).
    `action_encoder` maps raw policy actions to the model's action features
    (e.g. one-hot for discrete tasks); stored actions stay raw.
    """
    if not ensemble.trained:
        raise RolloutError("ensemble is untrained")
    encode = action_encoder or _as_2d
    weights = boltzmann_weights(buffer, policy, budget.beta)
    trajs = list(buffer.trajectories)
    chosen = rng.choice(len(trajs), size=n_rollouts, p=weights)
    starts = np.stack([
        trajs[k].states[rng.integers(len(trajs[k]))] for k in chosen
    ])

    cur = starts.copy()
    cum = np.zeros(n_rollouts)
    active = np.ones(n_rollouts, dtype=bool)
    causes = np.array(["cap"] * n_rollouts, dtype=object)
    steps: list[list[tuple]] = [[] for _ in range(n_rollouts)]
    uncert: list[list[float]] = [[] for _ in range(n_rollouts)]

    for _ in range(budget.max_horizon):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        states = cur[idx]
        actions = policy.sample(states, rng)
        encoded = encode(actions)
        u = disagreement_batch(ensemble, states, encoded,
                               elites_only=budget.elites_only_disagreement)
        passes = np.array([
            horizon_gate(cum[i], du, budget) for i, du in zip(idx, u)
        ])
        gated = idx[~passes]
        causes[gated] = "gate"
        active[gated] = False
        go = idx[passes]
        if go.size == 0:
            continue
        sub = np.flatnonzero(passes)
        nxt, rew, _ = predict_next_batch(ensemble, states[sub], encoded[sub], rng)
        if snap is not None:
            nxt = snap(nxt)
        costs = np.asarray(cost_fn(nxt), dtype=np.float64)
        terms = np.asarray(term_fn(nxt), dtype=bool)
        for j, i in enumerate(go):
            steps[i].append((cur[i].copy(), actions[sub[j]], float(rew[j]),
                             float(costs[j]), nxt[j].copy()))
            uncert[i].append(float(u[sub[j]]))
            cum[i] += u[sub[j]]
            cur[i] = nxt[j]
            if terms[j]:
                causes[i] = "terminal"
                active[i] = False

    out = []
    for i in range(n_rollouts):
        if not steps[i]:
            continue
        sts, acts, rews, cs, nexts = zip(*steps[i])
        out.append(TaggedTrajectory(
            states=np.stack(sts),
            actions=np.array(acts),
            rewards=np.array(rews),
            costs=np.array(cs),
            final_state=np.asarray(nexts[-1]),
            terminal=causes[i] == "terminal",
            policy_id=policy_id,
            truncation=str(causes[i]),
            uncertainties=np.array(uncert[i]),
        ))
    return out


@dataclass
class TransitionBatch:
    """Flat per-transition arrays ready for a policy update."""

    states: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    cost_advantages: np.ndarray
    log_probs: np.ndarray
    value_targets: np.ndarray
    cost_value_targets: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def take(self, idx: np.ndarray) -> "TransitionBatch":
        return TransitionBatch(*[getattr(self, f)[idx] for f in (
            "states", "actions", "advantages", "cost_advantages",
            "log_probs", "value_targets", "cost_value_targets")])

    @staticmethod
    def concatenate(batches: list["TransitionBatch"]) -> "TransitionBatch":
        fields = ("states", "actions", "advantages", "cost_advantages",
                  "log_probs", "value_targets", "cost_value_targets")
        return TransitionBatch(*[
            np.concatenate([getattr(b, f) for b in batches]) for f in fields
        ])


def mix_batches(real_batch: TransitionBatch | None, model_batch: TransitionBatch | None,
                alpha: float, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
    """Draw ceil(alpha * batch_size) real samples, fill up with model ones.

    Sources shorter than their quota are resampled with replacement; an
    empty source hands its quota to the other.  The combined batch is
    shuffled.
    """
    n_real_avail = len(real_batch) if real_batch is not None else 0
    n_model_avail = len(model_batch) if model_batch is not None else 0
    if n_real_avail == 0 and n_model_avail == 0:
        raise RolloutError("both sample sources are empty")
    n_real = int(np.ceil(alpha * batch_size))
    n_real = min(n_real, batch_size)
    n_model = batch_size - n_real
    if n_model_avail == 0:
        n_real, n_model = batch_size, 0
    if n_real_avail == 0:
        n_real, n_model = 0, batch_size

    parts = []
    if n_real > 0:
        idx = (rng.permutation(n_real_avail)[:n_real] if n_real <= n_real_avail
               else rng.integers(n_real_avail, size=n_real))
        parts.append(real_batch.take(idx))
    if n_model > 0:
        idx = (rng.permutation(n_model_avail)[:n_model] if n_model <= n_model_avail
               else rng.integers(n_model_avail, size=n_model))
        parts.append(model_batch.take(idx))
    combined = TransitionBatch.concatenate(parts)
    return combined.take(rng.permutation(len(combined)))
