"""Model-uncertainty quantification and budget control.

Epistemic uncertainty is measured as the average pairwise KL divergence
between the members' Gaussian next-state predictions at a state-action
pair.  Two budgets derived from an initial calibration round keep model
usage in check:

  d_m: cap on average disagreement of samples entering policy updates,
       enforced by mixing real data in at ratio alpha,
  d_H: cap on disagreement accumulated along a model rollout, enforced by
       stopping the rollout before the running sum would exceed it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import EnsembleModel, GaussianPrediction, ModelError


def gaussian_kl(p: GaussianPrediction, q: GaussianPrediction) -> float:
    """KL(N(mu_p, diag var_p) || N(mu_q, diag var_q)) of the state heads."""
    return float(gaussian_kl_arrays(p.mean, p.var, q.mean, q.var))


def gaussian_kl_arrays(mu_p, var_p, mu_q, var_q) -> np.ndarray:
    """Closed-form diagonal-Gaussian KL, vectorized over leading axes."""
    var_p = np.asarray(var_p, dtype=np.float64)
    var_q = np.asarray(var_q, dtype=np.float64)
    if np.any(var_p <= 0.0) or np.any(var_q <= 0.0):
        raise ModelError("gaussian_kl: variances must be strictly positive")
    mu_p = np.asarray(mu_p, dtype=np.float64)
    mu_q = np.asarray(mu_q, dtype=np.float64)
    terms = np.log(var_q / var_p) - 1.0 + var_p / var_q + (mu_q - mu_p) ** 2 / var_q
    return 0.5 * terms.sum(axis=-1)


def _pairwise_mean_kl(means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Average KL over ordered member pairs; means/vars shaped (M, B, ds)."""
    m = len(means)
    if m < 2:
        raise ModelError("ensemble disagreement needs at least two members")
    total = np.zeros(means.shape[1], dtype=np.float64)
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            total += gaussian_kl_arrays(means[i], variances[i], means[j], variances[j])
    return total / (m * (m - 1))


def ensemble_disagreement(ensemble: EnsembleModel, state: np.ndarray, action: np.ndarray,
                          elites_only: bool = False) -> float:
    """Average pairwise KL between member transition Gaussians at (s, a).

    Uses all members by default; the reward head never contributes.
    """
    value = disagreement_batch(
        ensemble, np.atleast_2d(state), np.atleast_2d(action), elites_only=elites_only
    )
    return float(value[0])


def disagreement_batch(ensemble: EnsembleModel, states: np.ndarray, actions: np.ndarray,
                       elites_only: bool = False) -> np.ndarray:
    members = list(ensemble.elite_indices) if elites_only else None
    means, variances, _ = ensemble.predict_all(states, actions, members=members)
    return _pairwise_mean_kl(means, variances)


@dataclass
class UncertaintyBudget:
    """Calibrated limits plus the live mixing state."""

    d_m: float
    d_h: float
    alpha: float
    beta: float
    alpha0: float
    h0: int
    alpha_floor: float = 0.05
    max_horizon: int = 100
    elites_only_disagreement: bool = False

    def __post_init__(self):
        if self.d_m <= 0.0 or self.d_h <= 0.0:
            raise ModelError("uncertainty budgets must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ModelError("alpha must lie in [0, 1]")
        if self.beta < 0.0:
            raise ModelError("beta must be nonnegative")


def calibrate_budgets(
    ensemble: EnsembleModel,
    states: np.ndarray,
    actions: np.ndarray,
    policy_act,
    alpha0: float,
    h0: int,
    rng: np.random.Generator,
    *,
    beta: float = 2.0,
    n_rollouts: int = 64,
    average_rollouts: bool = True,
    alpha_floor: float = 0.05,
    max_horizon: int = 100,
    elites_only_disagreement: bool = False,
    snap=None,
) -> UncertaintyBudget:
    """Derive (d_m, d_h) from the freshly trained ensemble.

    d_m = (1 - alpha0) * mean disagreement over the initial buffer's
    state-action pairs.  d_h accumulates per-step disagreement over
    h0-step mean rollouts started from buffer states under the current
    policy; by default the sum is averaged over many rollouts (a single
    rollout is used when average_rollouts=False).
    """
    from .dynamics import predict_next_batch

    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if len(states) == 0:
        raise ModelError("calibrate_budgets: empty initial buffer")

    d0 = disagreement_batch(ensemble, states, actions, elites_only=elites_only_disagreement)
    mean_d0 = float(d0.mean())
    d_m = max((1.0 - alpha0) * mean_d0, 1e-12)

    n_start = n_rollouts if average_rollouts else 1
    start_idx = rng.integers(len(states), size=n_start)
    cur = states[start_idx].copy()
    cum = np.zeros(n_start, dtype=np.float64)
    for _ in range(h0):
        acts = np.atleast_2d(policy_act(cur, rng))
        cum += disagreement_batch(ensemble, cur, acts,
                                  elites_only=elites_only_disagreement)
        nxt, _, _ = predict_next_batch(ensemble, cur, acts, rng)
        cur = snap(nxt) if snap is not None else nxt
    d_h = max(float(cum.mean()), 1e-12)

    return UncertaintyBudget(
        d_m=d_m, d_h=d_h, alpha=float(alpha0), beta=float(beta),
        alpha0=float(alpha0), h0=int(h0), alpha_floor=alpha_floor,
        max_horizon=max_horizon, elites_only_disagreement=elites_only_disagreement,
    )


def update_mixing(mean_disagreement: float, budget: UncertaintyBudget) -> float:
    """Smallest feasible real-sample ratio: (1 - alpha) * disagreement <= d_m.

    Clamped to [alpha_floor, 1] so real data never vanishes.  The result is
    nudged upward by ulps if float round-off would leave the constraint
    violated; callers may rely on the inequality holding exactly.
    """
    if mean_disagreement < 0.0:
        raise ModelError("mean disagreement must be nonnegative")
    if mean_disagreement <= budget.d_m:
        alpha = budget.alpha_floor
    else:
        alpha = max(budget.alpha_floor, 1.0 - budget.d_m / mean_disagreement)
        alpha = min(alpha, 1.0)
        while (1.0 - alpha) * mean_disagreement > budget.d_m and alpha < 1.0:
            alpha = np.nextafter(alpha, 1.0)
    budget.alpha = float(alpha)
    return budget.alpha


def horizon_gate(cumulative: float, next_step_uncertainty: float,
                 budget: UncertaintyBudget) -> bool:
    """True (continue) iff taking the next step keeps the sum within d_h."""
    if cumulative < 0.0:
        raise ModelError("cumulative uncertainty must be nonnegative")
    return bool(cumulative + next_step_uncertainty <= budget.d_h)
