"""Constrained trust-region policy updates.

Solves, per update, the quadratically constrained linear program

    max_x  g^T x    s.t.  1/2 x^T H x <= target_kl,   b^T x + c <= 0

where g is the return-surrogate gradient, b the cost-surrogate gradient,
c the current constraint slack (positive when infeasible), and H the
policy Fisher.  The dual has an analytic solution over three regimes:

  inactive:  the cost constraint cannot bind inside the trust region
             (or b = 0 with slack), so the step is the plain natural
             gradient scaled to the trust-region boundary;
  active:    the dual multiplier pair (lam, nu) is found by comparing the
             two candidate branches nu > 0 / nu = 0 on their validity
             intervals;
  recovery:  no point of the trust region satisfies the constraint, so
             the step purely decreases the cost surrogate.

A backtracking line search then verifies measured KL, surrogate
improvement, and the cost surrogate on the actual batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-12


class OptimizerError(RuntimeError):
    pass


@dataclass
class CpoConfig:
    target_kl: float = 0.01
    cost_limit: float = 10.0
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_steps: int = 10
    backtrack_coeff: float = 0.8
    gamma: float = 0.99
    cost_gamma: float = 0.97
    lam: float = 0.95
    cost_lam: float = 0.5
    value_learn_rate: float = 3e-4
    value_batch_size: int = 2048
    value_train_repeats: int = 8
    # converts (j_c_estimate - cost_limit) into the cost-surrogate's units;
    # 1.0 when j_c is a discounted return, 1/(T*(1-cost_gamma)) when j_c is
    # an undiscounted episode cost over episodes of length T
    cost_slack_scale: float = 1.0
    cost_slack_tol: float = 1e-8

    def __post_init__(self):
        if self.target_kl <= 0.0 or self.cg_iters < 1:
            raise OptimizerError("target_kl must be positive and cg_iters >= 1")


# ---------------------------------------------------------------------------
# Advantage estimation
# ---------------------------------------------------------------------------

def gae_from_arrays(rewards: np.ndarray, values: np.ndarray, bootstrap: float,
                    gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """GAE over one trajectory given V(s_0..s_{T-1}) and V(s_T)=bootstrap."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(rewards) == 0:
        raise OptimizerError("gae: empty trajectory")
    next_values = np.append(values[1:], bootstrap)
    deltas = rewards + gamma * next_values - values
    adv = np.zeros_like(deltas)
    acc = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv, adv + values


def gae_advantages(trajectory, value_fn, gamma: float, lam: float,
                   signal: str = "reward") -> tuple[np.ndarray, np.ndarray]:
    """GAE advantages and regression targets for one trajectory.

    Terminal trajectories bootstrap zero; gate- or horizon-truncated ones
    bootstrap V(final_state).  `signal` selects the reward or cost stream.
    Advantage normalization is a separate per-batch step (return signal
    only), not part of this function.
    """
    rewards = trajectory.rewards if signal == "reward" else trajectory.costs
    values = value_fn.predict(trajectory.states)
    bootstrap = 0.0 if trajectory.terminal else float(value_fn.predict(
        trajectory.final_state[None, :])[0])
    return gae_from_arrays(rewards, values, bootstrap, gamma, lam)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance rescaling (applied to the return signal only)."""
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def surrogate_value(policy, states, actions, weights, old_logp,
                    flat: np.ndarray | None = None) -> float:
    """Likelihood-ratio surrogate E[(pi_theta / pi_old) * w] on the batch."""
    logp = policy.log_probs(states, actions, flat=flat)
    return float(np.mean(np.exp(logp - old_logp) * weights))


def surrogate_grads(policy, states, actions, advantages, cost_advantages,
                    j_c_estimate: float, config: CpoConfig):
    """Return (g, b, c_slack) for the constrained step.

    g is the gradient of the ratio-weighted advantage surrogate, b the
    gradient of the cost surrogate scaled by 1/(1-cost_gamma), and c_slack
    the constraint slack (j_c_estimate - cost_limit) expressed in the same
    units via cost_slack_scale; positive c_slack means currently infeasible.
    """
    g = policy.weighted_logprob_grad(states, actions, np.asarray(advantages))
    b = policy.weighted_logprob_grad(states, actions, np.asarray(cost_advantages))
    b = b / (1.0 - config.cost_gamma)
    c_slack = (float(j_c_estimate) - config.cost_limit) * config.cost_slack_scale
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(b)) and np.isfinite(c_slack)):
        raise OptimizerError("non-finite surrogate gradients")
    return g, b, c_slack


def fisher_vector_product(policy, states, v: np.ndarray,
                          damping: float = 0.0) -> np.ndarray:
    """Damped Fisher-vector product (the KL Hessian at the current params)."""
    hv = policy.fisher_vector_product(states, v) + damping * v
    if not np.all(np.isfinite(hv)):
        raise OptimizerError("non-finite Fisher-vector product")
    return hv


def conjugate_gradient(apply_h, g: np.ndarray, iters: int = 10,
                       tol: float = 1e-10) -> np.ndarray:
    """Approximately solve H x = g for symmetric PSD H."""
    x = np.zeros_like(g)
    r = g.copy()
    p = r.copy()
    rr = float(r @ r)
    if rr == 0.0:
        return x
    for _ in range(iters):
        hp = apply_h(p)
        alpha = rr / max(float(p @ hp), EPS)
        x += alpha * p
        r -= alpha * hp
        rr_new = float(r @ r)
        if not np.isfinite(rr_new):
            raise OptimizerError("conjugate gradient diverged")
        if np.sqrt(rr_new) < tol:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


# ---------------------------------------------------------------------------
# The constrained step
# ---------------------------------------------------------------------------

def cpo_step(g: np.ndarray, b: np.ndarray, c_slack: float, apply_h,
             config: CpoConfig) -> tuple[np.ndarray, str]:
    """Analytic dual solution of the trust-region subproblem.

    Returns (direction, case_label) with case_label one of
    'inactive' | 'active' | 'recovery'.
    """
    delta = config.target_kl
    hinv_g = conjugate_gradient(apply_h, g, config.cg_iters)
    q = float(g @ hinv_g)

    def trpo_step():
        if q < EPS:
            return np.zeros_like(g)
        return np.sqrt(2.0 * delta / q) * hinv_g

    if float(b @ b) < 1e-16:
        # no cost gradient: fall back to the plain trust-region step when
        # feasible; with positive slack there is nothing to reduce cost with
        if c_slack < 0.0:
            return trpo_step(), "inactive"
        return np.zeros_like(g), "recovery"

    hinv_b = conjugate_gradient(apply_h, b, config.cg_iters)
    r = float(g @ hinv_b)
    s = max(float(b @ hinv_b), EPS)
    a_term = max(q - r * r / s, 0.0)  # >= 0 by Cauchy-Schwarz
    b_term = 2.0 * delta - c_slack * c_slack / s

    recovery = -np.sqrt(2.0 * delta / s) * hinv_b

    if c_slack < 0.0 and b_term < 0.0:
        # the entire trust region satisfies the constraint
        return trpo_step(), "inactive"
    if c_slack >= 0.0 and b_term < 0.0:
        # no intersection: move straight down the cost gradient
        return recovery, "recovery"
    if q < EPS:
        # no objective gradient: stand still if feasible, else reduce cost
        if c_slack < 0.0:
            return np.zeros_like(g), "inactive"
        return recovery, "recovery"

    # both constraints can interact: minimize the dual over its two branches
    #   nu > 0 (constraint binds): D(lam) = a/(2 lam) + lam B/2 - r c / s,
    #                              valid while r + lam c >= 0
    #   nu = 0:                    D(lam) = q/(2 lam) + lam delta,
    #                              valid while r + lam c <= 0
    lam_switch = -r / c_slack if abs(c_slack) > EPS else np.inf
    if c_slack < 0.0:
        interval_a = (EPS, lam_switch) if lam_switch > EPS else None
        interval_b = (max(lam_switch, EPS), np.inf)
    else:
        lo = max(lam_switch, 0.0) if np.isfinite(lam_switch) else 0.0
        interval_a = (max(lo, EPS), np.inf)
        interval_b = (EPS, lo) if lo > EPS else None

    def dual_a(lam):
        return a_term / (2.0 * lam) + lam * b_term / 2.0 - r * c_slack / s

    def dual_b(lam):
        return q / (2.0 * lam) + lam * delta

    candidates = []
    if interval_a is not None:
        lam_a = min(max(np.sqrt(a_term / max(b_term, EPS)), interval_a[0]), interval_a[1])
        candidates.append((dual_a(lam_a), lam_a))
    if interval_b is not None:
        lam_b = min(max(np.sqrt(q / (2.0 * delta)), interval_b[0]), interval_b[1])
        candidates.append((dual_b(lam_b), lam_b))
    if not candidates:  # cannot occur, but fail safe toward pure cost descent
        return recovery, "recovery"
    lam_star = min(candidates)[1]
    nu = max(0.0, (r + lam_star * c_slack) / s)
    x = (hinv_g - nu * hinv_b) / max(lam_star, EPS)
    label = "active" if nu > 0.0 else "inactive"
    return x, label


@dataclass
class LineSearchResult:
    accepted: bool
    backtracks: int
    measured_kl: float
    surrogate_improvement: float
    cost_surrogate_change: float
    predicted_slack: float


def line_search(policy, direction: np.ndarray, states, actions, advantages,
                cost_advantages, old_logp, c_slack: float, case_label: str,
                config: CpoConfig) -> LineSearchResult:
    """Backtrack the direction until the measured batch quantities pass.

    Acceptance requires measured mean KL within target_kl, plus either a
    nonnegative return-surrogate improvement with the cost surrogate still
    within its (possibly already violated) slack, or, in the recovery case,
    a decrease of the cost surrogate.  On failure the policy is restored
    unchanged.
    """
    old_flat = policy.get_flat()
    surr_base = float(np.mean(advantages))
    cost_base = float(np.mean(cost_advantages))
    slack_limit = max(0.0, c_slack) + config.cost_slack_tol

    for j in range(config.backtrack_steps):
        theta = old_flat + (config.backtrack_coeff**j) * direction
        policy.set_flat(theta)
        kl = policy.mean_kl(states, old_flat)
        surr = surrogate_value(policy, states, actions, advantages, old_logp)
        cost_surr = surrogate_value(policy, states, actions, cost_advantages, old_logp)
        improvement = surr - surr_base
        cost_change = cost_surr - cost_base
        # measured analogue of b^T x, in the same units as c_slack
        predicted = c_slack + cost_change / (1.0 - config.cost_gamma)
        if kl <= config.target_kl:
            if case_label == "recovery":
                if cost_change <= 0.0:
                    return LineSearchResult(True, j, kl, improvement, cost_change, predicted)
            elif improvement >= 0.0 and predicted <= slack_limit:
                return LineSearchResult(True, j, kl, improvement, cost_change, predicted)
    policy.set_flat(old_flat)
    return LineSearchResult(False, config.backtrack_steps, 0.0, 0.0, 0.0, c_slack)


def value_fit(value_fn, states: np.ndarray, targets: np.ndarray,
              config: CpoConfig, rng: np.random.Generator) -> list[float]:
    """Minibatch squared-error regression; returns per-repeat mean loss."""
    states = np.atleast_2d(states)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(states)
    if n == 0:
        raise OptimizerError("value_fit: empty batch")
    losses = []
    for _ in range(config.value_train_repeats):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.value_batch_size):
            sel = order[start:start + config.value_batch_size]
            batch_losses.append(value_fn.train_step(states[sel], targets[sel]))
        losses.append(float(np.mean(batch_losses)))
    return losses
