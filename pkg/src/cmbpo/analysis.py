"""Numerical verification of the model-based policy improvement bounds.

Checks, on finite CMDPs and with exact linear-algebra quantities only:

  * the two-sided bound  L_m/(1-g) - 4 d_max eps/(1-g)  <=  J(pi') - J(pi)
    <=  L_m/(1-g) + 4 d_max eps/(1-g), where the surrogate and penalty are
    evaluated under a (possibly wrong) model kernel,
  * the L1 bound on the stationary-distribution shift between the true
    kernel under pi' and the model kernel under pi,
  * the return identity for arbitrary state functions f,
  * the exact distribution-mismatch error terms against their bounds,
  * the additive safety certificate for candidate cost returns.

All expectations are evaluated as finite sums; `holds` flags carry a 1e-9
slack to absorb linear-solver round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .cmdp import (
    CmdpError,
    PolicyTable,
    TabularCMDP,
    divergence_extrema,
    exact_return,
    exact_value_advantage,
    stationary_distribution,
)

HOLDS_TOL = 1e-9


@dataclass(frozen=True)
class BoundaryReport:
    """All terms of the two-sided performance bound plus the exact gap.

    delta_max is taken over all (s, a, s') triples; delta_max_reachable
    restricts to triples with positive true-transition probability and is
    reported for tightness diagnostics only.
    """

    delta_j: float
    l_m: float
    delta_max: float
    delta_max_reachable: float
    eps_pi: float
    eps_m: float
    eps: float
    lower: float
    upper: float
    holds: bool

    def to_record(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LemmaReport:
    """L1 distance between shifted stationary distributions vs its bound."""

    lhs_l1: float
    rhs_bound: float
    holds: bool

    def to_record(self) -> dict:
        return asdict(self)


def _ratio_ok(policy_new: PolicyTable, policy_old: PolicyTable) -> None:
    bad = (policy_new.probs > 0.0) & (policy_old.probs <= 0.0)
    if np.any(bad):
        raise CmdpError("likelihood ratio undefined: pi'(a|s) > 0 where pi(a|s) = 0")


def relative_performance(
    cmdp: TabularCMDP,
    model_kernel: np.ndarray,
    policy_old: PolicyTable,
    policy_new: PolicyTable,
    signal: int | str = "reward",
) -> float:
    """Likelihood-ratio-weighted model advantage of pi' over the model state
    distribution of pi:  E_{s~d_m^pi, a~pi}[(pi'/pi) A_m^pi(s, a)]."""
    _ratio_ok(policy_new, policy_old)
    d_m = stationary_distribution(cmdp, policy_old, model_kernel).d
    _, _, adv_m = exact_value_advantage(cmdp, policy_old, model_kernel, signal)
    ratio = np.divide(
        policy_new.probs, policy_old.probs,
        out=np.zeros_like(policy_new.probs), where=policy_old.probs > 0.0,
    )
    inner = np.einsum("sa,sa,sa->s", policy_old.probs, ratio, adv_m)
    return float(d_m @ inner)


def _td_residuals(cmdp: TabularCMDP, signal: np.ndarray, values: np.ndarray) -> np.ndarray:
    """delta[s, a, s'] = signal + g * V[s'] - V[s]."""
    g = cmdp.discount
    return signal + g * values[None, None, :] - values[:, None, None]


def boundary_report(
    cmdp: TabularCMDP,
    model_kernel: np.ndarray,
    policy_old: PolicyTable,
    policy_new: PolicyTable,
    signal: int | str = "reward",
) -> BoundaryReport:
    """Evaluate every term of the two-sided bound and check it against the
    exact return difference computed on the true kernel."""
    g = cmdp.discount
    sig = cmdp.signal(signal)

    j_new = exact_return(cmdp, policy_new, None, signal)
    j_old = exact_return(cmdp, policy_old, None, signal)
    delta_j = j_new - j_old

    l_m = relative_performance(cmdp, model_kernel, policy_old, policy_new, signal)

    v_m, _, _ = exact_value_advantage(cmdp, policy_old, model_kernel, signal)
    td = np.abs(_td_residuals(cmdp, sig, v_m))
    delta_max = float(td.max())
    reachable = cmdp.transition > 0.0
    delta_max_reachable = float(td[reachable].max()) if np.any(reachable) else 0.0

    eps_pi, eps_m = divergence_extrema(
        policy_new, policy_old, cmdp.transition, np.asarray(model_kernel)
    )
    eps = eps_pi * eps_m + g / (1.0 - g) * (eps_pi**2 + 2.0 * eps_pi * eps_m)

    penalty = 4.0 * delta_max * eps / (1.0 - g)
    lower = l_m / (1.0 - g) - penalty
    upper = l_m / (1.0 - g) + penalty
    holds = bool(lower - HOLDS_TOL <= delta_j <= upper + HOLDS_TOL)
    return BoundaryReport(
        delta_j=delta_j,
        l_m=l_m,
        delta_max=delta_max,
        delta_max_reachable=delta_max_reachable,
        eps_pi=eps_pi,
        eps_m=eps_m,
        eps=eps,
        lower=lower,
        upper=upper,
        holds=holds,
    )


def lemma_state_dist_check(
    cmdp: TabularCMDP,
    model_kernel: np.ndarray,
    policy_old: PolicyTable,
    policy_new: PolicyTable,
) -> LemmaReport:
    """|| d^{pi'} - d_m^{pi} ||_1  vs  2g/(1-g) (E[TV(pi'||pi)] + E[TV(P||P_m)]),
    with both expectations under the model state distribution of pi."""
    g = cmdp.discount
    P_m = np.asarray(model_kernel, dtype=np.float64)
    d_new = stationary_distribution(cmdp, policy_new, None).d
    d_m = stationary_distribution(cmdp, policy_old, P_m).d
    lhs = float(np.abs(d_new - d_m).sum())

    tv_pi = 0.5 * np.abs(policy_new.probs - policy_old.probs).sum(axis=1)
    tv_kernel = 0.5 * np.abs(cmdp.transition - P_m).sum(axis=2)
    expected_tv_pi = float(d_m @ tv_pi)
    expected_tv_kernel = float(d_m @ np.einsum("sa,sa->s", policy_old.probs, tv_kernel))
    rhs = 2.0 * g / (1.0 - g) * (expected_tv_pi + expected_tv_kernel)
    return LemmaReport(lhs_l1=lhs, rhs_bound=rhs, holds=bool(lhs <= rhs + HOLDS_TOL))


def return_identity_check(
    cmdp: TabularCMDP, policy: PolicyTable, f: np.ndarray
) -> float:
    """Residual of J(pi) = E_mu[f] + 1/(1-g) E_{d,pi,P}[r + g f(s') - f(s)]."""
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise CmdpError("return_identity_check: f must be finite")
    g = cmdp.discount
    j = exact_return(cmdp, policy, None, "reward")
    d = stationary_distribution(cmdp, policy, None).d
    delta_f = _td_residuals(cmdp, cmdp.reward, f)
    expected = np.einsum("s,sa,saj,saj->", d, policy.probs, cmdp.transition, delta_f)
    rhs = float(cmdp.start_dist @ f) + expected / (1.0 - g)
    return abs(j - rhs)


def error_term_check(
    cmdp: TabularCMDP,
    model_kernel: np.ndarray,
    policy_old: PolicyTable,
    policy_new: PolicyTable,
) -> tuple[bool, bool]:
    """Exact distribution-mismatch error terms against their analytic bounds.

    With f = V_m^pi and delta the TD residual of the reward under f:
      E_joint = < d^{pi'} - d_m^{pi}, < pi' - pi, E_{s'~P}[delta] > >
      E_pol   = < d^{pi'} - d^{pi},   E_{a~pi, s'~P}[delta] >
    bounded by 4g/(1-g) d_max (eps_pi^2 + eps_pi eps_m) and
    4g/(1-g) d_max eps_pi eps_m respectively.
    """
    g = cmdp.discount
    P = cmdp.transition
    P_m = np.asarray(model_kernel, dtype=np.float64)

    v_m, _, _ = exact_value_advantage(cmdp, policy_old, P_m, "reward")
    delta = _td_residuals(cmdp, cmdp.reward, v_m)
    exp_sp = np.einsum("saj,saj->sa", P, delta)

    d_new = stationary_distribution(cmdp, policy_new, None).d
    d_old = stationary_distribution(cmdp, policy_old, None).d
    d_m = stationary_distribution(cmdp, policy_old, P_m).d

    pol_gap = policy_new.probs - policy_old.probs
    e_joint = float((d_new - d_m) @ np.einsum("sa,sa->s", pol_gap, exp_sp))
    e_pol = float((d_new - d_old) @ np.einsum("sa,sa->s", policy_old.probs, exp_sp))

    delta_max = float(np.abs(delta).max())
    eps_pi, eps_m = divergence_extrema(policy_new, policy_old, P, P_m)
    scale = 4.0 * g / (1.0 - g) * delta_max
    e1_ok = abs(e_joint) <= scale * (eps_pi**2 + eps_pi * eps_m) + HOLDS_TOL
    e2_ok = abs(e_pol) <= scale * (eps_pi * eps_m) + HOLDS_TOL
    return bool(e1_ok), bool(e2_ok)


def safety_certificate(
    j_c: float, l_mc: float, delta_c_max: float, eps: float, discount: float, d_c: float
) -> bool:
    """True iff J_c + L_mc/(1-g) + 4 d_c_max eps/(1-g) <= d_c (boundary inclusive)."""
    if not 0.0 < discount < 1.0:
        raise CmdpError("safety_certificate: discount must be in (0, 1)")
    if eps < 0.0 or delta_c_max < 0.0:
        raise CmdpError("safety_certificate: eps and delta_c_max must be nonnegative")
    bound = j_c + l_mc / (1.0 - discount) + 4.0 * delta_c_max * eps / (1.0 - discount)
    return bool(bound <= d_c)


# ---------------------------------------------------------------------------
# Randomized instances for batch verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VerificationInstance:
    cmdp: TabularCMDP
    model_kernel: np.ndarray
    policy_old: PolicyTable
    policy_new: PolicyTable


def random_instance(
    rng: np.random.Generator,
    n_states_range: tuple[int, int] = (2, 8),
    n_actions_range: tuple[int, int] = (2, 4),
    discount_range: tuple[float, float] = (0.5, 0.95),
    model_noise_max: float = 0.5,
    n_costs: int = 1,
    equal_policies: bool = False,
) -> VerificationInstance:
    """Random finite CMDP with a perturbed model kernel and a policy pair.

    Transition rows and policies are Dirichlet(1); rewards uniform in
    [-1, 1]; costs uniform in [0, 1]; the model kernel is a convex mixture
    (1 - lam) P + lam * Dirichlet noise with lam ~ U[0, model_noise_max],
    which sweeps eps_m from 0 to large.
    """
    S = int(rng.integers(n_states_range[0], n_states_range[1] + 1))
    A = int(rng.integers(n_actions_range[0], n_actions_range[1] + 1))
    gamma = float(rng.uniform(*discount_range))

    P = rng.dirichlet(np.ones(S), size=(S, A))
    reward = rng.uniform(-1.0, 1.0, size=(S, A, S))
    costs = tuple(rng.uniform(0.0, 1.0, size=(S, A, S)) for _ in range(n_costs))
    mu = rng.dirichlet(np.ones(S))

    lam = float(rng.uniform(0.0, model_noise_max))
    noise = rng.dirichlet(np.ones(S), size=(S, A))
    P_m = (1.0 - lam) * P + lam * noise

    pi_old = PolicyTable(rng.dirichlet(np.ones(A), size=S))
    pi_new = pi_old if equal_policies else PolicyTable(rng.dirichlet(np.ones(A), size=S))

    cmdp = TabularCMDP(
        transition=P, reward=reward, costs=costs, start_dist=mu,
        discount=gamma, cost_limits=tuple(1.0 for _ in range(n_costs)),
    )
    return VerificationInstance(cmdp, P_m, pi_old, pi_new)


def verify_instance(instance: VerificationInstance) -> dict:
    """Run every check on one instance; returns a flat record."""
    cmdp = instance.cmdp
    record: dict = {}

    signals: list[int | str] = ["reward"] + list(range(cmdp.n_costs))
    boundary_holds = True
    for sig in signals:
        rep = boundary_report(
            cmdp, instance.model_kernel, instance.policy_old, instance.policy_new, sig
        )
        key = "reward" if sig == "reward" else f"cost{sig}"
        record[f"boundary_{key}"] = rep.to_record()
        boundary_holds = boundary_holds and rep.holds

    lemma = lemma_state_dist_check(
        cmdp, instance.model_kernel, instance.policy_old, instance.policy_new
    )
    record["lemma"] = lemma.to_record()

    e1_ok, e2_ok = error_term_check(
        cmdp, instance.model_kernel, instance.policy_old, instance.policy_new
    )
    record["error_terms_ok"] = bool(e1_ok and e2_ok)
    record["holds"] = bool(boundary_holds and lemma.holds and e1_ok and e2_ok)
    return record
