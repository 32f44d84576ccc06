"""Finite constrained MDPs and exact discounted quantities.

Everything in this module is computed by dense linear algebra (no sampling,
no iteration-to-convergence), so the results can serve as ground truth for
the rest of the package.  State spaces are small (tens of states), which
makes the O(|S|^3) solves negligible.

Conventions:
    transition[s, a, s']   probability of landing in s' from (s, a)
    reward[s, a, s']       scalar signal on the transition
    policy[s, a]           probability of action a in state s
    d[s]                   discounted stationary state weight, sums to 1
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_ATOL = 1e-12
NORMALIZE_ATOL = 1e-9
SOLVE_RESIDUAL_TOL = 1e-8


class CmdpError(ValueError):
    """Invalid CMDP construction or query."""


def _check_rows(name: str, rows: np.ndarray) -> np.ndarray:
    """Validate probability rows; renormalize tiny drift, reject real errors.

    Rows within NORMALIZE_ATOL of a valid distribution are rescaled (guards
    against accumulated float drift in randomized generators); anything worse
    is rejected outright rather than silently normalized.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if np.any(rows < -PROB_ATOL):
        raise CmdpError(f"{name}: negative probability entry")
    sums = rows.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > NORMALIZE_ATOL):
        raise CmdpError(f"{name}: row sums deviate from 1 by more than {NORMALIZE_ATOL}")
    if np.any(rows < 0.0) or np.any(np.abs(sums - 1.0) > PROB_ATOL):
        rows = np.clip(rows, 0.0, None)
        rows = rows / rows.sum(axis=-1, keepdims=True)
    return rows


@dataclass(frozen=True)
class TabularCMDP:
    """Finite CMDP: transition/reward/cost tensors plus start distribution.

    Costs are stored exactly like rewards, one (S, A, S) tensor per cost
    signal, with one scalar limit per signal.
    """

    transition: np.ndarray
    reward: np.ndarray
    costs: tuple[np.ndarray, ...]
    start_dist: np.ndarray
    discount: float
    cost_limits: tuple[float, ...] = ()

    def __post_init__(self):
        P = _check_rows("transition", self.transition)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise CmdpError("transition must have shape (S, A, S)")
        r = np.asarray(self.reward, dtype=np.float64)
        if r.shape != P.shape:
            raise CmdpError("reward tensor shape must match transition")
        costs = tuple(np.asarray(c, dtype=np.float64) for c in self.costs)
        for c in costs:
            if c.shape != P.shape:
                raise CmdpError("cost tensor shape must match transition")
        mu = _check_rows("start_dist", self.start_dist)
        if mu.shape != (P.shape[0],):
            raise CmdpError("start_dist must have one entry per state")
        if not (0.0 < self.discount < 1.0):
            raise CmdpError("discount must lie strictly inside (0, 1)")
        limits = tuple(float(d) for d in self.cost_limits)
        if limits and len(limits) != len(costs):
            raise CmdpError("cost_limits and costs must have equal length")
        if not limits:
            limits = tuple(0.0 for _ in costs)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "start_dist", mu)
        object.__setattr__(self, "cost_limits", limits)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_costs(self) -> int:
        return len(self.costs)

    def signal(self, which: int | str) -> np.ndarray:
        """Resolve a signal selector: 'reward' or a cost index."""
        if which == "reward":
            return self.reward
        idx = int(which)
        if not 0 <= idx < len(self.costs):
            raise CmdpError(f"cost index {idx} out of range")
        return self.costs[idx]


@dataclass(frozen=True)
class PolicyTable:
    """Stochastic tabular policy, probs[s, a]."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _check_rows("policy", self.probs))
        if self.probs.ndim != 2:
            raise CmdpError("policy must have shape (S, A)")

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class StateDistribution:
    """Probability vector over states."""

    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        if np.any(d < -PROB_ATOL) or abs(d.sum() - 1.0) > 1e-9:
            raise CmdpError("state distribution must be nonnegative and sum to 1")
        object.__setattr__(self, "d", d)


def policy_kernel(policy: PolicyTable, kernel: np.ndarray) -> np.ndarray:
    """State-to-state matrix K[i, j] = sum_a kernel[i, a, j] * pi(a | i)."""
    return np.einsum("iaj,ia->ij", kernel, policy.probs)


def stationary_distribution(
    cmdp: TabularCMDP, policy: PolicyTable, kernel: np.ndarray | None = None
) -> StateDistribution:
    """Discounted stationary state distribution d = (1-g) sum_t g^t p_t.

    Solved exactly from (I - g * K^T) d = (1 - g) mu, where K is the
    state-to-state kernel under the policy.  `kernel` may be the true
    transition tensor or a model kernel; defaults to the true one.
    """
    P = cmdp.transition if kernel is None else _check_rows("kernel", kernel)
    K = policy_kernel(policy, P)
    g = cmdp.discount
    mu = cmdp.start_dist
    A = np.eye(cmdp.n_states) - g * K.T
    d = np.linalg.solve(A, (1.0 - g) * mu)
    residual = np.max(np.abs(A @ d - (1.0 - g) * mu))
    if residual > SOLVE_RESIDUAL_TOL:
        raise CmdpError(f"stationary distribution solve residual {residual:.3e}")
    return StateDistribution(d)


def exact_value_advantage(
    cmdp: TabularCMDP,
    policy: PolicyTable,
    kernel: np.ndarray | None = None,
    signal: int | str = "reward",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact (V, Q, A) for a signal under (policy, kernel).

    V solves the Bellman system (I - g K) V = r_pi; then
    Q[s, a] = sum_s' kernel[s, a, s'] (signal + g V[s']) and A = Q - V.
    """
    P = cmdp.transition if kernel is None else _check_rows("kernel", kernel)
    sig = cmdp.signal(signal)
    g = cmdp.discount
    K = policy_kernel(policy, P)
    r_sa = np.einsum("iaj,iaj->ia", P, sig)
    r_pi = np.einsum("ia,ia->i", r_sa, policy.probs)
    A_mat = np.eye(cmdp.n_states) - g * K
    V = np.linalg.solve(A_mat, r_pi)
    residual = np.max(np.abs(A_mat @ V - r_pi))
    if residual > SOLVE_RESIDUAL_TOL:
        raise CmdpError(f"Bellman solve residual {residual:.3e}")
    Q = r_sa + g * np.einsum("iaj,j->ia", P, V)
    return V, Q, Q - V[:, None]


def exact_return(
    cmdp: TabularCMDP,
    policy: PolicyTable,
    kernel: np.ndarray | None = None,
    signal: int | str = "reward",
) -> float:
    """Exact discounted return J = 1/(1-g) E_{d, pi, kernel}[signal]."""
    P = cmdp.transition if kernel is None else _check_rows("kernel", kernel)
    sig = cmdp.signal(signal)
    d = stationary_distribution(cmdp, policy, P).d
    per_state = np.einsum("iaj,iaj,ia->i", P, sig, policy.probs)
    return float(d @ per_state / (1.0 - cmdp.discount))


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total variation distance, half the L1 distance; in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise CmdpError("tv_distance: length mismatch")
    return float(0.5 * np.abs(p - q).sum())


def kl_discrete(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with the 0 log 0 = 0 convention.

    Absolute-continuity violations (p > 0 where q = 0) are signaled as
    +inf rather than raising, so callers can treat them as a divergence.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise CmdpError("kl_discrete: length mismatch")
    support = p > 0.0
    if np.any(q[support] <= 0.0):
        return float("inf")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def pinsker_bound(kl: float) -> float:
    """Upper bound on TV from KL: sqrt(KL / 2)."""
    return float(np.sqrt(max(kl, 0.0) / 2.0))


def divergence_extrema(
    policy_new: PolicyTable,
    policy_old: PolicyTable,
    kernel_true: np.ndarray,
    kernel_model: np.ndarray,
) -> tuple[float, float]:
    """Worst-case row TVs: (eps_pi over states, eps_m over state-action pairs)."""
    if policy_new.probs.shape != policy_old.probs.shape:
        raise CmdpError("divergence_extrema: policy shape mismatch")
    if kernel_true.shape != kernel_model.shape:
        raise CmdpError("divergence_extrema: kernel shape mismatch")
    eps_pi = 0.5 * np.abs(policy_new.probs - policy_old.probs).sum(axis=1).max()
    eps_m = 0.5 * np.abs(np.asarray(kernel_true) - np.asarray(kernel_model)).sum(axis=2).max()
    return float(eps_pi), float(eps_m)


# ---------------------------------------------------------------------------
# Plain-text serialization (fixture reuse across tools)
# ---------------------------------------------------------------------------

def save_cmdp(cmdp: TabularCMDP, path: str) -> None:
    """Write a CMDP in the documented plain-text matrix format.

    Layout (whitespace separated, '#' comments allowed):
        n_states n_actions n_costs
        discount
        cost_limits            (n_costs floats; line omitted when n_costs=0)
        start_dist             (n_states floats)
        transition rows        (n_states*n_actions lines of n_states floats,
                                row-major in (s, a))
        reward rows            (same shape)
        cost_i rows            (same shape, for each cost signal)
    """
    S, A = cmdp.n_states, cmdp.n_actions
    lines = ["# tabular cmdp v1"]
    lines.append(f"{S} {A} {cmdp.n_costs}")
    lines.append(repr(float(cmdp.discount)))
    if cmdp.n_costs:
        lines.append(" ".join(repr(float(x)) for x in cmdp.cost_limits))
    lines.append(" ".join(repr(float(x)) for x in cmdp.start_dist))

    def tensor_rows(t):
        for s in range(S):
            for a in range(A):
                yield " ".join(repr(float(x)) for x in t[s, a])

    lines.extend(tensor_rows(cmdp.transition))
    lines.extend(tensor_rows(cmdp.reward))
    for c in cmdp.costs:
        lines.extend(tensor_rows(c))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cmdp(path: str) -> TabularCMDP:
    """Parse the plain-text matrix format written by save_cmdp."""
    with open(path) as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    it = iter(tokens)

    def take(n):
        return [next(it) for _ in range(n)]

    S, A, C = (int(x) for x in take(3))
    discount = float(next(it))
    limits = tuple(float(x) for x in take(C))
    mu = np.array([float(x) for x in take(S)])

    def tensor():
        flat = np.array([float(x) for x in take(S * A * S)])
        return flat.reshape(S, A, S)

    P = tensor()
    r = tensor()
    costs = tuple(tensor() for _ in range(C))
    return TabularCMDP(
        transition=P, reward=r, costs=costs, start_dist=mu,
        discount=discount, cost_limits=limits,
    )
