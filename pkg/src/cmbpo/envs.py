"""Desk-scale constrained tasks.

Two environments mirror the reward/cost structure of constrained
locomotion benchmarks without any physics engine:

  * hazard gridworld: progress reward toward the right edge, binary cost
    on cells bordering a hazard wall, absorbing hazards and goal column.
    Emitted as a TabularCMDP so every exact-analysis tool applies.
  * point circle: a 2-D double integrator rewarded for tangential speed
    along a target circle, with a binary cost outside a vertical corridor
    whose half-width is narrower than the circle.

Both expose deterministic per-state cost and termination callables for
model rollouts, plus feature/snap adapters so the same training loop
drives tabular and continuous policies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .cmdp import PolicyTable, TabularCMDP, exact_return


@dataclass(frozen=True)
class EnvSpec:
    kind: str = "point_circle"
    episode_horizon: int = 400
    cost_limit: float = 10.0
    seed: int = 0
    # gridworld geometry
    grid_size: int = 5
    slip_prob: float = 0.1
    discount: float = 0.95
    hazards: tuple[tuple[int, int], ...] | None = None
    start_cell: tuple[int, int] | None = None
    # point-circle geometry
    circle_radius: float = 1.0
    corridor_half_width: float = 0.6
    accel_limit: float = 1.0
    speed_limit: float = 2.0
    dt: float = 0.1
    control_cost: float = 0.5
    start_noise: float = 0.01

    def __post_init__(self):
        if self.kind not in ("gridworld", "point_circle"):
            raise ValueError(f"unknown environment kind: {self.kind}")
        if self.episode_horizon < 1:
            raise ValueError("episode_horizon must be >= 1")
        if self.kind == "gridworld" and self.grid_size < 1:
            raise ValueError("grid_size must be positive")
        if self.kind == "point_circle" and (
            self.circle_radius <= 0 or self.corridor_half_width <= 0
            or self.accel_limit <= 0 or self.dt <= 0
        ):
            raise ValueError("point_circle geometry parameters must be positive")


# ---------------------------------------------------------------------------
# Hazard gridworld
# ---------------------------------------------------------------------------

# up, down, left, right
_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
_PERPENDICULAR = {0: (2, 3), 1: (2, 3), 2: (0, 1), 3: (0, 1)}


def _default_hazards(n: int) -> tuple[tuple[int, int], ...]:
    """A wall on the second-to-last row spanning the interior columns.

    The row above it is the fast lane (every cell borders a hazard); the
    rows further up are cost-free but one step longer to traverse.
    """
    if n < 3:
        return ()
    row = n - 2
    return tuple((row, col) for col in range(1, n - 1))


def hazard_gridworld(spec: EnvSpec) -> TabularCMDP:
    """Build the gridworld as a TabularCMDP.

    Reward is the signed column progress of each transition; cost is 1
    whenever the landing cell is a hazard or borders one.  Hazards and the
    right edge column are absorbing.
    """
    n = spec.grid_size
    n_states = n * n
    hazards = set(_default_hazards(n) if spec.hazards is None else spec.hazards)
    for r, c in hazards:
        if not (0 <= r < n and 0 <= c < n):
            raise ValueError("hazard cell outside the grid")
    goal_cells = {(r, n - 1) for r in range(n)} - hazards if n > 1 else set()
    terminal = hazards | goal_cells

    def near_hazard(cell):
        r, c = cell
        return any(
            (r + dr, c + dc) in hazards for dr, dc in _MOVES
        )

    def idx(cell):
        return cell[0] * n + cell[1]

    P = np.zeros((n_states, 4, n_states))
    R = np.zeros((n_states, 4, n_states))
    C = np.zeros((n_states, 4, n_states))
    for r in range(n):
        for c in range(n):
            s = idx((r, c))
            if (r, c) in terminal:
                P[s, :, s] = 1.0
                continue
            for a in range(4):
                outcomes = [(a, 1.0 - spec.slip_prob)]
                for side in _PERPENDICULAR[a]:
                    outcomes.append((side, spec.slip_prob / 2.0))
                for move, prob in outcomes:
                    if prob == 0.0:
                        continue
                    dr, dc = _MOVES[move]
                    nr, nc = r + dr, c + dc
                    if not (0 <= nr < n and 0 <= nc < n):
                        nr, nc = r, c
                    sp = idx((nr, nc))
                    P[s, a, sp] += prob
                    R[s, a, sp] = nc - c
                    C[s, a, sp] = 1.0 if ((nr, nc) in hazards or near_hazard((nr, nc))) else 0.0

    start = spec.start_cell or (n // 2, 0)
    if start in terminal:
        raise ValueError("start cell must not be terminal")
    mu = np.zeros(n_states)
    mu[idx(start)] = 1.0
    return TabularCMDP(
        transition=P, reward=R, costs=(C,), start_dist=mu,
        discount=spec.discount, cost_limits=(spec.cost_limit,),
    )


class GridworldEnv:
    """Sampling adapter over the tabular CMDP with one-hot state features."""

    kind = "gridworld"
    cost_accounting = "discounted"

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.cmdp = hazard_gridworld(spec)
        n = spec.grid_size
        self.n_states = self.cmdp.n_states
        self.n_actions = self.cmdp.n_actions
        self.state_dim = self.n_states
        self.action_dim = 1  # discrete index
        self.discrete = True
        self.horizon = spec.episode_horizon
        self.cost_limit = spec.cost_limit
        hazards = set(_default_hazards(n) if spec.hazards is None else spec.hazards)
        goal_cells = {(r, n - 1) for r in range(n)} - hazards if n > 1 else set()
        terminal = np.zeros(self.n_states, dtype=bool)
        landing_cost = np.zeros(self.n_states)
        for r in range(n):
            for c in range(n):
                s = r * n + c
                terminal[s] = (r, c) in hazards or (r, c) in goal_cells
                near = any((r + dr, c + dc) in hazards for dr, dc in _MOVES)
                landing_cost[s] = 1.0 if ((r, c) in hazards or near) else 0.0
        self._terminal = terminal
        self._landing_cost = landing_cost

    def featurize(self, s: int) -> np.ndarray:
        feat = np.zeros(self.n_states)
        feat[s] = 1.0
        return feat

    def snap(self, states: np.ndarray) -> np.ndarray:
        """Project model-predicted vectors onto the nearest one-hot state."""
        states = np.atleast_2d(states)
        out = np.zeros_like(states)
        out[np.arange(len(states)), np.argmax(states, axis=1)] = 1.0
        return out

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        s = int(rng.choice(self.n_states, p=self.cmdp.start_dist))
        return self.featurize(s)

    def step(self, state: np.ndarray, action: int, rng: np.random.Generator):
        s = int(np.argmax(state))
        a = int(action)
        p = self.cmdp.transition[s, a]
        sp = int(rng.choice(self.n_states, p=p))
        r = float(self.cmdp.reward[s, a, sp])
        c = float(self.cmdp.costs[0][s, a, sp])
        done = bool(self._terminal[sp])
        return self.featurize(sp), r, c, done

    def cost_fn(self, next_states: np.ndarray) -> np.ndarray:
        idx = np.argmax(np.atleast_2d(next_states), axis=1)
        return self._landing_cost[idx]

    def term_fn(self, next_states: np.ndarray) -> np.ndarray:
        idx = np.argmax(np.atleast_2d(next_states), axis=1)
        return self._terminal[idx]


# ---------------------------------------------------------------------------
# Point circle
# ---------------------------------------------------------------------------

class PointCircleEnv:
    """Double-integrator point mass rewarded for circling, cost off-corridor.

    State (x, y, vx, vy).  Acceleration actions are clipped to the box
    [-accel_limit, accel_limit]^2; velocity components saturate at
    speed_limit.  Reward is the tangential velocity around the origin,
    weighted down with distance from the target circle, minus a control
    penalty on the clipped action.  Cost is 1 whenever |x| leaves the
    corridor.  Dynamics are deterministic; only reset noise is random.
    """

    kind = "point_circle"
    cost_accounting = "episode"

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.state_dim = 4
        self.action_dim = 2
        self.discrete = False
        self.horizon = spec.episode_horizon
        self.cost_limit = spec.cost_limit

    def snap(self, states: np.ndarray) -> np.ndarray:
        return states

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        state = np.array([0.0, self.spec.circle_radius, 0.0, 0.0])
        state[:2] += self.spec.start_noise * rng.standard_normal(2)
        return state

    def _reward(self, state: np.ndarray, action: np.ndarray) -> float:
        x, y, vx, vy = state
        norm = max(float(np.hypot(x, y)), 1e-6)
        tangential = (-y * vx + x * vy) / norm
        attraction = 1.0 + abs(norm - self.spec.circle_radius)
        return float(tangential / attraction
                     - self.spec.control_cost * 0.5 * float(action @ action))

    def step(self, state: np.ndarray, action: np.ndarray,
             rng: np.random.Generator | None = None):
        a = np.clip(np.asarray(action, dtype=np.float64),
                    -self.spec.accel_limit, self.spec.accel_limit)
        v = np.clip(state[2:] + a * self.spec.dt,
                    -self.spec.speed_limit, self.spec.speed_limit)
        p = state[:2] + v * self.spec.dt
        next_state = np.concatenate([p, v])
        reward = self._reward(next_state, a)
        cost = float(self.cost_fn(next_state[None, :])[0])
        return next_state, reward, cost, False

    def cost_fn(self, next_states: np.ndarray) -> np.ndarray:
        next_states = np.atleast_2d(next_states)
        return (np.abs(next_states[:, 0]) > self.spec.corridor_half_width).astype(np.float64)

    def term_fn(self, next_states: np.ndarray) -> np.ndarray:
        return np.zeros(len(np.atleast_2d(next_states)), dtype=bool)


def make_env(spec: EnvSpec):
    if spec.kind == "gridworld":
        return GridworldEnv(spec)
    return PointCircleEnv(spec)


# ---------------------------------------------------------------------------
# Exact constrained optima (gridworld oracles)
# ---------------------------------------------------------------------------

def constrained_optimum_lp(cmdp: TabularCMDP, cost_limit: float | None = None):
    """Exact constrained optimum over all stationary stochastic policies.

    Linear program on discounted occupancy measures x(s, a):
        max  sum x r_bar / (1-g)
        s.t. sum_a x(s', a) - g sum_{s,a} P(s'|s,a) x(s,a) = (1-g) mu(s')
             sum x c_bar / (1-g) <= d_c,   x >= 0
    Returns (J*, Jc*, greedy PolicyTable recovered from x).
    """
    S, A = cmdp.n_states, cmdp.n_actions
    g = cmdp.discount
    d_c = cmdp.cost_limits[0] if cost_limit is None else float(cost_limit)
    r_bar = np.einsum("saj,saj->sa", cmdp.transition, cmdp.reward).reshape(-1)
    c_bar = np.einsum("saj,saj->sa", cmdp.transition, cmdp.costs[0]).reshape(-1)

    a_eq = np.zeros((S, S * A))
    for s in range(S):
        for a in range(A):
            col = s * A + a
            a_eq[s, col] += 1.0
            a_eq[:, col] -= g * cmdp.transition[s, a]
    b_eq = (1.0 - g) * cmdp.start_dist

    res = optimize.linprog(
        -r_bar,
        A_ub=c_bar[None, :], b_ub=[d_c * (1.0 - g)],
        A_eq=a_eq, b_eq=b_eq,
        bounds=[(0.0, None)] * (S * A),
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"constrained LP failed: {res.message}")
    x = res.x.reshape(S, A)
    occupancy = x.sum(axis=1)
    probs = np.where(
        occupancy[:, None] > 1e-12, x / np.maximum(occupancy[:, None], 1e-12), 1.0 / A
    )
    policy = PolicyTable(probs / probs.sum(axis=1, keepdims=True))
    j_star = float(r_bar @ res.x / (1.0 - g))
    jc_star = float(c_bar @ res.x / (1.0 - g))
    return j_star, jc_star, policy


def enumerate_deterministic_optimum(cmdp: TabularCMDP, cost_limit: float | None = None,
                                    max_policies: int = 2_000_000):
    """Brute-force constrained optimum over deterministic policies.

    Feasible only for tiny instances; raises once A**S exceeds max_policies.
    Returns (J*, Jc at the optimum, best deterministic PolicyTable) or
    (None, None, None) when no deterministic policy is feasible.
    """
    S, A = cmdp.n_states, cmdp.n_actions
    total = A**S
    if total > max_policies:
        raise ValueError(f"{total} deterministic policies exceed the enumeration cap")
    d_c = cmdp.cost_limits[0] if cost_limit is None else float(cost_limit)
    best = (None, None, None)
    assignment = np.zeros(S, dtype=int)
    probs = np.zeros((S, A))
    for code in range(total):
        k = code
        for s in range(S):
            assignment[s] = k % A
            k //= A
        probs[:] = 0.0
        probs[np.arange(S), assignment] = 1.0
        policy = PolicyTable(probs)
        jc = exact_return(cmdp, policy, None, 0)
        if jc <= d_c + 1e-9:
            j = exact_return(cmdp, policy, None, "reward")
            if best[0] is None or j > best[0]:
                best = (j, jc, PolicyTable(probs.copy()))
    return best


def unconstrained_optimum(cmdp: TabularCMDP, tol: float = 1e-10):
    """Greedy-reward optimum by value iteration; returns (J*, PolicyTable)."""
    S, A = cmdp.n_states, cmdp.n_actions
    g = cmdp.discount
    r_bar = np.einsum("saj,saj->sa", cmdp.transition, cmdp.reward)
    v = np.zeros(S)
    while True:
        q = r_bar + g * np.einsum("saj,j->sa", cmdp.transition, v)
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            break
        v = v_new
    probs = np.zeros((S, A))
    probs[np.arange(S), q.argmax(axis=1)] = 1.0
    policy = PolicyTable(probs)
    return exact_return(cmdp, policy, None, "reward"), policy
