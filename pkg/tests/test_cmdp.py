import numpy as np
import pytest

from cmbpo.cmdp import (
    CmdpError,
    PolicyTable,
    TabularCMDP,
    divergence_extrema,
    exact_return,
    exact_value_advantage,
    kl_discrete,
    load_cmdp,
    pinsker_bound,
    save_cmdp,
    stationary_distribution,
    tv_distance,
)


def single_state_cmdp(reward=1.0, gamma=0.9):
    P = np.ones((1, 1, 1))
    R = np.full((1, 1, 1), reward)
    C = np.zeros((1, 1, 1))
    return TabularCMDP(transition=P, reward=R, costs=(C,), start_dist=[1.0],
                       discount=gamma, cost_limits=(1.0,))


def random_cmdp(rng, n_states=5, n_actions=3, gamma=0.8, n_costs=1):
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.uniform(-1, 1, size=(n_states, n_actions, n_states))
    costs = tuple(rng.uniform(0, 1, size=(n_states, n_actions, n_states))
                  for _ in range(n_costs))
    mu = rng.dirichlet(np.ones(n_states))
    return TabularCMDP(transition=P, reward=R, costs=costs, start_dist=mu,
                       discount=gamma, cost_limits=tuple([1.0] * n_costs))


def random_policy(rng, n_states, n_actions):
    return PolicyTable(rng.dirichlet(np.ones(n_actions), size=n_states))


class TestConstruction:
    def test_rejects_bad_rows(self):
        P = np.ones((2, 1, 2))  # rows sum to 2
        with pytest.raises(CmdpError):
            TabularCMDP(transition=P, reward=np.zeros_like(P), costs=(),
                        start_dist=[1, 0], discount=0.9)

    def test_rejects_bad_discount(self):
        cmdp = single_state_cmdp()
        with pytest.raises(CmdpError):
            TabularCMDP(transition=cmdp.transition, reward=cmdp.reward,
                        costs=cmdp.costs, start_dist=cmdp.start_dist, discount=1.0)

    def test_normalizes_tiny_drift(self):
        P = np.ones((1, 1, 1)) * (1.0 + 1e-10)
        cmdp = TabularCMDP(transition=P, reward=np.zeros_like(P), costs=(),
                           start_dist=[1.0], discount=0.5)
        assert cmdp.transition[0, 0, 0] == 1.0

    def test_cost_limit_length_mismatch(self):
        c = single_state_cmdp()
        with pytest.raises(CmdpError):
            TabularCMDP(transition=c.transition, reward=c.reward, costs=c.costs,
                        start_dist=c.start_dist, discount=0.9,
                        cost_limits=(1.0, 2.0))


class TestStationaryDistribution:
    def test_single_state(self):
        cmdp = single_state_cmdp()
        policy = PolicyTable([[1.0]])
        d = stationary_distribution(cmdp, policy).d
        assert np.allclose(d, [1.0])

    def test_two_state_cycle(self):
        # deterministic swap; visits alternate 0,1,0,1,... so the discounted
        # weights are geometric series with ratio gamma^2
        P = np.zeros((2, 1, 2))
        P[0, 0, 1] = 1.0
        P[1, 0, 0] = 1.0
        cmdp = TabularCMDP(transition=P, reward=np.zeros_like(P), costs=(),
                           start_dist=[1.0, 0.0], discount=0.5)
        policy = PolicyTable([[1.0], [1.0]])
        d = stationary_distribution(cmdp, policy).d
        assert np.allclose(d, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)

    def test_matches_truncated_series(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            gamma = float(rng.uniform(0.5, 0.9))
            cmdp = random_cmdp(rng, gamma=gamma)
            policy = random_policy(rng, 5, 3)
            d = stationary_distribution(cmdp, policy).d

            K = np.einsum("iaj,ia->ij", cmdp.transition, policy.probs)
            p = cmdp.start_dist.copy()
            series = np.zeros_like(p)
            for t in range(201):
                series += (1 - gamma) * gamma**t * p
                p = K.T @ p
            assert np.max(np.abs(d - series)) < 1e-6

    def test_adaptive_truncation_at_high_discount(self):
        rng = np.random.default_rng(11)
        gamma = 0.95
        cmdp = random_cmdp(rng, gamma=gamma)
        policy = random_policy(rng, 5, 3)
        d = stationary_distribution(cmdp, policy).d
        K = np.einsum("iaj,ia->ij", cmdp.transition, policy.probs)
        horizon = int(np.ceil(np.log(1e-10) / np.log(gamma)))
        p = cmdp.start_dist.copy()
        series = np.zeros_like(p)
        for _ in range(horizon):
            series += (1 - gamma) * p
            p = gamma * (K.T @ p)
        assert np.max(np.abs(d - series)) < 1e-6

    def test_model_kernel_argument(self):
        rng = np.random.default_rng(3)
        cmdp = random_cmdp(rng)
        policy = random_policy(rng, 5, 3)
        other = rng.dirichlet(np.ones(5), size=(5, 3))
        d_true = stationary_distribution(cmdp, policy).d
        d_model = stationary_distribution(cmdp, policy, other).d
        assert not np.allclose(d_true, d_model)
        assert abs(d_model.sum() - 1.0) < 1e-10


class TestExactReturn:
    def test_constant_reward(self):
        cmdp = single_state_cmdp(reward=1.0, gamma=0.9)
        policy = PolicyTable([[1.0]])
        assert exact_return(cmdp, policy) == pytest.approx(10.0, abs=1e-12)

    def test_zero_reward(self):
        cmdp = single_state_cmdp(reward=0.0)
        policy = PolicyTable([[1.0]])
        assert exact_return(cmdp, policy) == 0.0

    def test_invalid_cost_index(self):
        cmdp = single_state_cmdp()
        with pytest.raises(CmdpError):
            exact_return(cmdp, PolicyTable([[1.0]]), signal=3)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(42)
        cmdp = random_cmdp(rng, n_states=4, n_actions=2, gamma=0.8)
        policy = random_policy(rng, 4, 2)
        j = exact_return(cmdp, policy)

        n_traj, horizon = 100_000, 150
        sim = np.random.default_rng(123)
        states = sim.choice(4, size=n_traj, p=cmdp.start_dist)
        returns = np.zeros(n_traj)
        for t in range(horizon):
            u = sim.random(n_traj)
            actions = (policy.probs[states].cumsum(axis=1) < u[:, None]).sum(axis=1)
            u2 = sim.random(n_traj)
            nxt = (cmdp.transition[states, actions].cumsum(axis=1)
                   < u2[:, None]).sum(axis=1)
            returns += cmdp.discount**t * cmdp.reward[states, actions, nxt]
            states = nxt
        se = returns.std() / np.sqrt(n_traj)
        assert abs(j - returns.mean()) < 3 * se + 1e-6


class TestValueAdvantage:
    def test_single_state(self):
        cmdp = single_state_cmdp(reward=1.0, gamma=0.9)
        V, Q, A = exact_value_advantage(cmdp, PolicyTable([[1.0]]))
        assert V[0] == pytest.approx(10.0, abs=1e-10)
        assert np.max(np.abs(A)) < 1e-12

    def test_advantage_zero_mean_and_consistency(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            cmdp = random_cmdp(rng)
            policy = random_policy(rng, 5, 3)
            V, Q, A = exact_value_advantage(cmdp, policy)
            assert np.max(np.abs(np.einsum("sa,sa->s", policy.probs, A))) < 1e-10
            assert np.max(np.abs(V - np.einsum("sa,sa->s", policy.probs, Q))) < 1e-10

    def test_return_difference_identity(self):
        # J(pi') - J(pi) = 1/(1-g) E_{d^{pi'}, pi'}[A^pi]
        rng = np.random.default_rng(17)
        for _ in range(100):
            cmdp = random_cmdp(rng, n_states=4, n_actions=3,
                               gamma=float(rng.uniform(0.5, 0.95)))
            pi = random_policy(rng, 4, 3)
            pi_new = random_policy(rng, 4, 3)
            _, _, A = exact_value_advantage(cmdp, pi)
            d_new = stationary_distribution(cmdp, pi_new).d
            lhs = exact_return(cmdp, pi_new) - exact_return(cmdp, pi)
            rhs = float(d_new @ np.einsum("sa,sa->s", pi_new.probs, A)) / (1 - cmdp.discount)
            assert abs(lhs - rhs) < 1e-9


class TestDivergences:
    def test_tv_cases(self):
        assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
        assert tv_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
        assert tv_distance([0.5, 0.5], [0.75, 0.25]) == pytest.approx(0.25)
        with pytest.raises(CmdpError):
            tv_distance([0.5, 0.5], [1.0])

    def test_kl_cases(self):
        assert kl_discrete([0.5, 0.5], [0.5, 0.5]) == 0.0
        assert kl_discrete([0.5, 0.5], [0.9, 0.1]) == pytest.approx(0.51083, abs=1e-4)
        assert kl_discrete([0.5, 0.5], [1.0, 0.0]) == float("inf")
        assert pinsker_bound(0.0) == 0.0

    def test_pinsker_inequality(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(2, 6))
            p = rng.dirichlet(np.ones(n))
            q = rng.dirichlet(np.ones(n))
            assert tv_distance(p, q) <= pinsker_bound(kl_discrete(p, q)) + 1e-12

    def test_divergence_extrema(self):
        rng = np.random.default_rng(9)
        cmdp = random_cmdp(rng)
        pi = random_policy(rng, 5, 3)
        pi2 = random_policy(rng, 5, 3)
        P_m = rng.dirichlet(np.ones(5), size=(5, 3))
        eps_pi, eps_m = divergence_extrema(pi2, pi, cmdp.transition, P_m)
        brute_pi = max(tv_distance(pi2.probs[s], pi.probs[s]) for s in range(5))
        brute_m = max(tv_distance(cmdp.transition[s, a], P_m[s, a])
                      for s in range(5) for a in range(3))
        assert eps_pi == pytest.approx(brute_pi, abs=1e-14)
        assert eps_m == pytest.approx(brute_m, abs=1e-14)
        assert divergence_extrema(pi, pi, cmdp.transition, cmdp.transition) == (0.0, 0.0)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(21)
        cmdp = random_cmdp(rng, n_costs=2)
        path = tmp_path / "fixture.cmdp"
        save_cmdp(cmdp, str(path))
        loaded = load_cmdp(str(path))
        assert np.array_equal(loaded.transition, cmdp.transition)
        assert np.array_equal(loaded.reward, cmdp.reward)
        assert all(np.array_equal(a, b) for a, b in zip(loaded.costs, cmdp.costs))
        assert np.array_equal(loaded.start_dist, cmdp.start_dist)
        assert loaded.discount == cmdp.discount
        assert loaded.cost_limits == cmdp.cost_limits
