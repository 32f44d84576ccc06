import numpy as np
import pytest
from scipy import integrate

from cmbpo.dynamics import EnsembleModel, GaussianPrediction, ModelError
from cmbpo.uncertainty import (
    UncertaintyBudget,
    calibrate_budgets,
    disagreement_batch,
    ensemble_disagreement,
    gaussian_kl,
    gaussian_kl_arrays,
    horizon_gate,
    update_mixing,
)

from test_dynamics import perfect_linear_ensemble


def gaussian(mean, var, r_mean=0.0, r_var=1.0):
    return GaussianPrediction(mean=np.atleast_1d(np.asarray(mean, dtype=float)),
                              var=np.atleast_1d(np.asarray(var, dtype=float)),
                              reward_mean=r_mean, reward_var=r_var)


def kl_quadrature(mu_p, var_p, mu_q, var_q):
    sp, sq = np.sqrt(var_p), np.sqrt(var_q)

    def integrand(x):
        log_p = -0.5 * ((x - mu_p) / sp) ** 2 - np.log(sp * np.sqrt(2 * np.pi))
        log_q = -0.5 * ((x - mu_q) / sq) ** 2 - np.log(sq * np.sqrt(2 * np.pi))
        return np.exp(log_p) * (log_p - log_q)

    val, _ = integrate.quad(integrand, mu_p - 12 * sp, mu_p + 12 * sp, limit=200)
    return val


class TestGaussianKl:
    def test_identical_zero(self):
        p = gaussian([0.3, -0.2], [0.5, 1.5])
        assert gaussian_kl(p, p) == 0.0

    def test_unit_variance_mean_shift(self):
        p = gaussian(0.0, 1.0)
        q = gaussian(1.0, 1.0)
        assert gaussian_kl(p, q) == pytest.approx(0.5, abs=1e-12)

    def test_variance_ratio_case(self):
        p = gaussian(0.0, 1.0)
        q = gaussian(0.0, 4.0)
        expected = 0.5 * (np.log(4.0) - 1.0 + 0.25)
        assert gaussian_kl(p, q) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.318147, abs=1e-6)

    def test_against_quadrature(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            mu_p, mu_q = rng.uniform(-3, 3, size=2)
            var_p, var_q = rng.uniform(0.05, 5.0, size=2)
            closed = gaussian_kl(gaussian(mu_p, var_p), gaussian(mu_q, var_q))
            assert abs(closed - kl_quadrature(mu_p, var_p, mu_q, var_q)) < 1e-6

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            mu = rng.uniform(-5, 5, size=(2, 3))
            var = rng.uniform(1e-3, 10, size=(2, 3))
            kl = gaussian_kl_arrays(mu[0], var[0], mu[1], var[1])
            assert kl >= 0.0
            same = np.allclose(mu[0], mu[1]) and np.allclose(var[0], var[1])
            if not same:
                assert kl > 0.0

    def test_rejects_bad_variance(self):
        with pytest.raises(ModelError):
            gaussian_kl_arrays([0.0], [0.0], [0.0], [1.0])


def two_member_ensemble(mu_a, var_a, mu_b, var_b):
    """Hidden-free members with constant (bias-driven) predictions."""
    state_dim = len(np.atleast_1d(mu_a))
    ens = EnsembleModel.create(state_dim, 1, (), 2, 2, 5)
    for member, mu, var in ((ens.members[0], mu_a, var_a),
                            (ens.members[1], mu_b, var_b)):
        weight = np.zeros((state_dim + 1, 2 * state_dim + 2))
        bias = np.zeros(2 * state_dim + 2)
        bias[:state_dim] = mu
        bias[state_dim:2 * state_dim] = np.log(np.expm1(np.asarray(var) - 1e-8))
        member.net.set_flat(np.concatenate([weight.reshape(-1), bias]))
    ens.elite_indices = np.array([0, 1])
    return ens


class TestDisagreement:
    def test_identical_members_zero(self):
        ens = perfect_linear_ensemble(np.ones((1, 2)) * 0.3, n_members=3)
        assert ensemble_disagreement(ens, np.zeros(2), np.zeros(1)) == 0.0

    def test_two_member_symmetrized_kl(self):
        mu_a, var_a = np.array([0.2]), np.array([0.5])
        mu_b, var_b = np.array([-0.4]), np.array([1.25])
        ens = two_member_ensemble(mu_a, var_a, mu_b, var_b)
        d = ensemble_disagreement(ens, np.zeros(1), np.zeros(1))
        kl_ab = gaussian_kl(gaussian(mu_a, var_a), gaussian(mu_b, var_b))
        kl_ba = gaussian_kl(gaussian(mu_b, var_b), gaussian(mu_a, var_a))
        assert d == pytest.approx(0.5 * (kl_ab + kl_ba), rel=1e-9)

    def test_three_member_hand_average(self):
        params = [(0.0, 1.0), (0.5, 2.0), (-0.3, 0.7)]
        state_dim = 1
        ens = EnsembleModel.create(state_dim, 1, (), 3, 3, 5)
        for member, (mu, var) in zip(ens.members, params):
            weight = np.zeros((state_dim + 1, 2 * state_dim + 2))
            bias = np.zeros(2 * state_dim + 2)
            bias[0] = mu
            bias[1] = np.log(np.expm1(var - 1e-8))
            member.net.set_flat(np.concatenate([weight.reshape(-1), bias]))
        ens.elite_indices = np.arange(3)
        d = ensemble_disagreement(ens, np.zeros(1), np.zeros(1))
        total = 0.0
        for i in range(3):
            for j in range(3):
                if i != j:
                    total += gaussian_kl(gaussian(*params[i]), gaussian(*params[j]))
        assert d == pytest.approx(total / 6.0, rel=1e-9)

    def test_single_member_raises(self):
        ens = perfect_linear_ensemble(np.ones((1, 1)), n_members=1)
        with pytest.raises(ModelError):
            ensemble_disagreement(ens, np.zeros(1), np.zeros(1))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        ens = EnsembleModel.create(2, 1, (8,), 4, 4, 6)
        for member in ens.members:
            member.net.set_flat(rng.uniform(-1, 1, member.n_params))
        ens.elite_indices = np.arange(4)
        s, a = np.array([[0.3, -0.1]]), np.array([[0.2]])
        base = disagreement_batch(ens, s, a)[0]
        perm = np.random.default_rng(3).permutation(4)
        ens.members = [ens.members[i] for i in perm]
        assert disagreement_batch(ens, s, a)[0] == pytest.approx(base, rel=1e-12)

    def test_affine_rescaling_invariance(self):
        # scaling all member Gaussians by the same affine map leaves the
        # disagreement unchanged (KL is affine invariant)
        mu_a, var_a = np.array([0.2]), np.array([0.5])
        mu_b, var_b = np.array([-0.4]), np.array([1.25])
        base = gaussian_kl(gaussian(mu_a, var_a), gaussian(mu_b, var_b))
        scale, shift = 3.7, -1.2
        scaled = gaussian_kl(
            gaussian(scale * mu_a + shift, scale**2 * var_a),
            gaussian(scale * mu_b + shift, scale**2 * var_b),
        )
        assert scaled == pytest.approx(base, rel=1e-12)


class TestBudget:
    def test_invariants(self):
        with pytest.raises(ModelError):
            UncertaintyBudget(d_m=0.0, d_h=1.0, alpha=0.5, beta=1.0, alpha0=0.5, h0=5)
        with pytest.raises(ModelError):
            UncertaintyBudget(d_m=1.0, d_h=1.0, alpha=1.5, beta=1.0, alpha0=0.5, h0=5)

    def test_calibration_formulas(self):
        # constant-prediction ensemble: disagreement is the same everywhere,
        # so d_m and d_h follow the closed-form definitions
        mu_a, var_a = np.array([0.2]), np.array([0.5])
        mu_b, var_b = np.array([-0.4]), np.array([1.25])
        ens = two_member_ensemble(mu_a, var_a, mu_b, var_b)
        d0 = ensemble_disagreement(ens, np.zeros(1), np.zeros(1))
        states = np.zeros((30, 1))
        actions = np.zeros((30, 1))

        def act(batch, rng):
            return np.zeros((len(batch), 1))

        budget = calibrate_budgets(ens, states, actions, act, alpha0=0.4, h0=5,
                                   rng=np.random.default_rng(0), n_rollouts=8)
        assert budget.d_m == pytest.approx(0.6 * d0, rel=1e-9)
        assert budget.d_h == pytest.approx(5 * d0, rel=1e-6)
        assert budget.alpha == 0.4

    def test_calibration_empty_buffer(self):
        ens = two_member_ensemble([0.0], [1.0], [1.0], [1.0])
        with pytest.raises(ModelError):
            calibrate_budgets(ens, np.zeros((0, 1)), np.zeros((0, 1)),
                              lambda s, r: s, 0.4, 5, np.random.default_rng(0))


class TestMixing:
    def budget(self, d_m):
        return UncertaintyBudget(d_m=d_m, d_h=1.0, alpha=0.5, beta=1.0,
                                 alpha0=0.5, h0=5, alpha_floor=0.05)

    def test_equality_case(self):
        b = self.budget(0.1)
        assert update_mixing(0.2, b) == pytest.approx(0.5, abs=1e-12)

    def test_slack_gives_floor(self):
        b = self.budget(0.5)
        assert update_mixing(0.2, b) == 0.05

    def test_arithmetic_case(self):
        b = self.budget(0.1)
        assert update_mixing(0.4, b) == pytest.approx(0.75, abs=1e-12)

    def test_constraint_holds_exactly(self):
        rng = np.random.default_rng(4)
        for _ in range(2000):
            d_m = float(rng.uniform(1e-6, 1.0))
            d_bar = float(rng.uniform(0.0, 3.0))
            b = self.budget(d_m)
            alpha = update_mixing(d_bar, b)
            assert (1.0 - alpha) * d_bar <= d_m
            assert 0.05 <= alpha <= 1.0
            assert b.alpha == alpha

    def test_negative_disagreement_rejected(self):
        with pytest.raises(ModelError):
            update_mixing(-0.1, self.budget(0.1))


class TestHorizonGate:
    def budget(self, d_h):
        return UncertaintyBudget(d_m=1.0, d_h=d_h, alpha=0.5, beta=1.0,
                                 alpha0=0.5, h0=5)

    def test_trajectory_length_from_budget(self):
        b = self.budget(1.0)
        cum, steps = 0.0, 0
        while horizon_gate(cum, 0.3, b):
            cum += 0.3
            steps += 1
        assert steps == 3

    def test_zero_uncertainty_always_continues(self):
        b = self.budget(0.5)
        assert horizon_gate(0.5, 0.0, b)

    def test_boundary_inclusive(self):
        b = self.budget(1.0)
        assert not horizon_gate(1.0, 1e-9, b)
        assert horizon_gate(0.7, 0.3, b)
