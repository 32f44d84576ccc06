"""Stochastic policies and value functions for trust-region updates.

Both policy flavors expose the same flat-parameter interface the optimizer
needs: sampling, log-probabilities, measured mean KL against a parameter
snapshot, exact Fisher-vector products, and advantage-weighted score
gradients.  States always arrive as feature vectors (one-hot rows for
tabular tasks), so the optimizer code is identical for both.

Fisher-vector products are exact at the current parameters: for these
distribution families the Hessian of the state-averaged KL between the
frozen and the live policy equals the Fisher information, which factors
through the network Jacobian (Gauss-Newton form) because the KL gradient
in distribution space vanishes at equal parameters.
"""

from __future__ import annotations

import numpy as np

from .nets import Adam, Mlp

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0


class GaussianMlpPolicy:
    """Diagonal Gaussian with an MLP mean and state-independent log-std."""

    def __init__(self, state_dim: int, action_dim: int, hidden: tuple[int, ...],
                 rng: np.random.Generator, init_log_std: float = -0.5):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.net = Mlp(state_dim, hidden, action_dim, rng)
        self.log_std = np.full(action_dim, float(init_log_std))

    # -- parameters -------------------------------------------------------
    @property
    def n_params(self) -> int:
        return self.net.n_params + self.action_dim

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.net.get_flat(), self.log_std])

    def set_flat(self, theta: np.ndarray) -> None:
        self.net.set_flat(theta[: self.net.n_params])
        self.log_std = theta[self.net.n_params:].copy()

    def snapshot(self) -> np.ndarray:
        return self.get_flat()

    def _dist(self, states: np.ndarray, flat: np.ndarray | None = None):
        if flat is None:
            mu, cache = self.net.forward(states)
            raw = self.log_std
        else:
            mu, cache = self.net.forward(states, flat=flat[: self.net.n_params])
            raw = flat[self.net.n_params:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std, cache, raw

    # -- distribution interface --------------------------------------------
    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mu, log_std, _, _ = self._dist(np.atleast_2d(states))
        return mu + np.exp(log_std) * rng.standard_normal(mu.shape)

    def log_probs(self, states: np.ndarray, actions: np.ndarray,
                  flat: np.ndarray | None = None) -> np.ndarray:
        mu, log_std, _, _ = self._dist(np.atleast_2d(states), flat)
        var = np.exp(2.0 * log_std)
        actions = np.atleast_2d(actions)
        return -0.5 * np.sum(
            (actions - mu) ** 2 / var + 2.0 * log_std + np.log(2.0 * np.pi), axis=1
        )

    def mean_kl(self, states: np.ndarray, old_flat: np.ndarray) -> float:
        """Batch-averaged KL(current || snapshot)."""
        return self.kl_between(self.get_flat(), old_flat, states)

    def kl_between(self, flat_p: np.ndarray, flat_q: np.ndarray,
                   states: np.ndarray) -> float:
        states = np.atleast_2d(states)
        mu_p, ls_p, _, _ = self._dist(states, flat_p)
        mu_q, ls_q, _, _ = self._dist(states, flat_q)
        var_p, var_q = np.exp(2.0 * ls_p), np.exp(2.0 * ls_q)
        kl = np.sum(
            ls_q - ls_p + (var_p + (mu_p - mu_q) ** 2) / (2.0 * var_q) - 0.5, axis=1
        )
        return float(kl.mean())

    # -- optimizer hooks ----------------------------------------------------
    def fisher_vector_product(self, states: np.ndarray, v: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        mu, log_std, cache, raw = self._dist(states)
        var = np.exp(2.0 * log_std)
        v_net, v_ls = v[: self.net.n_params], v[self.net.n_params:]
        jv = self.net.jvp(cache, v_net)
        g_net = self.net.backward(cache, jv / var / len(states))
        # per-dimension Fisher for log-std is the constant 2; clamped
        # dimensions contribute nothing
        active = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
        g_ls = 2.0 * v_ls * active
        return np.concatenate([g_net, g_ls])

    def weighted_logprob_grad(self, states: np.ndarray, actions: np.ndarray,
                              weights: np.ndarray) -> np.ndarray:
        """(1/B) sum_i w_i grad log pi(a_i | s_i) as a flat vector."""
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        mu, log_std, cache, raw = self._dist(states)
        var = np.exp(2.0 * log_std)
        n = len(states)
        dmu = weights[:, None] * (actions - mu) / var / n
        g_net = self.net.backward(cache, dmu)
        active = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
        g_ls = (weights[:, None] * ((actions - mu) ** 2 / var - 1.0)).sum(axis=0) / n
        return np.concatenate([g_net, g_ls * active])


class SoftmaxTablePolicy:
    """Tabular softmax policy; states are one-hot feature rows."""

    def __init__(self, n_states: int, n_actions: int,
                 rng: np.random.Generator | None = None, init_scale: float = 0.0):
        self.n_states = n_states
        self.n_actions = n_actions
        if rng is None or init_scale == 0.0:
            self.logits = np.zeros((n_states, n_actions))
        else:
            self.logits = init_scale * rng.standard_normal((n_states, n_actions))

    @property
    def n_params(self) -> int:
        return self.n_states * self.n_actions

    def get_flat(self) -> np.ndarray:
        return self.logits.reshape(-1).copy()

    def set_flat(self, theta: np.ndarray) -> None:
        self.logits = theta.reshape(self.n_states, self.n_actions).copy()

    def snapshot(self) -> np.ndarray:
        return self.get_flat()

    @staticmethod
    def _softmax(logits: np.ndarray) -> np.ndarray:
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def probs_table(self, flat: np.ndarray | None = None) -> np.ndarray:
        logits = self.logits if flat is None else flat.reshape(self.n_states, self.n_actions)
        return self._softmax(logits)

    @staticmethod
    def state_index(states: np.ndarray) -> np.ndarray:
        return np.argmax(np.atleast_2d(states), axis=1)

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        p = self.probs_table()[self.state_index(states)]
        u = rng.random(len(p))
        return (p.cumsum(axis=1) < u[:, None]).sum(axis=1)

    def log_probs(self, states: np.ndarray, actions: np.ndarray,
                  flat: np.ndarray | None = None) -> np.ndarray:
        logits = self.logits if flat is None else flat.reshape(self.n_states, self.n_actions)
        idx = self.state_index(states)
        z = logits[idx]
        logp = z - _logsumexp(z)
        actions = np.asarray(actions, dtype=int).reshape(-1)
        return logp[np.arange(len(idx)), actions]

    def mean_kl(self, states: np.ndarray, old_flat: np.ndarray) -> float:
        return self.kl_between(self.get_flat(), old_flat, states)

    def kl_between(self, flat_p: np.ndarray, flat_q: np.ndarray,
                   states: np.ndarray) -> float:
        idx = self.state_index(states)
        p = self.probs_table(flat_p)[idx]
        q = self.probs_table(flat_q)[idx]
        kl = np.sum(np.where(p > 0.0, p * (np.log(np.maximum(p, 1e-300)) -
                                           np.log(np.maximum(q, 1e-300))), 0.0), axis=1)
        return float(kl.mean())

    def fisher_vector_product(self, states: np.ndarray, v: np.ndarray) -> np.ndarray:
        idx = self.state_index(states)
        counts = np.bincount(idx, minlength=self.n_states).astype(np.float64)
        counts /= len(idx)
        p = self.probs_table()
        vm = v.reshape(self.n_states, self.n_actions)
        # per-state Fisher block: diag(p) - p p^T, weighted by visit frequency
        out = counts[:, None] * (p * vm - p * (p * vm).sum(axis=1, keepdims=True))
        return out.reshape(-1)

    def weighted_logprob_grad(self, states: np.ndarray, actions: np.ndarray,
                              weights: np.ndarray) -> np.ndarray:
        idx = self.state_index(states)
        actions = np.asarray(actions, dtype=int).reshape(-1)
        p = self.probs_table()
        grad = np.zeros_like(p)
        np.add.at(grad, (idx, actions), weights)
        np.add.at(grad, idx, -weights[:, None] * p[idx])
        return grad.reshape(-1) / len(idx)


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


class ValueFunction:
    """MLP state-value regressor with a persistent Adam state."""

    def __init__(self, state_dim: int, hidden: tuple[int, ...],
                 rng: np.random.Generator, learn_rate: float = 3e-4):
        self.net = Mlp(state_dim, hidden, 1, rng)
        self.opt = Adam(self.net.n_params, lr=learn_rate)

    def predict(self, states: np.ndarray) -> np.ndarray:
        out, _ = self.net.forward(np.atleast_2d(states))
        return out[:, 0]

    def loss(self, states: np.ndarray, targets: np.ndarray) -> float:
        return float(np.mean((self.predict(states) - targets) ** 2))

    def train_step(self, states: np.ndarray, targets: np.ndarray) -> float:
        out, cache = self.net.forward(np.atleast_2d(states))
        err = out[:, 0] - targets
        loss = float(np.mean(err**2))
        grad = self.net.backward(cache, (2.0 * err / len(err))[:, None])
        self.opt.step(self.net.flat, grad)
        return loss
