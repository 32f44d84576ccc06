"""Small fully connected networks with hand-written gradients.

The networks here are deliberately tiny (a few thousand parameters), so a
plain numpy implementation with explicit backward / forward-mode passes is
both fast enough and exactly reproducible.  All parameters live in one flat
float64 vector; layer weights are reshaped views into it, which makes
flat-vector optimizer math (conjugate gradient, line search, Adam) trivial.

Hidden activations are tanh; outputs are linear.  Heads (e.g. mean vs
variance) are slices of the output layer.
"""

from __future__ import annotations

import numpy as np


def _build_views(flat: np.ndarray, shapes: list[tuple[int, ...]]) -> list[np.ndarray]:
    views = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape))
        views.append(flat[offset:offset + size].reshape(shape))
        offset += size
    assert offset == flat.size
    return views


class Mlp:
    """Tanh MLP over a flat parameter vector.

    forward() returns a cache that backward()/jvp() consume; the cache holds
    the inputs and every pre-activation, so repeated backward passes over the
    same forward (as in Fisher-vector products) cost no extra forwards.
    """

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int,
                 rng: np.random.Generator | None = None):
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.out_dim = out_dim
        sizes = [in_dim, *hidden, out_dim]
        self.shapes: list[tuple[int, ...]] = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            self.shapes.append((a, b))
            self.shapes.append((b,))
        self.n_params = int(sum(np.prod(s) for s in self.shapes))
        self.flat = np.zeros(self.n_params, dtype=np.float64)
        self.views = _build_views(self.flat, self.shapes)
        if rng is not None:
            self.init_params(rng)

    def init_params(self, rng: np.random.Generator) -> None:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        for i in range(0, len(self.views), 2):
            W = self.views[i]
            bound = 1.0 / np.sqrt(W.shape[0])
            W[...] = rng.uniform(-bound, bound, size=W.shape)
            self.views[i + 1][...] = 0.0

    # -- flat parameter access -------------------------------------------
    def get_flat(self) -> np.ndarray:
        return self.flat.copy()

    def set_flat(self, theta: np.ndarray) -> None:
        if theta.shape != self.flat.shape:
            raise ValueError("parameter vector size mismatch")
        self.flat[...] = theta

    def _layers(self, flat: np.ndarray | None = None):
        views = self.views if flat is None else _build_views(np.ascontiguousarray(flat), self.shapes)
        return [(views[i], views[i + 1]) for i in range(0, len(views), 2)]

    # -- passes ----------------------------------------------------------
    def forward(self, x: np.ndarray, flat: np.ndarray | None = None):
        """x: (B, in_dim) -> (out (B, out_dim), cache)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        layers = self._layers(flat)
        acts = [x]
        pre = []
        h = x
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            pre.append(z)
            h = np.tanh(z) if i < len(layers) - 1 else z
            acts.append(h)
        return h, (acts, pre, layers)

    def backward(self, cache, dout: np.ndarray) -> np.ndarray:
        """Accumulate d(loss)/d(theta) as a flat vector given d(loss)/d(out)."""
        acts, pre, layers = cache
        grad = np.zeros(self.n_params, dtype=np.float64)
        gviews = _build_views(grad, self.shapes)
        delta = np.asarray(dout, dtype=np.float64)
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            if i < len(layers) - 1:
                delta = delta * (1.0 - np.tanh(pre[i]) ** 2)
            gviews[2 * i][...] = acts[i].T @ delta
            gviews[2 * i + 1][...] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ W.T
        return grad

    def jvp(self, cache, tangent: np.ndarray) -> np.ndarray:
        """Directional derivative of the output along a parameter tangent.

        Forward-mode pass: returns J @ tangent with shape (B, out_dim), where
        J is the Jacobian of the network output w.r.t. the flat parameters.
        """
        acts, pre, layers = cache
        tviews = _build_views(np.ascontiguousarray(tangent), self.shapes)
        du = np.zeros_like(acts[0])
        for i, (W, _) in enumerate(layers):
            dW, db = tviews[2 * i], tviews[2 * i + 1]
            dz = acts[i] @ dW + du @ W + db
            if i < len(layers) - 1:
                du = dz * (1.0 - np.tanh(pre[i]) ** 2)
            else:
                du = dz
        return du


class Adam:
    """Adam over a flat parameter vector (in-place step)."""

    def __init__(self, n_params: int, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params, dtype=np.float64)
        self.v = np.zeros(n_params, dtype=np.float64)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        flat -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def softplus(x: np.ndarray) -> np.ndarray:
    """Numerically stable log(1 + exp(x))."""
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))
