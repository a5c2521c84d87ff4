"""Small dense networks with hand-written backpropagation, plus Adam."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class MLP:
    """tanh hidden layers, linear output. Parameters live in one flat vector."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None, out_gain: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.shapes: List[Tuple[int, int]] = list(zip(self.sizes[:-1], self.sizes[1:]))
        self.n_params = sum(i * o + o for i, o in self.shapes)
        self.theta = np.zeros(self.n_params)
        if rng is not None:
            chunks = []
            for k, (i, o) in enumerate(self.shapes):
                gain = out_gain if k == len(self.shapes) - 1 else np.sqrt(2.0)
                chunks.append(orthogonal(rng, i, o, gain).ravel())
                chunks.append(np.zeros(o))
            self.theta = np.concatenate(chunks)

    def layers(self, theta: np.ndarray | None = None):
        theta = self.theta if theta is None else theta
        out, k = [], 0
        for i, o in self.shapes:
            w = theta[k : k + i * o].reshape(i, o)
            k += i * o
            b = theta[k : k + o]
            k += o
            out.append((w, b))
        return out

    def forward(self, x: np.ndarray, theta: np.ndarray | None = None):
        """Returns (output, cache). ``x`` has shape (batch, n_in)."""
        acts = [x]
        h = x
        layers = self.layers(theta)
        for k, (w, b) in enumerate(layers):
            z = h @ w + b
            h = np.tanh(z) if k < len(layers) - 1 else z
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(np.atleast_2d(x))[0]

    def backward(self, acts, grad_out: np.ndarray, theta: np.ndarray | None = None) -> np.ndarray:
        """Gradient of sum(grad_out * output) w.r.t. the flat parameter vector."""
        layers = self.layers(theta)
        grads: List[np.ndarray] = []
        g = grad_out
        for k in range(len(layers) - 1, -1, -1):
            w, _ = layers[k]
            h_in = acts[k]
            grads.append(g.sum(axis=0))
            grads.append((h_in.T @ g).ravel())
            if k > 0:
                g = (g @ w.T) * (1.0 - acts[k] ** 2)
        return np.concatenate(grads[::-1])

    def copy(self) -> "MLP":
        twin = MLP(self.sizes)
        twin.theta = self.theta.copy()
        return twin


class Adam:
    def __init__(self, n: int, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
