"""Small differentiable-numerics toolkit.

A tanh multilayer perceptron stored as one flat float64 parameter vector,
hand-written reverse-mode gradients, an Adam updater, and a central
finite-difference gradient used as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when an input does not match the network's layer sizes."""


def param_count(sizes: Sequence[int]) -> int:
    return sum((n_in + 1) * n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))


@dataclass
class MlpNetwork:
    """Dense network, tanh on hidden layers and identity on the output.

    Parameters are laid out layer by layer as ``W`` (row-major, shape
    ``(n_in, n_out)``) followed by ``b`` (shape ``(n_out,)``), so that a
    layer computes ``x @ W + b``.
    """

    sizes: tuple[int, ...]
    params: np.ndarray

    def __post_init__(self) -> None:
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or any(s <= 0 for s in self.sizes):
            raise ValueError(f"layer sizes must be >= 2 positive ints, got {self.sizes}")
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (param_count(self.sizes),):
            raise DimensionError(
                f"expected {param_count(self.sizes)} parameters for sizes {self.sizes}, "
                f"got shape {self.params.shape}"
            )

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator) -> "MlpNetwork":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
        chunks = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            chunks.append(rng.uniform(-bound, bound, size=n_in * n_out))
            chunks.append(rng.uniform(-bound, bound, size=n_out))
        return cls(tuple(sizes), np.concatenate(chunks))

    @classmethod
    def zeros(cls, sizes: Sequence[int]) -> "MlpNetwork":
        return cls(tuple(sizes), np.zeros(param_count(sizes)))

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def with_params(self, params: np.ndarray) -> "MlpNetwork":
        return MlpNetwork(self.sizes, params)

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into the flat parameter vector."""
        p = self.params if params is None else params
        out = []
        offset = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = p[offset : offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            b = p[offset : offset + n_out]
            offset += n_out
            out.append((w, b))
        return out


@dataclass
class GradientBuffer:
    """Accumulator for parameter gradients."""

    grad: np.ndarray

    @classmethod
    def like(cls, net: MlpNetwork) -> "GradientBuffer":
        return cls(np.zeros_like(net.params))

    def add(self, g: np.ndarray) -> None:
        if g.shape != self.grad.shape:
            raise DimensionError(f"gradient shape {g.shape} != buffer shape {self.grad.shape}")
        self.grad += g

    def zero(self) -> None:
        self.grad[:] = 0.0

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.grad, self.grad)))


def _check_input(net: MlpNetwork, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.n_in:
        raise DimensionError(f"input shape {x.shape} incompatible with input size {net.n_in}")
    return x


def forward(net: MlpNetwork, x: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
    """Evaluate the network on one input ``(n_in,)`` or a batch ``(N, n_in)``."""
    out, _ = forward_cached(net, x, params)
    return out


def forward_cached(
    net: MlpNetwork, x: np.ndarray, params: np.ndarray | None = None
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass that also returns the layer inputs needed by :func:`backward`."""
    x = _check_input(net, x)
    layers = net.layers(params)
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def backward(
    net: MlpNetwork,
    x: np.ndarray,
    cotangent: np.ndarray,
    params: np.ndarray | None = None,
    cache: list[np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of the network.

    Returns ``(grad_params, grad_input)`` where ``grad_params`` is the
    gradient of ``sum(cotangent * forward(x))`` with respect to the flat
    parameter vector (summed over the batch when ``x`` is 2-D) and
    ``grad_input`` has the shape of ``x``.
    """
    x = _check_input(net, x)
    g = np.asarray(cotangent, dtype=np.float64)
    expected = x.shape[:-1] + (net.n_out,)
    if g.shape != expected:
        raise DimensionError(f"cotangent shape {g.shape} != output shape {expected}")
    if cache is None:
        _, cache = forward_cached(net, x, params)
    layers = net.layers(params)

    batched = x.ndim == 2
    if not batched:
        g = g[None, :]
        cache = [a[None, :] for a in cache]

    grads: list[np.ndarray] = []
    n_layers = len(layers)
    for i in range(n_layers - 1, -1, -1):
        w, _ = layers[i]
        if i < n_layers - 1:
            # cache[i + 1] holds tanh output of layer i
            g = g * (1.0 - cache[i + 1] ** 2)
        a_in = cache[i]
        grads.append(g.sum(axis=0))
        grads.append((a_in.T @ g).ravel())
        g = g @ w.T
    grads.reverse()
    grad_params = np.concatenate(grads)
    grad_input = g if batched else g[0]
    return grad_params, grad_input


def fd_gradient(f: Callable[[np.ndarray], float], params: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one pair per coordinate."""
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.array(params, dtype=np.float64)
    grad = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + step
        f_plus = f(p)
        p[i] = orig - step
        f_minus = f(p)
        p[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def adam_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float = 1e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update (no weight decay). Inputs are not mutated."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not (params.shape == grad.shape == state.m.shape == state.v.shape):
        raise DimensionError("params, grad and optimizer state must share a shape")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    """Scale ``grad`` to global norm at most ``max_norm``; returns (grad, pre-clip norm)."""
    norm = float(np.sqrt(np.dot(grad, grad)))
    if norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm
