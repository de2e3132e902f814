#!/usr/bin/env python3

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from dynamic_portfolio.utils import NonFiniteError, ensure_finite, softmax


######################
# --- PARAMETERS --- #
######################


@dataclass(eq=False)
class MlpParams:
    """
    Parameters of a feed-forward network with tanh hidden layers and an
    identity output layer.

    Fields:
        layers (list[tuple[np.ndarray, np.ndarray]]): ``(W, b)`` per layer with
            ``W`` of shape ``[out × in]`` and ``b`` of shape ``[out]``.
        seed (int, optional): Seed the parameters were initialized from.

    Usage:
        >>> params = init_params([4, 3], seed=0)
        >>> params.sizes
        [4, 3]
    """
    layers: list[tuple[np.ndarray, np.ndarray]]
    seed: Optional[int] = field(default=None)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("need input and output sizes")
        for i, (weight, bias) in enumerate(self.layers):
            if weight.ndim != 2 or bias.shape != (weight.shape[0],):
                raise ValueError(f"Layer {i} has weight {weight.shape} and bias {bias.shape}.")
            if i > 0 and weight.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ValueError(f"Layer {i} input size {weight.shape[1]} does not chain "
                                 f"with layer {i - 1} output size {self.layers[i - 1][0].shape[0]}.")

    @property
    def sizes(self) -> list[int]:
        """Layer sizes, input first."""
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flat(self) -> np.ndarray:
        """All parameters as one vector, layer by layer, weights (row-major) before biases."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    @classmethod
    def from_flat(cls, sizes: list[int], flat: np.ndarray, seed: Optional[int] = None) -> "MlpParams":
        """Rebuild parameters from :meth:`flat` output."""
        flat = np.asarray(flat, dtype=float)
        expected = sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))
        if flat.size != expected:
            raise ValueError(f"Expected {expected} parameters for sizes {sizes}, got {flat.size}.")
        layers, pos = [], 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weight = flat[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in).copy()
            pos += fan_in * fan_out
            bias = flat[pos:pos + fan_out].copy()
            pos += fan_out
            layers.append((weight, bias))
        return cls(layers, seed)

    def copy(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers], self.seed)

    def zeros_like(self) -> "MlpParams":
        return MlpParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers], self.seed)

    def same_shape(self, other: "MlpParams") -> bool:
        return self.sizes == other.sizes

    def combine(self, other: "MlpParams", scale: float = 1.0) -> "MlpParams":
        """Return ``self + scale · other`` elementwise."""
        if not self.same_shape(other):
            raise ValueError(f"Shape mismatch: {self.sizes} vs {other.sizes}.")
        return MlpParams([(w + scale * gw, b + scale * gb)
                          for (w, b), (gw, gb) in zip(self.layers, other.layers)], self.seed)

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(w * w) + np.sum(b * b) for w, b in self.layers)))


@dataclass(eq=False)
class ForwardCache:
    """Activations kept by a forward pass for the matching backward pass."""
    sizes: list[int]
    inputs: list[np.ndarray]
    logits: np.ndarray
    batched: bool
    weights: Optional[np.ndarray] = None


def init_params(layer_sizes: list[int], seed: int) -> MlpParams:
    """
    Glorot-uniform weights and zero biases.

    Each weight is drawn from ``U[-s, s]`` with ``s = sqrt(6 / (fan_in + fan_out))``
    using ``numpy.random.default_rng(seed)``.

    Raises:
        ValueError: If fewer than two sizes are given or a size is not positive.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError("need input and output sizes")
    if any(s < 1 for s in sizes):
        raise ValueError(f"Layer sizes must be positive, got {sizes}.")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return MlpParams(layers, seed)


########################
# --- PROPAGATION --- #
########################

def forward_logits(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """
    Run the network up to its identity output layer.

    Args:
        params (MlpParams): Network parameters.
        x (np.ndarray): One feature vector ``[D]`` or a batch ``[B × D]``.

    Returns:
        tuple[np.ndarray, ForwardCache]: Logits (``[N]`` or ``[B × N]``) and the cache.

    Raises:
        ValueError: If the feature dimension does not match the first layer.
        NonFiniteError: If any activation is NaN or infinite.
    """
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    act = np.atleast_2d(x)
    if act.shape[1] != params.sizes[0]:
        raise ValueError(f"Feature dimension {act.shape[1]} does not match input size {params.sizes[0]}.")
    ensure_finite(act, "network input")

    inputs = []
    last = len(params.layers) - 1
    for i, (weight, bias) in enumerate(params.layers):
        inputs.append(act)
        z = act @ weight.T + bias
        act = z if i == last else np.tanh(z)
    ensure_finite(act, "network output")
    logits = act if batched else act[0]
    return logits, ForwardCache(params.sizes, inputs, act, batched)


def backward_logits(params: MlpParams, cache: ForwardCache, grad_logits: np.ndarray) -> MlpParams:
    """
    Backpropagate ``dL/dlogits`` to parameter gradients.

    Gradients of a batch are summed over the batch.

    Raises:
        ValueError: If the cache was produced by a network of another shape.
    """
    if cache.sizes != params.sizes:
        raise ValueError(f"Cache sizes {cache.sizes} do not match parameters {params.sizes}.")
    delta = np.atleast_2d(np.asarray(grad_logits, dtype=float))
    if delta.shape != cache.logits.shape:
        raise ValueError(f"Gradient shape {delta.shape} does not match logits {cache.logits.shape}.")

    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        weight, _ = params.layers[i]
        a_in = cache.inputs[i]
        grads[i] = (delta.T @ a_in, delta.sum(axis=0))
        if i > 0:
            # a_in = tanh(z) for every hidden layer
            delta = (delta @ weight) * (1.0 - a_in * a_in)
    return MlpParams(grads, params.seed)


def forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """
    Map market features to portfolio weights.

    Hidden layers apply tanh; the output logits pass through a stable softmax,
    so every output row lies strictly inside the simplex.

    Example:
        All-zero parameters with three outputs give ``[1/3, 1/3, 1/3]``.
    """
    logits, cache = forward_logits(params, x)
    weights = softmax(logits)
    cache.weights = np.atleast_2d(weights)
    return weights, cache


def backward(params: MlpParams, cache: ForwardCache, grad_out: np.ndarray) -> MlpParams:
    """
    Backpropagate ``dL/dw`` through the softmax and the network.

    The softmax Jacobian ``J_ij = w_i (δ_ij - w_j)`` is applied row by row, so
    a gradient equal in every coordinate has no effect.
    """
    if cache.weights is None:
        raise ValueError("Cache was not produced by forward().")
    g = np.atleast_2d(np.asarray(grad_out, dtype=float))
    w = cache.weights
    if g.shape != w.shape:
        raise ValueError(f"Gradient shape {g.shape} does not match weights {w.shape}.")
    grad_logits = w * (g - np.sum(w * g, axis=1, keepdims=True))
    return backward_logits(params, cache, grad_logits)


###########################
# --- GRADIENT ORACLE --- #
###########################

def finite_diff_grad(params: MlpParams, loss_fn: Callable[[MlpParams], float], h: float = 1e-5) -> MlpParams:
    """
    Central finite-difference gradient ``(L(θ + h·e) - L(θ - h·e)) / 2h``.

    Raises:
        ValueError: If ``h`` is not positive.
        NonFiniteError: If the loss is not finite at a perturbed point.
    """
    if h <= 0.0:
        raise ValueError(f"Step h must be positive, got {h}.")
    sizes, theta = params.sizes, params.flat()
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        original = theta[k]
        theta[k] = original + h
        up = loss_fn(MlpParams.from_flat(sizes, theta, params.seed))
        theta[k] = original - h
        down = loss_fn(MlpParams.from_flat(sizes, theta, params.seed))
        theta[k] = original
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"Loss is not finite when perturbing parameter {k}.")
        grad[k] = (up - down) / (2.0 * h)
    return MlpParams.from_flat(sizes, grad, params.seed)


##########################
# --- REGULARIZATION --- #
##########################

def regularization(params: MlpParams, l1: float = 0.0, l2: float = 0.0) -> tuple[float, MlpParams]:
    """
    L1 and L2 penalty on weight matrices (biases are not penalized).

    Returns:
        tuple[float, MlpParams]: Penalty ``l1·Σ|W| + l2·ΣW²`` and its
        (sub)gradient, with the L1 subgradient at zero taken as zero.
    """
    if l1 < 0.0 or l2 < 0.0:
        raise ValueError("Regularization coefficients must be non-negative.")
    penalty = 0.0
    grads = []
    for weight, bias in params.layers:
        penalty += l1 * float(np.sum(np.abs(weight))) + l2 * float(np.sum(weight * weight))
        grads.append((l1 * np.sign(weight) + 2.0 * l2 * weight, np.zeros_like(bias)))
    return penalty, MlpParams(grads, params.seed)
