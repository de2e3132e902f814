#!/usr/bin/env python3

from enum import Enum
from typing import Union

import numpy as np

from dynamic_portfolio.policy_net import MlpParams


class OptimizerKind(Enum):
    """
    Supported parameter update rules.

    Example:
        >>> OptimizerKind.coerce("adam")
        <OptimizerKind.ADAM: 'adam'>
    """
    SGD = "sgd"
    ADAM = "adam"
    RMSPROP = "rmsprop"

    @property
    def label(self) -> str:
        return self.value

    @classmethod
    def coerce(cls, value: Union['OptimizerKind', str]) -> 'OptimizerKind':
        if isinstance(value, cls):
            return value
        for member in cls:
            if value == member.label:
                return member
        raise ValueError(f"Invalid value for {cls.__name__}: {value}")

    def __str__(self):
        return self.label


class Optimizer:
    """
    Base class for first-order updates on :class:`MlpParams`.

    ``step`` returns new parameters; ascent adds the scaled direction, descent
    subtracts it.
    """

    def __init__(self, lr: float):
        if lr <= 0.0:
            raise ValueError(f"Learning rate must be positive, got {lr}.")
        self.lr = lr

    def direction(self, grads: MlpParams) -> MlpParams:
        raise NotImplementedError

    def step(self, params: MlpParams, grads: MlpParams, ascend: bool = False) -> MlpParams:
        if not params.same_shape(grads):
            raise ValueError(f"Shape mismatch: {params.sizes} vs {grads.sizes}.")
        scale = self.lr if ascend else -self.lr
        return params.combine(self.direction(grads), scale)


class SGD(Optimizer):
    """Plain gradient step ``θ ± lr · g``."""

    def direction(self, grads: MlpParams) -> MlpParams:
        return grads


class Adam(Optimizer):
    """Adam with bias-corrected first and second moments."""

    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = None
        self._v = None
        self._t = 0

    def direction(self, grads: MlpParams) -> MlpParams:
        if self._m is None:
            self._m, self._v = grads.zeros_like(), grads.zeros_like()
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        layers, m_layers, v_layers = [], [], []
        for (gw, gb), (mw, mb), (vw, vb) in zip(grads.layers, self._m.layers, self._v.layers):
            mw, mb = b1 * mw + (1 - b1) * gw, b1 * mb + (1 - b1) * gb
            vw, vb = b2 * vw + (1 - b2) * gw * gw, b2 * vb + (1 - b2) * gb * gb
            m_layers.append((mw, mb))
            v_layers.append((vw, vb))
            c1, c2 = 1 - b1 ** self._t, 1 - b2 ** self._t
            layers.append(((mw / c1) / (np.sqrt(vw / c2) + self.eps),
                           (mb / c1) / (np.sqrt(vb / c2) + self.eps)))
        self._m, self._v = MlpParams(m_layers), MlpParams(v_layers)
        return MlpParams(layers, grads.seed)


class RMSprop(Optimizer):
    """RMSprop: gradient scaled by a running RMS of past gradients."""

    def __init__(self, lr: float = 1e-3, decay: float = 0.99, eps: float = 1e-8):
        super().__init__(lr)
        self.decay, self.eps = decay, eps
        self._v = None

    def direction(self, grads: MlpParams) -> MlpParams:
        if self._v is None:
            self._v = grads.zeros_like()
        d = self.decay
        layers, v_layers = [], []
        for (gw, gb), (vw, vb) in zip(grads.layers, self._v.layers):
            vw, vb = d * vw + (1 - d) * gw * gw, d * vb + (1 - d) * gb * gb
            v_layers.append((vw, vb))
            layers.append((gw / (np.sqrt(vw) + self.eps), gb / (np.sqrt(vb) + self.eps)))
        self._v = MlpParams(v_layers)
        return MlpParams(layers, grads.seed)


def make_optimizer(kind: Union[OptimizerKind, str], lr: float) -> Optimizer:
    """Build an optimizer from its kind and learning rate."""
    kind = OptimizerKind.coerce(kind)
    if kind is OptimizerKind.SGD:
        return SGD(lr)
    if kind is OptimizerKind.ADAM:
        return Adam(lr)
    return RMSprop(lr)


def clip_grad_norm(grads: MlpParams, max_norm: float) -> tuple[MlpParams, float]:
    """
    Rescale ``grads`` so that its global L2 norm is at most ``max_norm``.

    Returns:
        tuple[MlpParams, float]: Clipped gradients and the norm before clipping.
    """
    if max_norm <= 0.0:
        raise ValueError(f"max_norm must be positive, got {max_norm}.")
    norm = grads.norm()
    if norm <= max_norm:
        return grads, norm
    return grads.combine(grads, max_norm / norm - 1.0), norm
