"""Adam with exponentially decaying learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, ShapeError
from .tensor import Array, GradientMap, ParamStore


def learning_rate(step: int, l0: float, decay_steps: int) -> float:
    """Continuous exponential decay: `l0 * 0.5 ** (step / decay_steps)`."""
    if decay_steps <= 0:
        raise InvalidArgumentError(f"decay_steps must be positive, got {decay_steps}")
    return float(l0 * 0.5 ** (step / decay_steps))


@dataclass
class AdamState:
    """First and second moments per parameter plus the update counter."""

    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, store: ParamStore) -> AdamState:
        return cls(
            m={name: np.zeros_like(t.data) for name, t in store.items()},
            v={name: np.zeros_like(t.data) for name, t in store.items()},
        )


def global_norm(grads: GradientMap) -> float:
    return math.sqrt(math.fsum(float(np.sum(g.data**2)) for g in grads.values()))


def clip_gradients(grads: GradientMap, max_norm: float) -> GradientMap:
    """Scales all gradients together so their global norm is at most `max_norm`."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


def adam_step(
    store: ParamStore,
    grads: GradientMap,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> None:
    """Applies one bias-corrected Adam update in place.

    Parameters without a gradient keep their values and moments.

    Raises:
        ShapeError: If a gradient does not match its parameter.
    """
    for name, grad in grads.items():
        if name not in store:
            raise ShapeError(f"Gradient for unknown parameter {name}")
        if grad.shape != store[name].shape:
            raise ShapeError(
                f"Gradient {grad.shape} does not match parameter {name} "
                f"{store[name].shape}"
            )
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for name in sorted(grads):
        param = store[name]
        g = grads[name].data
        m = state.m.get(name)
        v = state.v.get(name)
        m = np.zeros_like(param.data) if m is None else m
        v = np.zeros_like(param.data) if v is None else v
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m.astype(param.dtype)
        state.v[name] = v.astype(param.dtype)
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + epsilon)
        param.data = (param.data - update).astype(param.dtype)
