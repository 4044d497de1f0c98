"""Named parameter store and Adam.

Parameters live in insertion order so initialization, checkpoint layout,
and update sweeps are all deterministic for a given config and seed.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ParameterError, TrainingError


def glorot_uniform(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)). 1-D shapes count fan_out = fan_in."""
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_in = int(np.prod(shape[1:]))
        fan_out = shape[0]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class ParameterStore:
    """Ordered name -> Tensor map plus Adam moment state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ParameterError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradients accumulated by the last backward(); missing means zero."""
        return {k: t.grad for k, t in self._params.items() if t.grad is not None}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for k, t in self._params.items():
            if k not in arrays:
                raise ParameterError(f"missing parameter {k!r} in loaded state")
            if arrays[k].shape != t.data.shape:
                raise ParameterError(
                    f"shape mismatch for {k!r}: {arrays[k].shape} vs {t.data.shape}")
            t.data = np.asarray(arrays[k], dtype=np.float64).copy()


def step_lr(base: float, step_i: int, total: int, gamma: float,
            milestones: tuple) -> float:
    """Step-decay schedule: multiply base by gamma at each milestone fraction."""
    lr = base
    for frac in milestones:
        if step_i >= frac * total:
            lr *= gamma
    return lr


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray],
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update in place.

    Parameters absent from `grads` are treated as zero-gradient (they still
    coast on accumulated momentum). A non-finite gradient is a divergence
    and aborts naming the parameter.
    """
    if lr <= 0:
        raise ParameterError(f"learning rate must be > 0, got {lr}")
    store.step_count += 1
    t = store.step_count
    for name, p in store.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
