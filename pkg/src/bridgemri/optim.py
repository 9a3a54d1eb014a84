"""AdamW optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericsError
from .tensor import Tensor


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
               step: int, config: AdamWConfig) -> None:
    """One bias-corrected AdamW update, mutating param and moments in place.

    step is the 1-based count including this update.  Decoupled weight
    decay scales the parameter before the gradient update is applied.
    """
    if step < 1:
        raise ConfigError(f"step count must be >= 1, got {step}")
    if not np.all(np.isfinite(grad)):
        raise NumericsError(f"non-finite gradient at step {step}")
    if grad.shape != param.shape:
        raise NumericsError(f"gradient shape {grad.shape} does not match "
                            f"parameter shape {param.shape}")
    c = config
    m *= c.beta1
    m += (1.0 - c.beta1) * grad
    v *= c.beta2
    v += (1.0 - c.beta2) * (grad * grad)
    update = (m / (1.0 - c.beta1 ** step)) / (np.sqrt(v / (1.0 - c.beta2 ** step)) + c.eps)
    if c.weight_decay:
        param *= 1.0 - c.lr * c.weight_decay
    param -= c.lr * update


class AdamW:
    """Holds first/second moment state for a named parameter dict.

    Weight decay is decoupled: it shrinks the parameter directly by
    lr * weight_decay instead of entering the moment estimates.
    """

    def __init__(self, params: dict[str, Tensor], config: AdamWConfig | None = None):
        self.config = config or AdamWConfig()
        self.config.validate()
        self.params = dict(params)
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        """Apply one update in place.  Rejects non-finite gradients."""
        for name in self.params:
            if name not in grads:
                raise KeyError(f"missing gradient for parameter {name!r}")
            if not np.all(np.isfinite(grads[name])):
                raise NumericsError(f"non-finite gradient for parameter {name!r} "
                                    f"at step {self.step_count + 1}")
        self.step_count += 1
        for name, p in self.params.items():
            g = np.asarray(grads[name], dtype=p.data.dtype)
            adamw_step(p.data, g, self._m[name], self._v[name],
                       self.step_count, self.config)

    def moments(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Live (first, second) moment arrays per parameter, for checkpoints."""
        return {name: (self._m[name], self._v[name]) for name in self.params}

    def load_moments(self, moments: dict[str, tuple[np.ndarray, np.ndarray]],
                     step_count: int) -> None:
        for name in self.params:
            m, v = moments[name]
            self._m[name] = np.array(m, dtype=self.params[name].dtype)
            self._v[name] = np.array(v, dtype=self.params[name].dtype)
        self.step_count = int(step_count)
