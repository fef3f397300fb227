"""Adam with a linear learning-rate warm-up."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.param_name = name


@dataclass
class OptimizerState:
    base_rate: float = 1e-4
    warmup_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.base_rate <= 0:
            raise ValueError("base_rate must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")

    def rate(self, step: int | None = None) -> float:
        """Effective rate at 1-based step ``step`` (defaults to the last step taken)."""
        k = self.step_count if step is None else step
        if self.warmup_steps == 0:
            return self.base_rate
        return self.base_rate * min(1.0, k / self.warmup_steps)


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   state: OptimizerState) -> OptimizerState:
    """Apply one Adam update in place and return ``state``.

    The step counter is incremented before the rate is read, so the first
    call moves parameters at ``base_rate / warmup_steps``.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)

    state.step_count += 1
    k = state.step_count
    lr = state.rate(k)
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** k)
        v_hat = v / (1.0 - b2 ** k)
        # rebind rather than mutate so snapshots of old arrays stay valid
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state
