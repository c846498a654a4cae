"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")


def sgd_step(params: Mapping[str, Tensor], state: SgdState) -> None:
    """One update, decay folded into the gradient before momentum:

        v <- momentum * v + (grad + weight_decay * param)
        param <- param - lr * v

    With ``momentum == 0`` no velocity buffers are kept.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"sgd_step: no gradient for {', '.join(missing[:5])}"
                         + (" ..." if len(missing) > 5 else ""))
    lr = state.learning_rate
    for name, p in params.items():
        d = p.grad
        if state.weight_decay:
            d = d + state.weight_decay * p.data
        if state.momentum > 0:
            v = state.velocity.get(name)
            if v is None:
                v = state.velocity[name] = np.zeros_like(p.data)
            v *= state.momentum
            v += d
            d = v
        p.data -= (lr * d).astype(p.dtype, copy=False)
