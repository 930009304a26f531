from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


@dataclass
class SgdmState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgdm_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: SgdmState) -> None:
    """In-place update: v <- momentum*v + g; p <- p - lr*v."""
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise ShapeError(f"sgdm_step: params and grads disagree on names {missing}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"sgdm_step: gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"sgdm_step: velocity for {name} has shape {v.shape}, parameter has {p.shape}")
        v *= state.momentum
        v += g
        p -= state.learning_rate * v


class SGDM:
    def __init__(self, params: Mapping[str, Tensor], learning_rate: float = 0.01, momentum: float = 0.9):
        self.params = dict(params)
        self.state = SgdmState(learning_rate=learning_rate, momentum=momentum)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        # parameters the loss never reached get a zero gradient (velocity still decays)
        grads = {
            name: p.grad if p.grad is not None else np.zeros_like(p.data)
            for name, p in self.params.items()
        }
        sgdm_step({name: p.data for name, p in self.params.items()}, grads, self.state)

    @property
    def names(self) -> List[str]:
        return list(self.params)
