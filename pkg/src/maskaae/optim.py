"""Plain RMSProp: acc <- rho*acc + (1-rho)*g^2; p <- p - lr*g/sqrt(acc + eps)."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from maskaae.errors import NumericError, ShapeError


@dataclass
class OptimizerState:
    acc: list[torch.Tensor] = field(default_factory=list)
    steps: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls([torch.zeros_like(p, memory_format=torch.contiguous_format) for p in params])


@torch.no_grad()
def rmsprop_step(params, grads, state: OptimizerState, eta: float, rho: float, eps: float,
                 step_index: int | None = None) -> OptimizerState:
    """Update ``params`` and ``state`` in place and return the state."""
    if not (len(params) == len(grads) == len(state.acc)):
        raise ShapeError("params, grads and accumulators must have equal length")
    for g in grads:
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient", step_index)
    for p, g, acc in zip(params, grads, state.acc):
        if p.shape != g.shape or p.shape != acc.shape:
            raise ShapeError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}")
        acc.mul_(rho).addcmul_(g, g, value=1.0 - rho)
        p.addcdiv_(g, torch.sqrt(acc + eps), value=-eta)
    state.steps += 1
    return state
