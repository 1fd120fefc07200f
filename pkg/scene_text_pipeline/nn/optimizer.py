# nn/optimizer.py

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from ..services.errors import ConfigError, ShapeMismatch
from ..services.shared_config import ADADELTA_EPS, ADADELTA_RHO, OPTIMIZER_PREFIX
from . import numeric

Params = Dict[str, np.ndarray]


@dataclass
class AdadeltaState:
    accum_grad: Params = field(default_factory=dict)  # E[g^2]
    accum_update: Params = field(default_factory=dict)  # E[dx^2]

    @classmethod
    def zeros_like(cls, params: Params) -> "AdadeltaState":
        return cls(
            {name: np.zeros_like(p) for name, p in params.items()},
            {name: np.zeros_like(p) for name, p in params.items()},
        )

    def to_tensors(self) -> Params:
        tensors = {}
        for name in self.accum_grad:
            tensors[f"{OPTIMIZER_PREFIX}{name}/accum_grad"] = self.accum_grad[name]
            tensors[f"{OPTIMIZER_PREFIX}{name}/accum_update"] = self.accum_update[name]
        return tensors

    @classmethod
    def from_tensors(cls, tensors: Params) -> "AdadeltaState":
        state = cls()
        for key, value in tensors.items():
            if not key.startswith(OPTIMIZER_PREFIX):
                continue
            name, _, slot = key[len(OPTIMIZER_PREFIX):].rpartition("/")
            if slot == "accum_grad":
                state.accum_grad[name] = value
            elif slot == "accum_update":
                state.accum_update[name] = value
        return state


def adadelta_step(
    params: Params,
    grads: Params,
    state: AdadeltaState,
    rho: float = ADADELTA_RHO,
    eps: float = ADADELTA_EPS,
) -> Tuple[Params, AdadeltaState]:
    """
    One Adadelta update, in place:
        E[g^2]  <- rho E[g^2] + (1 - rho) g^2
        dx      <- -(sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps)) g
        E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
        x       <- x + dx
    """
    if not 0.0 < rho < 1.0 or eps <= 0.0:
        raise ConfigError(f"adadelta needs 0 < rho < 1 and eps > 0, got rho={rho}, eps={eps}")
    if set(grads) != set(params) or set(state.accum_grad) != set(params) or set(state.accum_update) != set(params):
        raise ShapeMismatch("parameters, gradients and optimizer state must name the same tensors")
    numeric.check_finite("gradients", *grads.values())

    for name in sorted(params):
        x, g = params[name], grads[name]
        eg, edx = state.accum_grad[name], state.accum_update[name]
        if not (x.shape == g.shape == eg.shape == edx.shape):
            raise ShapeMismatch(f"{name}: parameter {x.shape}, gradient {g.shape}, state {eg.shape}/{edx.shape}")
        g = g.astype(x.dtype, copy=False)
        eg *= rho
        eg += (1 - rho) * g * g
        dx = -(np.sqrt(edx + eps) / np.sqrt(eg + eps)) * g
        edx *= rho
        edx += (1 - rho) * dx * dx
        x += dx
    return params, state
