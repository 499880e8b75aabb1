from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import loss_and_grad
from .tape import ShapeError, check_finite


@dataclass(frozen=True)
class OptimizerState:
    velocities: tuple[np.ndarray, ...]
    learning_rate: float
    momentum: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def zeros_like(cls, params, learning_rate: float, momentum: float = 0.9) -> "OptimizerState":
        return cls(tuple(np.zeros_like(p) for p in params), learning_rate, momentum)


def sgd_step(params, gradients, state: OptimizerState):
    """Classical momentum: v <- mu v - lr g; theta <- theta + v."""
    if not (len(params) == len(gradients) == len(state.velocities)):
        raise ShapeError("params, gradients and velocities differ in length")
    new_params, new_vel = [], []
    for p, g, v in zip(params, gradients, state.velocities):
        if not (p.shape == g.shape == v.shape):
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        check_finite(g, "gradient")
        v = state.momentum * v - state.learning_rate * g
        new_vel.append(v)
        new_params.append(p + v)
    return new_params, OptimizerState(tuple(new_vel), state.learning_rate, state.momentum)


def sgd_train(
    network,
    x: np.ndarray,
    y: np.ndarray,
    updates: int,
    batch_size: int,
    learning_rate: float,
    momentum: float,
    rng: np.random.Generator,
):
    """Run ``updates`` momentum-SGD steps on random minibatches; returns the new network."""
    params = network.parameters()
    state = OptimizerState.zeros_like(params, learning_rate, momentum)
    for _ in range(updates):
        idx = rng.choice(len(x), size=batch_size, replace=False)
        _, grads = loss_and_grad(network, x[idx], y[idx])
        params, state = sgd_step(params, grads.flat(), state)
        network = network.with_parameters(params)
    return network
