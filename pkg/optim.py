"""SGD with momentum, coupled weight decay and a stepwise learning-rate schedule"""
from typing import Dict, Sequence

import numpy as np

from models import SgdConfig
from tensor import NumericsError, Tensor


def learning_rate(config: SgdConfig, iteration: int) -> float:
    """lr0 * decay ** floor(iteration / decay_every)"""
    return config.lr * config.decay ** (iteration // config.decay_every)


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: Dict[int, np.ndarray],
             config: SgdConfig, iteration: int) -> None:
    """v <- m*v + g + wd*p ; p <- p - lr(it)*v. `state` maps parameter index to velocity."""
    if len(params) != len(grads):
        raise NumericsError(f"sgd_step: {len(params)} params but {len(grads)} grads")
    lr = learning_rate(config, iteration)
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise NumericsError(f"sgd_step: grad shape {grad.shape} != param shape {param.shape}")
        velocity = state.get(i)
        if velocity is None:
            velocity = np.zeros_like(param.data)
        velocity = config.momentum * velocity + grad + config.weight_decay * param.data
        state[i] = np.asarray(velocity, dtype=param.data.dtype)
        param.data = np.asarray(param.data - lr * velocity, dtype=param.data.dtype)


class SgdOptimizer:
    """Owns the velocity buffers for a fixed parameter list"""

    def __init__(self, params: Sequence[Tensor], config: SgdConfig):
        self.params = list(params)
        self.config = config
        self.state: Dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self, iteration: int) -> float:
        """Apply one update from the accumulated grads; returns the lr used"""
        sgd_step(self.params, [p.grad for p in self.params], self.state, self.config, iteration)
        return learning_rate(self.config, iteration)
