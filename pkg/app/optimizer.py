"""AdamW with decoupled weight decay and rejection of non-finite steps."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """AdamW moments and hyperparameters for one parameter array."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    rejected: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray, **hyper) -> "OptimizerState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), **hyper)


def adamw_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> Tuple[np.ndarray, bool]:
    """
    One decoupled-weight-decay Adam update.

        m <- b1 m + (1 - b1) g
        v <- b2 v + (1 - b2) g^2
        p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)

    A non-finite gradient, or an update producing non-finite parameters, is rejected:
    params and state are left unchanged and the rejection is counted.

    Returns:
        (new params, accepted flag)
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        state.rejected += 1
        logger.warning(f"AdamW step rejected: non-finite gradient (rejections so far: {state.rejected})")
        return params, False

    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * params)

    if not np.all(np.isfinite(new_params)):
        state.rejected += 1
        logger.warning(f"AdamW step rejected: non-finite parameters (rejections so far: {state.rejected})")
        return params, False

    state.m, state.v, state.t = m, v, t
    return new_params, True


@dataclass
class AdamW:
    """AdamW over a dict of named arrays (used for source pretraining)."""
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: Dict[str, OptimizerState] = field(default_factory=dict)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, Optional[np.ndarray]]) -> Dict[str, np.ndarray]:
        updated = {}
        for name, value in params.items():
            g = grads.get(name)
            if g is None:
                updated[name] = value
                continue
            state = self.states.get(name)
            if state is None:
                state = OptimizerState.zeros_like(value, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                                                  eps=self.eps, weight_decay=self.weight_decay)
                self.states[name] = state
            updated[name], _ = adamw_step(state, value, g)
        return updated
