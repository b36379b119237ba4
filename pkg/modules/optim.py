"""
Optimizer and Learning-Rate Schedule

Bias-corrected Adam on flat parameter vectors and the step-decay
schedule used for training.
"""
from dataclasses import dataclass

import numpy as np

from config import ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON
from modules.errors import InvalidInputError, NumericalError


@dataclass(frozen=True)
class AdamState:
    """First/second moment estimates and the step counter."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n_params: int) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), t=0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPSILON
):
    """
    One Adam update.

    Args:
        params: Flat parameter vector
        grads: Gradient of the loss w.r.t. params
        state: Moments from the previous step
        lr: Step size

    Returns:
        (new_params, new_state); inputs are not modified

    Raises:
        InvalidInputError: Shape mismatch
        NumericalError: Non-finite gradient entries
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise InvalidInputError(
            f"Shapes differ: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise NumericalError(
            f"Non-finite gradient at parameter {bad} (value {grads[bad]}) on step {state.t + 1}"
        )

    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * (grads * grads)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, t=t)


def step_decay_lr(epoch: int, initial_lr: float, decay_factor: float, decay_every_epochs: int) -> float:
    """
    Learning rate for a 1-based epoch: divided by decay_factor every
    decay_every_epochs epochs.
    """
    if epoch < 1:
        raise InvalidInputError(f"Epochs are 1-based, got {epoch}")
    steps = (epoch - 1) // decay_every_epochs
    return initial_lr / decay_factor ** steps
