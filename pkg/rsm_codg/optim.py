"""
Adam with decoupled weight decay and the step-decay learning-rate schedule.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .param_store import ParamStore

logger = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    """Raised when a gradient or loss stops being finite."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(message)
        self.path = path


@dataclass
class AdamState:
    """First/second moment estimates per parameter path."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    lr_scale: Dict[str, float] = field(default_factory=dict)
    decay_exclude: Tuple[str, ...] = ()
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def scale_for(self, path: str) -> float:
        """Learning-rate multiplier of the longest matching path prefix, 1.0 when none matches."""
        matches = [prefix for prefix in self.lr_scale if path.startswith(prefix)]
        return self.lr_scale[max(matches, key=len)] if matches else 1.0

    def decays(self, path: str) -> bool:
        return bool(self.weight_decay) and not path.startswith(self.decay_exclude)


def adam_step(store: ParamStore, state: AdamState, lr: float) -> None:
    """
    Apply one Adam update to every parameter that received a gradient.

    Weight decay is decoupled: theta <- theta - lr * wd * theta, then the
    bias-corrected Adam step. Paths under a prefix in ``state.lr_scale`` use
    a scaled learning rate for both; paths under ``state.decay_exclude`` are
    not decayed. Parameters without a gradient are left alone.

    Raises:
        NumericalError: If any gradient holds NaN or inf, naming its path
    """
    updates = [(path, tensor) for path, tensor in store.items() if tensor.grad is not None]
    for path, tensor in updates:
        if not np.all(np.isfinite(tensor.grad)):
            logger.error(f"Non-finite gradient in {path}")
            raise NumericalError(f"Non-finite gradient in parameter {path}", path)

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for path, tensor in updates:
        grad = tensor.grad.astype(np.float64)
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(grad)
            state.v[path] = np.zeros_like(grad)
        v = state.v[path]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad

        rate = lr * state.scale_for(path)
        theta = tensor.data.astype(np.float64)
        if state.decays(path):
            theta = theta - rate * state.weight_decay * theta
        theta = theta - rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        tensor.data[...] = theta
    store.step += 1
    store.bump()


def schedule_lr(epoch: int, base_lr: float = 1e-4, step_size: int = 15, gamma: float = 0.7) -> float:
    """Step decay: base_lr * gamma ** (epoch // step_size)."""
    if epoch < 0:
        raise ValueError(f"Epoch must be >= 0, got {epoch}")
    return base_lr * gamma ** (epoch // step_size)
