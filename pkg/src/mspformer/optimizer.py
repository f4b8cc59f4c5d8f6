# optimizer.py

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, NumericError

logger = logging.getLogger(__name__)


@dataclass
class Schedule:
    lr0: float = 0.0007
    hold_epochs: int = 250
    total_epochs: int = 600

    def __post_init__(self):
        if not self.lr0 >= 0:
            raise ConfigError(f"lr0 must be >= 0, got {self.lr0}")
        if not 0 <= self.hold_epochs < self.total_epochs:
            raise ConfigError(f"need 0 <= hold_epochs < total_epochs, got {self.hold_epochs}/{self.total_epochs}")


@dataclass
class OptimState:
    """AdamW moments per named parameter plus the step counter."""

    lr0: float = 0.0007
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure(self, named_params):
        for name, p in named_params:
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            elif self.m[name].shape != p.shape:
                raise ConfigError(f"optimizer state for {name} has shape {list(self.m[name].shape)}")


def lr_at(epoch, schedule: Schedule):
    """Constant lr0 up to hold_epochs, then linear decay reaching 0 at total_epochs."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise InputError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if epoch <= schedule.hold_epochs:
        return schedule.lr0
    span = schedule.total_epochs - schedule.hold_epochs
    return schedule.lr0 * (1.0 - (epoch - schedule.hold_epochs) / span)


def global_grad_norm(named_params):
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(named_params, max_norm):
    """Rescales all gradients in place so their global norm is at most ``max_norm``.

    Returns:
        The norm before clipping.
    """
    norm = global_grad_norm(named_params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def adamw_step(named_params, state: OptimState, lr):
    """One AdamW update with decoupled weight decay, in place.

    Args:
        named_params: (name, Tensor) pairs; gradients are read from ``.grad``.
        state: moments and step counter, updated in place.
        lr: learning rate for this step.

    A parameter without a gradient is treated as having a zero gradient.
    """
    if lr < 0:
        raise InputError(f"learning rate must be >= 0, got {lr}")
    named_params = list(named_params)
    state.ensure(named_params)
    for name, p in named_params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(p.grad))[0])
            raise NumericError("non-finite gradient", index=bad, name=name)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data)
