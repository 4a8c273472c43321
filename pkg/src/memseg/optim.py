from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class OptimizerState:
    base_lr: float = 1e-2
    power: float = 0.9
    total_iters: int = 2000
    momentum_coeff: float = 0.9
    weight_decay: float = 0.0
    momentum_buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.base_lr <= 0 or self.power <= 0 or self.total_iters <= 0:
            raise ValueError("base_lr, power and total_iters must be positive")
        if not 0.0 <= self.momentum_coeff < 1.0:
            raise ValueError("momentum_coeff must lie in [0, 1)")


def poly_lr(it: int, state: OptimizerState) -> float:
    """base_lr * (1 - it/total)^power."""
    if it < 0 or it > state.total_iters:
        raise ValueError(f"iteration {it} outside [0, {state.total_iters}]")
    return state.base_lr * (1.0 - it / state.total_iters) ** state.power


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, it: int) -> float:
    """Momentum SGD in place. Returns the learning rate used."""
    lr = poly_lr(it, state)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        buf = state.momentum_buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p.data)
        buf = state.momentum_coeff * buf + g
        state.momentum_buffers[name] = buf
        p.data -= (lr * buf).astype(p.dtype, copy=False)
    return lr


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if not np.isfinite(total):
        bad = next(k for k, g in grads.items() if not np.all(np.isfinite(g)))
        raise NonFiniteError(f"non-finite gradient for parameter {bad}")
    if max_norm <= 0 or total <= max_norm:
        return grads, total
    scale = max_norm / total
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}, total
