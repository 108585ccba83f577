"""AdamW, the warmup + cosine learning-rate schedule, and the focus-constraint projection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ParameterError
from .model import ScaleVector


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
               lr_t: float, decay: set[str] | None = None) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Args:
        params: name -> parameter array (modified in place and returned).
        grads: name -> gradient array of the same shape.
        state: moments and step counter; updated in place.
        lr_t: learning rate for this step (usually from :func:`cosine_schedule`).
        decay: names that receive weight decay; all of them when None.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ParameterError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.exp_avg.setdefault(name, np.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay and (decay is None or name in decay):
            p *= 1.0 - lr_t * state.weight_decay
        p -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def cosine_schedule(t: int, total: int, warmup: int, lr: float, final_ratio: float = 0.1,
                    warmup_start: float = 0.0) -> float:
    """Linear warmup to ``lr`` over ``warmup`` steps, then cosine decay to ``final_ratio * lr``."""
    if warmup < 0 or total <= warmup:
        raise ParameterError(f"need 0 <= warmup < total, got warmup={warmup}, total={total}")
    if t < 0 or t > total:
        raise ParameterError(f"step {t} outside [0, {total}]")
    if t < warmup:
        return lr * (warmup_start + (1.0 - warmup_start) * t / warmup)
    if t == warmup:
        return lr
    if t == total:
        return lr * final_ratio
    progress = (t - warmup) / (total - warmup)
    return lr * (final_ratio + (1.0 - final_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def project_scales(scales, d_head: int | None = None, enabled: bool | None = None):
    """Clamp every head scale to at least 1/sqrt(d_head); identity when disabled.

    Accepts a ScaleVector (its own ``d_head`` and ``constraint`` flag are used
    unless overridden) or a raw array plus ``d_head``.
    """
    if isinstance(scales, ScaleVector):
        d = scales.d_head if d_head is None else d_head
        on = scales.constraint if enabled is None else enabled
        return ScaleVector(project_scales(scales.values, d, on), scales.d_head, scales.constraint)
    if d_head is None:
        raise ParameterError("project_scales on a raw array needs d_head")
    values = np.asarray(scales, dtype=np.float64)
    if enabled is False:
        return values.copy()
    return np.maximum(values, 1.0 / math.sqrt(d_head))
