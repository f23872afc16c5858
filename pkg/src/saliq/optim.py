"""AdamW with decoupled weight decay and per-group non-finite guards."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    steps: dict[int, int] = field(default_factory=dict)


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState,
               keys: list[int] | None = None) -> bool:
    """Update ``params`` in place. Returns False (and leaves everything
    untouched) when any gradient holds a NaN or Inf.

    ``keys`` name each parameter's slot in ``state``; defaults to positions.
    """
    if any(not np.all(np.isfinite(g)) for g in grads):
        return False
    b1, b2 = state.beta1, state.beta2
    keys = range(len(params)) if keys is None else keys
    for i, p, g in zip(keys, params, grads):
        if p.shape != g.shape:
            raise ValueError(f"adamw_step: param shape {p.shape} vs grad shape {g.shape}")
        t = state.steps.get(i, 0) + 1
        state.steps[i] = t
        m = state.m.get(i)
        v = state.v.get(i)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[i], state.v[i] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True


class AdamW:
    """AdamW over groups of :class:`Tensor` parameters.

    ``groups`` is a list of dicts with keys ``params``, ``lr`` and optional
    ``weight_decay``. A group whose gradients are not all finite skips the step
    and bumps :attr:`skipped`.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps: float = 1e-8):
        if isinstance(groups, (list, tuple)) and groups and isinstance(groups[0], Tensor):
            raise TypeError("pass parameter groups as dicts: [{'params': [...], 'lr': ...}]")
        self.groups = []
        for g in groups:
            state = OptimizerState(lr=g["lr"], weight_decay=g.get("weight_decay", 0.0),
                                   beta1=betas[0], beta2=betas[1], eps=eps)
            self.groups.append((list(g["params"]), state))
        self.skipped = 0

    @property
    def params(self) -> list[Tensor]:
        return [p for params, _ in self.groups for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for params, state in self.groups:
            keys = [i for i, p in enumerate(params) if p.grad is not None]
            if not keys:
                continue
            ok = adamw_step([params[i].data for i in keys], [params[i].grad for i in keys], state, keys)
            if not ok:
                self.skipped += 1
