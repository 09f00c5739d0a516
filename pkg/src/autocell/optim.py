"""Adam optimizer with per-group state and global-norm gradient clipping.

Parameter groups step independently: each group owns its moment buffers and
step counter, so a group that receives no gradients in an update is left
exactly untouched (its counter does not advance either).
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class AdamState:
    """Moment buffers and step counter for one parameter group."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def buffers_for(self, name: str, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=np.float32)
            self.v[name] = np.zeros(shape, dtype=np.float32)
        return self.m[name], self.v[name]


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale a group's gradients in place so their global L2 norm is at most
    max_norm; returns the pre-clip norm."""
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-12))
        for name in sorted(grads):
            grads[name] *= scale
    return norm


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, strict: bool = False) -> None:
    """One bias-corrected Adam update over a whole parameter group.

    In strict mode gradients are checked for NaN/Inf; a non-finite gradient
    is reported and the whole group step is skipped.
    """
    if strict:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                import sys
                print(f"warning: non-finite gradient for {name}, step skipped",
                      file=sys.stderr)
                return
    state.t += 1
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    step = np.float32(state.lr * math.sqrt(bc2) / bc1)
    eps = np.float32(state.eps * math.sqrt(bc2))
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        m, v = state.buffers_for(name, p.data.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= step * m / (np.sqrt(v) + eps)
