"""The shared NCA rule: perception, hardware-conditioned update, rollout.

Each cell carries a mutable state vector (the workspace the task lives in)
and an immutable hardware vector.  One step of the automaton:

  1. a learnable convolution turns the mutable state into a per-cell
     perception vector P,
  2. the hardware vector picks attention weights over N pathway networks,
     alpha = softmax_t(I @ W_embed, T),
  3. every pathway maps P to a candidate update V_h,
  4. the cell updates residually: S' = S + sum_h alpha_h V_h.

All cells update synchronously from the time-t snapshot.  Because the
hardware field never changes during a rollout, alpha is computed once and
reused by every step.

The N pathway MLPs are stored folded into single matrices (hidden weights
side by side, output weights stacked), which turns the per-step pathway math
into three matrix products instead of 3N small ones.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor


@dataclass
class GridState:
    """Mutable workspace [H,W,C_mut] plus immutable hardware field [H,W,C_hw]."""

    mutable: Tensor
    immutable: Tensor

    def __post_init__(self):
        if self.mutable.shape[:2] != self.immutable.shape[:2]:
            raise ValueError(
                f"spatial dims differ: {self.mutable.shape[:2]} vs {self.immutable.shape[:2]}"
            )

    @property
    def height(self) -> int:
        return self.mutable.shape[0]

    @property
    def width(self) -> int:
        return self.mutable.shape[1]


class RuleParams:
    """All learned parameters of the shared update rule.

    filters      [k,k,C_mut,C_perc]   perception convolution
    w_embed      [C_hw,N]             hardware -> pathway logits
    pathway_w1   [C_perc,N*hidden]    hidden weights, pathway h in columns h*hidden..(h+1)*hidden
    pathway_b1   [1,N*hidden]
    pathway_w2   [N*hidden,C_mut]     output weights, pathway h in rows h*hidden..(h+1)*hidden
    pathway_b2   [N,C_mut]            per-pathway output bias

    Output weights and biases start at zero, so an untrained rule is the
    identity dynamics (a standard NCA stability measure).
    """

    FIELDS = ("filters", "w_embed", "pathway_w1", "pathway_b1", "pathway_w2", "pathway_b2")

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        k, cm, cp = cfg.kernel_size, cfg.c_mut, cfg.c_perc
        n, h = cfg.n_pathways, cfg.hidden_width
        self.cfg = cfg

        def fan_in_uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32),
                          requires_grad=True)

        self.filters = fan_in_uniform((k, k, cm, cp), k * k * cm)
        self.w_embed = fan_in_uniform((cfg.c_hw, n), cfg.c_hw)
        self.pathway_w1 = fan_in_uniform((cp, n * h), cp)
        self.pathway_b1 = fan_in_uniform((1, n * h), cp)
        self.pathway_w2 = Tensor(np.zeros((n * h, cm), dtype=np.float32), requires_grad=True)
        self.pathway_b2 = Tensor(np.zeros((n, cm), dtype=np.float32), requires_grad=True)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.FIELDS:
            yield name, getattr(self, name)

    def set_requires_grad(self, flag: bool) -> None:
        for _, p in self.named():
            p.requires_grad = flag
            p.node = None


def perceive(state: Tensor, filters: Tensor, padding: str = "zero") -> Tensor:
    """Per-cell perception field; bias-free, so zero state gives zero P."""
    return T.conv2d(state, filters, padding=padding)


def attention_weights(hardware: Tensor, params: RuleParams) -> Tensor:
    """alpha = softmax_t(I @ W_embed, T) per cell: [...,C_hw] -> [...,N]."""
    flat = T.reshape(hardware, (-1, params.cfg.c_hw))
    logits = T.matmul(flat, params.w_embed)
    alpha = T.softmax_t(logits, params.cfg.temperature, axis=-1)
    return T.reshape(alpha, hardware.shape[:-1] + (params.cfg.n_pathways,))


def _expand_alpha(alpha_flat: Tensor, hidden: int) -> Tensor:
    """Repeat each pathway weight across its hidden block: [M,N] -> [M,N*hidden]."""
    m, n = alpha_flat.shape
    a3 = T.reshape(alpha_flat, (m, n, 1))
    return T.reshape(T.broadcast_to(a3, (m, n, hidden)), (m, n * hidden))


def update_cell(p_vec: Tensor, i_vec: Tensor, params: RuleParams) -> Tensor:
    """Single-cell update: mix the N pathway outputs by the attention weights
    the hardware vector selects.  [C_perc],[C_hw] -> [C_mut]."""
    cfg = params.cfg
    alpha = T.reshape(attention_weights(T.reshape(i_vec, (1, cfg.c_hw)), params),
                      (1, cfg.n_pathways))
    alpha_rep = _expand_alpha(alpha, cfg.hidden_width)
    pf = T.reshape(p_vec, (1, cfg.c_perc))
    hid = T.ACTIVATIONS[cfg.activation](T.matmul(pf, params.pathway_w1) + params.pathway_b1)
    delta = T.matmul(hid * alpha_rep, params.pathway_w2) + T.matmul(alpha, params.pathway_b2)
    return T.reshape(delta, (cfg.c_mut,))


def _step_core(mutable: Tensor, alpha_flat: Tensor, alpha_rep: Tensor,
               params: RuleParams, fire_mask: np.ndarray | None = None) -> Tensor:
    """One synchronous update on a batched state [B,H,W,C_mut]."""
    cfg = params.cfg
    b, h, w, cm = mutable.shape
    p = perceive(mutable, params.filters, padding=cfg.padding)
    pf = T.reshape(p, (b * h * w, cfg.c_perc))
    hid = T.ACTIVATIONS[cfg.activation](T.matmul(pf, params.pathway_w1) + params.pathway_b1)
    delta = T.matmul(hid * alpha_rep, params.pathway_w2) + T.matmul(alpha_flat, params.pathway_b2)
    delta = T.reshape(delta, (b, h, w, cm))
    if fire_mask is not None:
        delta = delta * Tensor(fire_mask)
    return mutable + delta


class RolloutCtx:
    """Per-rollout cache: attention weights computed once from the hardware."""

    def __init__(self, hardware: Tensor, params: RuleParams):
        cfg = params.cfg
        flat = T.reshape(hardware, (-1, cfg.c_hw))
        logits = T.matmul(flat, params.w_embed)
        self.alpha_flat = T.softmax_t(logits, cfg.temperature, axis=-1)
        self.alpha_rep = _expand_alpha(self.alpha_flat, cfg.hidden_width)
        self.params = params

    def step(self, mutable: Tensor, fire_mask: np.ndarray | None = None) -> Tensor:
        return _step_core(mutable, self.alpha_flat, self.alpha_rep, self.params, fire_mask)


def step(grid: GridState, params: RuleParams,
         rng: np.random.Generator | None = None) -> GridState:
    """One synchronous step; the immutable field is passed through untouched."""
    ctx = RolloutCtx(_batched(grid.immutable), params)
    mask = _sample_fire_mask(grid, params.cfg, rng)
    new_mut = ctx.step(_batched(grid.mutable), mask)
    return GridState(T.reshape(new_mut, grid.mutable.shape), grid.immutable)


def _batched(t: Tensor) -> Tensor:
    return T.reshape(t, (1,) + t.shape) if t.ndim == 3 else t


def _sample_fire_mask(grid: GridState, cfg: ModelConfig,
                      rng: np.random.Generator | None) -> np.ndarray | None:
    if cfg.fire_rate <= 0.0:
        return None
    if rng is None:
        raise ValueError("stochastic firing requires an rng")
    keep = rng.random((1, grid.height, grid.width, 1)) < cfg.fire_rate
    return keep.astype(np.float32)


def sample_eval_index(t_steps: int, rng: np.random.Generator) -> int:
    """Uniform draw from the inclusive window [t_steps - t_steps//4, t_steps]."""
    lo = t_steps - t_steps // 4
    return int(rng.integers(lo, t_steps + 1))


def rollout(grid: GridState, params: RuleParams, t_steps: int,
            rng: np.random.Generator) -> tuple[list[GridState], int]:
    """Apply the rule t_steps times; returns all states (t_steps+1 of them,
    the initial state included) and the sampled evaluation index."""
    if t_steps < 1:
        raise ValueError(f"t_steps must be >= 1, got {t_steps}")
    ctx = RolloutCtx(_batched(grid.immutable), params)
    shape = grid.mutable.shape
    states = [grid]
    mut = _batched(grid.mutable)
    for _ in range(t_steps):
        mask = _sample_fire_mask(grid, params.cfg, rng)
        mut = ctx.step(mut, mask)
        states.append(GridState(T.reshape(mut, shape), grid.immutable))
    return states, sample_eval_index(t_steps, rng)
