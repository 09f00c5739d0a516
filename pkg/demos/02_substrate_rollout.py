"""
The cellular substrate: grids, hardware conditioning, rollouts
==============================================================

A grid carries mutable state (the workspace that evolves) next to an
immutable hardware field (per-cell conditioning that never changes during a
rollout).  The update rule is local and synchronous: each cell perceives its
3x3 neighborhood, mixes N pathway outputs by attention weights its hardware
vector selects, and adds the result to its state.
"""

import numpy as np

from autocell.config import ModelConfig
from autocell.nca import GridState, RuleParams, attention_weights, rollout
from autocell.tensor import Tensor

rng = np.random.default_rng(7)
cfg = ModelConfig(c_mut=8, c_hw=4, c_perc=16, n_pathways=4, hidden_width=16)

# Fresh parameters start with zeroed pathway output layers, so the untrained
# rule is the identity dynamics: nothing moves until training switches it on.
params = RuleParams(cfg, rng)
mut = rng.normal(scale=0.3, size=(12, 12, cfg.c_mut)).astype(np.float32)
hw = rng.normal(scale=0.3, size=(12, 12, cfg.c_hw)).astype(np.float32)
grid = GridState(Tensor(mut), Tensor(hw))

states, eval_idx = rollout(grid, params, 16, rng)
print("trajectory length:", len(states), "(t_steps + 1)")
print("eval index sampled from [12,16]:", eval_idx)
print("untrained rule leaves the state unchanged:",
      np.array_equal(states[-1].mutable.data, mut))

# Give the output layers random weights and the dynamics wake up, while the
# hardware stays bitwise frozen.
params.pathway_w2.data[:] = rng.normal(scale=0.2, size=params.pathway_w2.shape)
states, _ = rollout(grid, params, 16, rng)
drift = float(np.abs(states[-1].mutable.data - mut).mean())
print(f"after arming the output layers, mean |change| = {drift:.4f}")
print("hardware bitwise constant:",
      np.array_equal(states[-1].immutable.data, hw))

# The hardware field conditions the rule through per-cell attention over the
# N pathways; rows sum to one.
alpha = attention_weights(grid.immutable, params).data
print("attention shape:", alpha.shape, " row sums ~ 1:",
      np.allclose(alpha.sum(-1), 1.0, atol=1e-5))
print("pathway shares at cell (0,0):", np.round(alpha[0, 0], 3))
