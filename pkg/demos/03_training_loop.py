"""
Joint training: one rule, many tasks
====================================

Training optimizes a single shared update rule together with a library of
hardware embeddings.  Parameters split into disjoint groups: the rule, the
shared input/output role embeddings, and one embedding per task kind.
Shared groups average gradients over the whole batch; a task group only sees
gradients from its own kind's instances, so a batch without that kind leaves
the group bitwise untouched.

This run is a short illustration of the mechanics on a small model, not a
converged training; see the README for the real training entry points.
"""

import time

import numpy as np

from autocell.config import ModelConfig, TrainConfig
from autocell.training import evaluate, finetune_hardware, init_train_state, train_joint

model = ModelConfig(c_mut=8, c_hw=4, c_perc=16, n_pathways=4, hidden_width=16)
train = TrainConfig(batch_size=4, t_steps=8, grid_h=12, grid_w=12,
                    min_size=2, max_size=3, placement="fixed", seed=3,
                    task_mix={"identity": 1.0, "transpose": 1.0})

state = init_train_state(model, train)
print("parameter groups:", sorted(state.registry.groups))
print("total parameters:", state.registry.n_params())

rows = train_joint(state, n_updates=20, log_path=None)
for u, kind, loss, wall in rows[:4]:
    print(f"  update {u}  {kind:10s} loss {loss:.4f}  ({wall:.0f} ms)")

# Eval draws fresh instances from a fixed seed, so numbers are comparable
# across runs and checkpoints.
print("eval:", {k: round(v, 4) for k, v in
                evaluate(state, ["identity", "transpose"], n=8, seed=11).items()})

# Fine-tuning freezes the rule and moves only hardware embeddings: cheaper
# per update, and the frozen groups stay bitwise identical.
before = state.rule.filters.data.copy()
t0 = time.time()
finetune_hardware(state, n_updates=10, log_path=None)
print(f"finetune: 10 updates in {time.time() - t0:.1f}s;",
      "rule bitwise unchanged:",
      np.array_equal(before, state.rule.filters.data))
