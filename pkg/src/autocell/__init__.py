"""A neural-cellular-automaton computational substrate.

A grid of cells runs a single learned local rule; an immutable per-cell
"hardware" field conditions the rule through attention over parallel update
pathways, so the same rule computes different matrix operations depending on
the hardware it sits on.  The package covers the full workflow: an autodiff
engine, the rule itself, hardware construction, task generation, joint and
hardware-only training, MNIST classifier emulation via 8x8 block products,
and a small DSL for chaining operations through staged hardware swaps.
"""
from .config import ModelConfig, TrainConfig
from .tensor import Tensor, backward, no_grad
from .nca import GridState, RuleParams, rollout, sample_eval_index, step
from .hardware import (ModularComponents, MonolithicHardware, Placement,
                       assemble_modular, build_monolithic)
from .tasks import Distribution, TaskInstance, make_instance, symbolic_target
from .training import (TrainState, evaluate, finetune_hardware,
                       init_train_state, masked_mse, train_joint)
from .checkpoint import load_checkpoint, save_checkpoint
from .composer import compile_plan, execute_plan, parse_task_graph

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "TrainConfig", "Tensor", "backward", "no_grad",
    "GridState", "RuleParams", "rollout", "sample_eval_index", "step",
    "ModularComponents", "MonolithicHardware", "Placement",
    "assemble_modular", "build_monolithic",
    "Distribution", "TaskInstance", "make_instance", "symbolic_target",
    "TrainState", "evaluate", "finetune_hardware", "init_train_state",
    "masked_mse", "train_joint",
    "load_checkpoint", "save_checkpoint",
    "compile_plan", "execute_plan", "parse_task_graph",
]
