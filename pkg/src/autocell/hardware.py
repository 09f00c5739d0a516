"""Construction of the immutable hardware field.

Two styles exist.  Monolithic hardware is a full learned [H,W,C_hw] field
bound to one task layout.  Modular hardware is assembled per instance from
three kinds of reusable learned vectors: a task embedding added to every
cell, an input embedding added over each input region, and an output
embedding added over each output region.  Assembly is additive, hence
order-independent, and works unchanged on any grid size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TASK_KINDS
from .tensor import Tensor


@dataclass(frozen=True)
class Placement:
    """A rectangular grid region with an IO role and a linking tag."""

    role: str      # "input" | "output"
    row: int
    col: int
    rows: int
    cols: int
    tag: str = ""

    def __post_init__(self):
        if self.role not in ("input", "output"):
            raise ValueError(f"placement role must be input or output, got {self.role!r}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("placement extents must be positive")

    def check_bounds(self, h: int, w: int) -> None:
        if self.row < 0 or self.col < 0 or self.row + self.rows > h or self.col + self.cols > w:
            raise ValueError(
                f"placement {self.tag or self.role} out of bounds: "
                f"({self.row},{self.col})+({self.rows},{self.cols}) on {h}x{w}"
            )

    def slices(self) -> tuple[slice, slice]:
        return slice(self.row, self.row + self.rows), slice(self.col, self.col + self.cols)

    def overlaps(self, other: "Placement") -> bool:
        return not (self.row + self.rows <= other.row or other.row + other.rows <= self.row
                    or self.col + self.cols <= other.col or other.col + other.cols <= self.col)


@dataclass
class MonolithicHardware:
    """A full-grid learned hardware field bound to one task identity."""

    task_id: str
    field: Tensor


class ModularComponents:
    """The reusable learned vectors of the modular hardware style."""

    def __init__(self, c_hw: int, init_scale: float, rng: np.random.Generator,
                 kinds: tuple[str, ...] = TASK_KINDS):
        def vec():
            return Tensor(rng.uniform(-init_scale, init_scale, size=c_hw).astype(np.float32),
                          requires_grad=True)

        self.c_hw = c_hw
        self.input_embed = vec()
        self.output_embed = vec()
        self.task_embeds: dict[str, Tensor] = {k: vec() for k in kinds}

    def io_named(self):
        yield "input_embed", self.input_embed
        yield "output_embed", self.output_embed


def build_monolithic(task_id: str, h: int, w: int, c_hw: int, init_scale: float,
                     rng: np.random.Generator) -> MonolithicHardware:
    """A fresh learnable field for one fixed task layout."""
    if h < 1 or w < 1:
        raise ValueError("grid dims must be positive")
    field = Tensor(rng.uniform(-init_scale, init_scale, size=(h, w, c_hw)).astype(np.float32),
                   requires_grad=True)
    return MonolithicHardware(task_id, field)


def assemble_modular(components: ModularComponents, task_kind: str,
                     placements: list[Placement], h: int, w: int) -> Tensor:
    """Assemble a [H,W,C_hw] field: the task embedding everywhere, plus the
    input/output embedding over each placed region.

    The result is differentiable with respect to all three embedding kinds;
    region membership enters as constant indicator masks.
    """
    if task_kind not in components.task_embeds:
        raise KeyError(f"unknown task kind {task_kind!r}")
    for p in placements:
        p.check_bounds(h, w)
    c = components.c_hw
    field = T.broadcast_to(T.reshape(components.task_embeds[task_kind], (1, 1, c)), (h, w, c))
    masks: dict[str, np.ndarray] = {}
    for p in placements:
        ind = masks.setdefault(p.role, np.zeros((h, w, 1), dtype=np.float32))
        rs, cs = p.slices()
        ind[rs, cs, 0] += 1.0
    for role, embed in (("input", components.input_embed), ("output", components.output_embed)):
        if role in masks:
            contrib = Tensor(masks[role]) * T.broadcast_to(T.reshape(embed, (1, 1, c)), (h, w, c))
            field = field + contrib
    return field
