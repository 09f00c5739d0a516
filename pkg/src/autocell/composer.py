"""Task-graph DSL, plan compiler, and staged executor.

A plan text declares a grid, tagged rectangular regions, operation edges
between them, and ordered stages:

    # distribute-multiply-rotate
    grid 32 32
    node C   12 12 8 8
    node P    2  2 8 8
    node Q    2 22 8 8
    node R   22 12 8 8
    edge C -> P : identity
    edge C -> Q : identity
    edge P,Q -> R : matmul
    edge R -> C : rotate
    stage { C->P C->Q ; steps 24 }
    stage { P,Q->R ; steps 24 }
    stage { R->C ; steps 24 }

With `grid H W normalized` node coordinates are fractions of the grid, so
the same plan runs on any grid size.  Stages reference edges either by
declaration index or by `SRC->DST` form.  Each stage assembles one modular
hardware field (one task kind per stage); executing a plan swaps only that
immutable field between stages while the mutable state persists bitwise.

The oracle backend applies the exact symbolic operation region-to-region and
is the semantic reference; the NCA backend rolls out the learned rule and
reports its per-stage deviation from the oracle trace.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .hardware import ModularComponents, Placement, assemble_modular
from .tasks import output_shape, symbolic_target
from .tensor import Tensor
from .training import TrainState, batch_rollout

OP_ALIASES = {
    "identity": "identity", "copy": "identity",
    "matmul": "matmul", "mul": "matmul",
    "transpose": "transpose",
    "rotate": "rotate90", "rotate90": "rotate90",
}


class ComposeError(Exception):
    def __init__(self, msg: str, line: int | None = None, col: int | None = None):
        self.line = line
        self.col = col
        where = ""
        if line is not None:
            where = f" at line {line}" + (f", col {col}" if col is not None else "")
        super().__init__(msg + where)


@dataclass(frozen=True)
class Node:
    tag: str
    row: int
    col: int
    rows: int
    cols: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


@dataclass(frozen=True)
class Edge:
    sources: tuple[str, ...]
    dest: str
    kind: str
    line: int


@dataclass(frozen=True)
class Stage:
    edge_indices: tuple[int, ...]
    steps: int
    clear: bool = False


@dataclass
class TaskGraph:
    h: int
    w: int
    normalized: bool
    nodes: dict[str, Node] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)
    stages: list[Stage] = field(default_factory=list)


def _col_of(line_text: str, token: str) -> int:
    pos = line_text.find(token)
    return pos + 1 if pos >= 0 else 1


def parse_task_graph(text: str) -> TaskGraph:
    graph: TaskGraph | None = None
    lines = text.splitlines()
    pending_stage: list[str] | None = None
    stage_start_line = 0

    def fail(msg: str, ln: int, col: int | None = None):
        raise ComposeError(msg, ln, col)

    for ln, raw in enumerate(lines, start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue

        if pending_stage is not None:
            if "}" in body:
                inner, _, rest = body.partition("}")
                if rest.strip():
                    fail("unexpected text after '}'", ln, _col_of(raw, rest.strip()))
                pending_stage.append(inner)
                _finish_stage(graph, " ".join(pending_stage), stage_start_line)
                pending_stage = None
            else:
                pending_stage.append(body)
            continue

        tokens = body.split()
        head = tokens[0]

        if head == "grid":
            if graph is not None:
                fail("duplicate grid declaration", ln)
            if len(tokens) not in (3, 4):
                fail("grid expects: grid H W [normalized]", ln)
            try:
                h, w = int(tokens[1]), int(tokens[2])
            except ValueError:
                fail("grid dimensions must be integers", ln, _col_of(raw, tokens[1]))
            if h < 1 or w < 1:
                fail("grid dimensions must be positive", ln)
            normalized = False
            if len(tokens) == 4:
                if tokens[3] != "normalized":
                    fail(f"unknown grid flag {tokens[3]!r}", ln, _col_of(raw, tokens[3]))
                normalized = True
            graph = TaskGraph(h, w, normalized)
            continue

        if graph is None:
            fail("the grid declaration must come first", ln)

        if head == "node":
            if len(tokens) != 6:
                fail("node expects: node TAG r c rows cols", ln)
            tag = tokens[1]
            if tag in graph.nodes:
                fail(f"duplicate node tag {tag}", ln, _col_of(raw, tag))
            try:
                vals = [float(t) for t in tokens[2:6]]
            except ValueError:
                fail("node coordinates must be numbers", ln)
            if graph.normalized:
                r = int(round(vals[0] * graph.h))
                c = int(round(vals[1] * graph.w))
                rows = int(round(vals[2] * graph.h))
                cols = int(round(vals[3] * graph.w))
            else:
                if any(v != int(v) for v in vals):
                    fail("absolute node coordinates must be integers", ln)
                r, c, rows, cols = (int(v) for v in vals)
            if rows < 1 or cols < 1:
                fail(f"node {tag} has an empty region", ln)
            if r < 0 or c < 0 or r + rows > graph.h or c + cols > graph.w:
                fail(f"node {tag} region out of bounds", ln, _col_of(raw, tag))
            graph.nodes[tag] = Node(tag, r, c, rows, cols)
            continue

        if head == "edge":
            rest = body[len("edge"):].strip()
            if "->" not in rest:
                fail("edge expects: edge SRC[,SRC2] -> DST : OP", ln)
            left, _, right = rest.partition("->")
            if ":" not in right:
                fail("edge is missing ': OP'", ln)
            dst_part, _, op_part = right.partition(":")
            sources = tuple(s.strip() for s in left.split(",") if s.strip())
            dest = dst_part.strip()
            op_name = op_part.strip().lower()
            if not sources or not dest:
                fail("edge needs at least one source and a destination", ln)
            for tag in (*sources, dest):
                if tag not in graph.nodes:
                    fail(f"undeclared tag {tag}", ln, _col_of(raw, tag))
            if op_name not in OP_ALIASES:
                fail(f"unknown operation {op_name!r}", ln, _col_of(raw, op_part.strip()))
            kind = OP_ALIASES[op_name]
            want = 2 if kind == "matmul" else 1
            if len(sources) != want:
                fail(f"{kind} takes exactly {want} source(s), got {len(sources)}", ln)
            graph.edges.append(Edge(sources, dest, kind, ln))
            continue

        if head == "stage":
            rest = body[len("stage"):].strip()
            if not rest.startswith("{"):
                fail("stage expects: stage { edge-refs ; steps N }", ln)
            rest = rest[1:]
            if "}" in rest:
                inner, _, tail = rest.partition("}")
                if tail.strip():
                    fail("unexpected text after '}'", ln, _col_of(raw, tail.strip()))
                _finish_stage(graph, inner, ln)
            else:
                pending_stage = [rest]
                stage_start_line = ln
            continue

        fail(f"unknown statement {head!r}", ln, _col_of(raw, head))

    if pending_stage is not None:
        fail("unterminated stage block", stage_start_line)
    if graph is None:
        raise ComposeError("empty plan: no grid declaration")
    return graph


def _finish_stage(graph: TaskGraph, body: str, ln: int) -> None:
    parts = [p.strip() for p in body.split(";")]
    refs_part = parts[0] if parts else ""
    steps = None
    clear = False
    for clause in parts[1:]:
        if not clause:
            continue
        words = clause.split()
        if words[0] == "steps":
            if len(words) != 2:
                raise ComposeError("steps expects one integer", ln)
            try:
                steps = int(words[1])
            except ValueError:
                raise ComposeError(f"bad step count {words[1]!r}", ln)
            if steps < 1:
                raise ComposeError("steps must be >= 1", ln)
        elif words[0] == "clear" and len(words) == 1:
            clear = True
        else:
            raise ComposeError(f"unknown stage clause {clause!r}", ln)
    if steps is None:
        raise ComposeError("stage is missing a steps clause", ln)
    # merge whitespace-split pieces of a single reference like "A, B -> C"
    merged: list[str] = []
    for tok in refs_part.split():
        if merged and (merged[-1].endswith((",", "->")) or tok.startswith((",", "->"))):
            merged[-1] += tok
        else:
            merged.append(tok)
    if not merged:
        raise ComposeError("stage references no edges", ln)
    indices: list[int] = []
    for ref in merged:
        if ref.isdigit():
            idx = int(ref)
            if idx >= len(graph.edges):
                raise ComposeError(f"edge index {idx} out of range", ln)
            indices.append(idx)
            continue
        if "->" not in ref:
            raise ComposeError(f"bad edge reference {ref!r}", ln)
        left, _, dest = ref.partition("->")
        sources = tuple(s for s in left.split(",") if s)
        matches = [i for i, e in enumerate(graph.edges)
                   if e.dest == dest and e.sources == sources]
        if not matches:
            raise ComposeError(f"no edge matches reference {ref!r}", ln)
        if len(matches) > 1:
            raise ComposeError(f"ambiguous edge reference {ref!r}", ln)
        indices.append(matches[0])
    graph.stages.append(Stage(tuple(indices), steps, clear))


@dataclass
class PlanStage:
    kind: str
    steps: int
    clear: bool
    edges: list[Edge]
    placements: list[Placement]
    hardware: Tensor


@dataclass
class ExecutionPlan:
    h: int
    w: int
    stages: list[PlanStage]
    nodes: dict[str, Node]
    required_inputs: dict[str, tuple[int, int]]


def compile_plan(graph: TaskGraph, components: ModularComponents) -> ExecutionPlan:
    if not graph.stages:
        raise ComposeError("plan has no stages")
    produced: set[str] = set()
    required: dict[str, tuple[int, int]] = {}
    stages: list[PlanStage] = []
    for s_idx, stage in enumerate(graph.stages):
        edges = [graph.edges[i] for i in stage.edge_indices]
        kinds = sorted(set(e.kind for e in edges))
        if len(kinds) != 1:
            raise ComposeError(
                f"stage {s_idx} mixes task kinds {kinds}: one kind per stage")
        kind = kinds[0]
        sources: dict[str, Node] = {}
        dests: dict[str, Node] = {}
        for e in edges:
            in_shapes = [graph.nodes[t].shape for t in e.sources]
            want = output_shape(e.kind, in_shapes)
            have = graph.nodes[e.dest].shape
            if want != have:
                raise ComposeError(
                    f"edge at line {e.line}: destination {e.dest} is {have}, "
                    f"operation produces {want}")
            if e.dest in dests:
                raise ComposeError(
                    f"stage {s_idx}: tag {e.dest} is written by two edges")
            dests[e.dest] = graph.nodes[e.dest]
            for t in e.sources:
                sources[t] = graph.nodes[t]
        both = set(sources) & set(dests)
        if both:
            raise ComposeError(
                f"stage {s_idx}: role conflict, {sorted(both)} used as both "
                f"input and output")
        for t in sources:
            if t not in produced and t not in required:
                required[t] = graph.nodes[t].shape
        produced.update(dests)

        placements = [Placement("input", n.row, n.col, n.rows, n.cols, t)
                      for t, n in sorted(sources.items())]
        placements += [Placement("output", n.row, n.col, n.rows, n.cols, t)
                       for t, n in sorted(dests.items())]
        hw = assemble_modular(components, kind, placements, graph.h, graph.w)
        stages.append(PlanStage(kind, stage.steps, stage.clear, edges, placements, hw))
    return ExecutionPlan(graph.h, graph.w, stages, dict(graph.nodes), required)


def _region(values: np.ndarray, node: Node) -> np.ndarray:
    return values[node.row:node.row + node.rows, node.col:node.col + node.cols]


def execute_plan(plan: ExecutionPlan, initial: dict[str, np.ndarray],
                 backend: str = "oracle", state: TrainState | None = None
                 ) -> tuple[np.ndarray, list[dict[str, np.ndarray]], list[tuple]]:
    """Run the plan; returns the final mutable state [H,W,C_mut], the decoded
    outputs per stage, and a trace of (stage_idx, kind, steps, output_mse).

    The oracle backend writes exact symbolic results region-to-region.  The
    NCA backend rolls out the rule per stage on a persistent mutable state
    and its trace reports the MSE of each stage's outputs against the oracle
    run on the same plan.
    """
    if backend not in ("oracle", "nca"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "nca" and state is None:
        raise ValueError("the nca backend needs a trained checkpoint")
    for tag, shape in plan.required_inputs.items():
        if tag not in initial:
            raise ValueError(f"missing initial matrix for tag {tag}")
        if tuple(initial[tag].shape) != shape:
            raise ValueError(
                f"initial matrix for {tag} has shape {initial[tag].shape}, "
                f"node is {shape}")

    c_mut = state.model.c_mut if state is not None else 4
    mut = np.zeros((plan.h, plan.w, c_mut), dtype=np.float32)
    oracle_values = np.zeros((plan.h, plan.w), dtype=np.float32)
    for tag, m in initial.items():
        if tag not in plan.nodes:
            raise ValueError(f"unknown initial tag {tag}")
        _region(mut[:, :, 0], plan.nodes[tag])[:] = m
        _region(oracle_values, plan.nodes[tag])[:] = m

    stage_outputs: list[dict[str, np.ndarray]] = []
    trace: list[tuple] = []
    for s_idx, st in enumerate(plan.stages):
        # the oracle reads the pre-stage snapshot, then writes all results
        snapshot = oracle_values.copy()
        oracle_out: dict[str, np.ndarray] = {}
        for e in st.edges:
            ins = [_region(snapshot, plan.nodes[t]).copy() for t in e.sources]
            oracle_out[e.dest] = symbolic_target(e.kind, ins)
        for tag, result in oracle_out.items():
            _region(oracle_values, plan.nodes[tag])[:] = result

        if backend == "oracle":
            for tag, result in oracle_out.items():
                _region(mut[:, :, 0], plan.nodes[tag])[:] = result
            outputs = {t: r.copy() for t, r in oracle_out.items()}
            mse = 0.0
        else:
            with T.no_grad():
                states = batch_rollout(mut[None], T.stack([st.hardware]),
                                       state.rule, st.steps)
            mut = np.ascontiguousarray(states[-1].data[0])
            outputs = {}
            err, cells = 0.0, 0
            for tag in oracle_out:
                node = plan.nodes[tag]
                got = _region(mut[:, :, 0], node).copy()
                outputs[tag] = got
                err += float(((got - oracle_out[tag]) ** 2).sum())
                cells += node.rows * node.cols
            mse = err / max(cells, 1)
        if st.clear:
            mut[:, :, 1:] = 0.0
        stage_outputs.append(outputs)
        trace.append((s_idx, st.kind, st.steps, mse))
    return mut, stage_outputs, trace


def write_trace(path: str, trace: list[tuple]) -> None:
    with open(path, "w") as fh:
        for s_idx, kind, steps, mse in trace:
            fh.write(f"{s_idx}\t{kind}\t{steps}\t{mse:.8f}\n")
