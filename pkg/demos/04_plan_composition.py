"""
Composing matrix programs on one grid
=====================================

A plan file lays out named matrix regions on a grid and wires them together
with task edges, grouped into stages that run one after another.  Each stage
compiles to its own hardware field from the shared component library, so the
same physical cells compute different operations at different times.

The plan below distributes a matrix to two operand slots, multiplies them,
and rotates the product back into the original region: C ends up holding
rotate90(M @ M).
"""

import numpy as np

from autocell.composer import compile_plan, execute_plan, parse_task_graph
from autocell.hardware import ModularComponents
from autocell.tasks import symbolic_target

PLAN = """
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
"""

graph = parse_task_graph(PLAN)
print("nodes:", sorted(graph.nodes))
print("stage kinds:", [[graph.edges[i].kind for i in s.edge_indices]
                       for s in graph.stages])

# Compilation resolves shapes, decides which tags need initial values, and
# assembles a hardware field per stage.
components = ModularComponents(8, 0.1, np.random.default_rng(0))
plan = compile_plan(graph, components)
print("required inputs:", plan.required_inputs)
print("stage 0 hardware shape:", plan.stages[0].hardware.shape)

rng = np.random.default_rng(5)
M = rng.uniform(-1, 1, size=(8, 8)).astype(np.float32)
final, outputs, trace = execute_plan(plan, {"C": M}, backend="oracle")

want = symbolic_target("rotate90", [symbolic_target("matmul", [M, M])])
got = final[12:20, 12:20, 0]
print("C region == rotate90(M @ M):", np.allclose(got, want))
for s_idx, kind, steps, mse in trace:
    print(f"  stage {s_idx}: {kind:8s} {steps} steps  mse {mse:.6f}")

# Compilation checks shapes along every edge and reports where the plan text
# went wrong, so bad wiring fails before anything runs.
bad = parse_task_graph("""
    grid 16 16
    node A 2 2 2 4
    node B 2 10 2 4
    edge A -> B : transpose
    stage { A->B ; steps 12 }
""")
try:
    compile_plan(bad, components)
except Exception as err:
    print("compile rejected the plan:", err)
