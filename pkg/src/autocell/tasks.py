"""Task instance generation: sample matrices, place them on the grid,
compute symbolic targets, and build loss masks.

Matrix values live in mutable channel 0 (the value channel); the remaining
channels start at zero and act as free workspace.  A task instance bundles
the encoded initial grid, the target values with their mask, the assembled
hardware field, and the rollout length.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .config import ModelConfig, TASK_KINDS
from .hardware import ModularComponents, MonolithicHardware, Placement, assemble_modular
from .nca import GridState
from .tensor import Tensor

ARITY = {"identity": 1, "matmul": 2, "transpose": 1, "rotate90": 1}


class InfeasiblePlacement(Exception):
    pass


@dataclass(frozen=True)
class Distribution:
    """A matrix value distribution; every sample ends up inside [-1,1]."""

    kind: str = "uniform"
    low: float = -1.0
    high: float = 1.0
    sigma: float = 0.5
    corr_width: int = 3
    sparsity: float = 0.9

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian", "correlated", "sparse"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.low >= self.high:
            raise ValueError("need low < high")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.corr_width < 1:
            raise ValueError("corr_width must be >= 1")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must lie in [0,1)")


def parse_distribution(spec: str) -> Distribution:
    """Build a Distribution from its config string.

    Bare kind names take the defaults.  Parameters follow after colons:
    uniform:LOW:HIGH, gaussian:SIGMA, correlated:WIDTH, sparse:FRACTION.
    """
    head, *params = spec.split(":")
    try:
        vals = [float(p) for p in params]
    except ValueError as e:
        raise ValueError(f"bad distribution parameter in {spec!r}") from e
    if not vals:
        return Distribution(kind=head)
    if head == "uniform":
        if len(vals) != 2:
            raise ValueError(f"uniform takes LOW:HIGH, got {spec!r}")
        return Distribution(kind=head, low=vals[0], high=vals[1])
    if len(vals) != 1:
        raise ValueError(f"{head} takes one parameter, got {spec!r}")
    if head == "gaussian":
        return Distribution(kind=head, sigma=vals[0])
    if head == "correlated":
        return Distribution(kind=head, corr_width=int(vals[0]))
    if head == "sparse":
        return Distribution(kind=head, sparsity=vals[0])
    raise ValueError(f"unknown distribution kind {head!r}")


def sample_matrix(dist: Distribution, r: int, c: int, rng: np.random.Generator) -> np.ndarray:
    """Draw an [r,c] matrix from the distribution, clamped to [-1,1]."""
    if r < 1 or c < 1:
        raise ValueError("matrix dims must be positive")
    if dist.kind == "uniform":
        m = rng.uniform(dist.low, dist.high, size=(r, c))
    elif dist.kind == "gaussian":
        m = np.clip(rng.normal(0.0, dist.sigma, size=(r, c)), -1.0, 1.0)
    elif dist.kind == "correlated":
        white = rng.normal(0.0, 1.0, size=(r, c))
        m = uniform_filter(white, size=dist.corr_width, mode="nearest")
        peak = np.abs(m).max()
        if peak > 0:
            m = m / peak
    else:  # sparse
        keep = rng.random((r, c)) >= dist.sparsity
        m = rng.uniform(dist.low, dist.high, size=(r, c)) * keep
    return np.clip(m, -1.0, 1.0).astype(np.float32)


def symbolic_target(kind: str, inputs: list[np.ndarray]) -> np.ndarray:
    """Exact result of the task on already-decoded matrices."""
    if kind not in ARITY:
        raise ValueError(f"unknown task kind {kind!r}")
    if len(inputs) != ARITY[kind]:
        raise ValueError(f"{kind} expects {ARITY[kind]} inputs, got {len(inputs)}")
    if kind == "identity":
        return inputs[0].astype(np.float32).copy()
    if kind == "transpose":
        return inputs[0].T.astype(np.float32).copy()
    if kind == "rotate90":
        # flipped transpose: a quarter turn counterclockwise
        return np.flipud(inputs[0].T).astype(np.float32).copy()
    a, b = inputs
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner-dim mismatch: {a.shape} x {b.shape}")
    return (a.astype(np.float32) @ b.astype(np.float32)).astype(np.float32)


def output_shape(kind: str, in_shapes: list[tuple[int, int]]) -> tuple[int, int]:
    """Shape rule of each task kind, checked without touching values."""
    if kind == "identity":
        return in_shapes[0]
    if kind in ("transpose", "rotate90"):
        r, c = in_shapes[0]
        return (c, r)
    (m, n), (n2, p) = in_shapes
    if n != n2:
        raise ValueError(f"matmul inner-dim mismatch: {in_shapes[0]} x {in_shapes[1]}")
    return (m, p)


def encode_values(values: np.ndarray, matrix: np.ndarray, placement: Placement,
                  h: int, w: int) -> None:
    """Write a matrix into a [H,W] value plane at the placement (in place)."""
    placement.check_bounds(h, w)
    if matrix.shape != (placement.rows, placement.cols):
        raise ValueError(f"matrix shape {matrix.shape} does not fit placement "
                         f"({placement.rows},{placement.cols})")
    rs, cs = placement.slices()
    values[rs, cs] = matrix


def encode_region(grid: GridState, matrix: np.ndarray, placement: Placement) -> GridState:
    """New grid with the matrix written into the value channel at the placement."""
    data = grid.mutable.data.copy()
    encode_values(data[:, :, 0], matrix, placement, grid.height, grid.width)
    return GridState(Tensor(data), grid.immutable)


def decode_region(grid: GridState, placement: Placement) -> np.ndarray:
    """Read the value channel over the placement."""
    placement.check_bounds(grid.height, grid.width)
    rs, cs = placement.slices()
    return grid.mutable.data[rs, cs, 0].copy()


def build_mask(placements: list[Placement], h: int, w: int) -> np.ndarray:
    """Binary [H,W] mask: 1 on the union of output regions."""
    outs = [p for p in placements if p.role == "output"]
    if not outs:
        raise ValueError("no output placements: empty mask is invalid for loss")
    mask = np.zeros((h, w), dtype=np.float32)
    for p in outs:
        p.check_bounds(h, w)
        rs, cs = p.slices()
        mask[rs, cs] = 1.0
    return mask


@dataclass
class TaskInstance:
    """One training or evaluation example."""

    kind: str
    initial: GridState
    target: np.ndarray        # [H,W], nonzero only inside the mask
    mask: np.ndarray          # [H,W] binary
    hardware: Tensor          # [H,W,C_hw]
    t_steps: int
    placements: list[Placement] = field(default_factory=list)
    inputs: list[np.ndarray] = field(default_factory=list)


def _fixed_placements(kind: str, h: int, w: int,
                      in_shapes: list[tuple[int, int]]) -> list[Placement]:
    """Deterministic layout built around short, straight transport paths.

    Single-input tasks stack input over output in the same columns, edge to
    edge, so every output cell's source sits a fixed offset straight up.
    MatMul uses a systolic arrangement: A sits left of the output sharing
    its rows, B sits above sharing its columns, so row streams of A and
    column streams of B cross inside the output region."""
    out_r, out_c = output_shape(kind, in_shapes)
    if kind == "matmul":
        (ar, ac), (br, bc) = in_shapes
        row0 = max((h - ar) // 2, br)
        col0 = max((w - bc) // 2, ac)
        pls = [
            Placement("input", row0, col0 - ac, ar, ac, "A"),
            Placement("input", row0 - br, col0, br, bc, "B"),
            Placement("output", row0, col0, out_r, out_c, "out"),
        ]
    else:
        (ar, ac) = in_shapes[0]
        top = max((h - ar - out_r) // 2, 0)
        pls = [
            Placement("input", top, (w - ac) // 2, ar, ac, "A"),
            Placement("output", top + ar, (w - out_c) // 2, out_r, out_c, "out"),
        ]
    for p in pls:
        p.check_bounds(h, w)
    return pls


def _random_placements(kind: str, h: int, w: int, in_shapes: list[tuple[int, int]],
                       rng: np.random.Generator, tries: int = 100) -> list[Placement]:
    out_r, out_c = output_shape(kind, in_shapes)
    tags = ["A", "B"][: len(in_shapes)]
    wanted = [("input", r, c, t) for (r, c), t in zip(in_shapes, tags)]
    wanted.append(("output", out_r, out_c, "out"))
    for _ in range(tries):
        placed: list[Placement] = []
        ok = True
        for role, r, c, tag in wanted:
            p = Placement(role, int(rng.integers(0, h - r + 1)),
                          int(rng.integers(0, w - c + 1)), r, c, tag)
            if any(p.overlaps(q) for q in placed):
                ok = False
                break
            placed.append(p)
        if ok:
            return placed
    raise InfeasiblePlacement(
        f"no non-overlapping layout found for {kind} on {h}x{w} after {tries} tries"
    )


def sample_sizes(kind: str, min_size: int, max_size: int,
                 rng: np.random.Generator, inner_min: int = 0,
                 inner_max: int = 0) -> list[tuple[int, int]]:
    """Matrix shapes for one instance; matmul shares the inner dimension.

    The inner dimension follows min/max_size unless inner_min/inner_max pin
    its own range (curriculum runs start matmul at inner dim 1).
    """
    def dim() -> int:
        return int(rng.integers(min_size, max_size + 1))

    if kind == "matmul":
        if inner_min:
            n = int(rng.integers(inner_min, inner_max + 1))
        else:
            n = dim()
        m, p = dim(), dim()
        return [(m, n), (n, p)]
    return [(dim(), dim())]


def make_instance(kind: str, dist: Distribution, h: int, w: int, policy: str,
                  t_steps: int, rng: np.random.Generator, *,
                  model: ModelConfig,
                  components: ModularComponents | None = None,
                  mono: MonolithicHardware | None = None,
                  min_size: int = 4, max_size: int = 8,
                  inner_min: int = 0, inner_max: int = 0) -> TaskInstance:
    """Sample one complete task instance.

    Modular mode assembles hardware from the components for the sampled
    placements; monolithic mode binds the given full-grid field, which only
    supports the fixed placement policy.
    """
    if kind not in ARITY:
        raise ValueError(f"unknown task kind {kind!r}")
    if (components is None) == (mono is None):
        raise ValueError("pass exactly one of components / mono")
    if mono is not None and policy != "fixed":
        raise ValueError("monolithic hardware is placement-bound; use the fixed policy")

    in_shapes = sample_sizes(kind, min_size, max_size, rng,
                             inner_min, inner_max)
    if policy == "fixed":
        placements = _fixed_placements(kind, h, w, in_shapes)
    elif policy == "random":
        placements = _random_placements(kind, h, w, in_shapes, rng)
    else:
        raise ValueError(f"unknown placement policy {policy!r}")

    inputs = [sample_matrix(dist, r, c, rng) for r, c in in_shapes]
    result = symbolic_target(kind, inputs)

    values = np.zeros((h, w), dtype=np.float32)
    for mat, p in zip(inputs, (p for p in placements if p.role == "input")):
        encode_values(values, mat, p, h, w)
    state = np.zeros((h, w, model.c_mut), dtype=np.float32)
    state[:, :, 0] = values

    target = np.zeros((h, w), dtype=np.float32)
    out_p = next(p for p in placements if p.role == "output")
    encode_values(target, result, out_p, h, w)
    mask = build_mask(placements, h, w)

    if components is not None:
        hw = assemble_modular(components, kind, placements, h, w)
    else:
        if mono.field.shape[:2] != (h, w):
            raise ValueError("monolithic field dims do not match the grid")
        hw = mono.field

    return TaskInstance(kind, GridState(Tensor(state), hw), target, mask, hw,
                        t_steps, placements, inputs)
