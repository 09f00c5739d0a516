"""MNIST linear-classifier emulation through 8x8 block matrix jobs.

The pipeline: load MNIST, pre-train a bias-free 784x10 softmax classifier,
split the classification X @ W into 8x8 block products (rows padded to a
multiple of 8, the 10 logit columns zero-padded to 16), execute every block
product either exactly (oracle) or by rolling out a matmul-trained NCA on a
32x32 grid, then sum the partial products back into logits and compare the
emulated predictions against the reference classifier.

Per-job max-abs scaling (default on for the NCA backend) maps each block
into [-1,1], the value range the rule was trained on; the product is
rescaled by s_a*s_b afterwards.  A block whose scale is zero contributes an
exactly-zero partial, so such jobs are not executed at all.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .hardware import assemble_modular
from .tasks import _fixed_placements
from .training import TrainState, batch_rollout

BLOCK = 8
EMU_GRID = 32
PADDED_COLS = 16


@dataclass
class MnistDataset:
    images: np.ndarray   # [n,784] float32 in [0,1]
    labels: np.ndarray   # [n] int64 in 0..9

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images/labels count mismatch")


def _read_idx(path: str, magic_want: int) -> np.ndarray:
    with open(path, "rb") as probe:
        gzipped = probe.read(2) == b"\x1f\x8b"
    with (gzip.open if gzipped else open)(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise ValueError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != magic_want:
        raise ValueError(f"{path}: bad magic {magic}, expected {magic_want}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", blob[4:4 + 4 * ndim])
    data = np.frombuffer(blob, dtype=np.uint8, offset=4 + 4 * ndim)
    expect = 1
    for d in dims:
        expect *= d
    if data.size != expect:
        raise ValueError(f"{path}: payload has {data.size} bytes, header says {expect}")
    return data.reshape(dims)


def load_mnist(images_path: str, labels_path: str) -> MnistDataset:
    """Read an IDX image/label pair (plain or gzipped), scaling pixels to [0,1]."""
    raw = _read_idx(images_path, 2051)
    if raw.ndim != 3 or raw.shape[1:] != (28, 28):
        raise ValueError(f"{images_path}: expected n x 28 x 28 images, got {raw.shape}")
    labels = _read_idx(labels_path, 2049).astype(np.int64)
    if labels.max(initial=0) > 9:
        raise ValueError(f"{labels_path}: label out of range")
    images = (raw.reshape(len(raw), 784).astype(np.float32) / 255.0)
    return MnistDataset(images, labels)


def classifier_accuracy(w: np.ndarray, images: np.ndarray, labels: np.ndarray) -> float:
    return float((np.argmax(images @ w, axis=1) == labels).mean())


def train_linear_classifier(train: MnistDataset, epochs: int = 5, lr: float = 0.2,
                            batch: int = 256,
                            rng: np.random.Generator | None = None) -> np.ndarray:
    """Bias-free 784x10 weights fit by minibatch softmax cross-entropy."""
    rng = rng or np.random.default_rng(0)
    n = len(train.images)
    w = np.zeros((784, 10), dtype=np.float32)
    onehot = np.eye(10, dtype=np.float32)[train.labels]
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            sel = order[lo:lo + batch]
            x, y = train.images[sel], onehot[sel]
            logits = x @ w
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            p = e / e.sum(axis=1, keepdims=True)
            if not np.all(np.isfinite(p)):
                raise FloatingPointError("classifier training diverged")
            w -= lr / len(sel) * (x.T @ (p - y))
    return w


@dataclass
class BlockJob:
    """One 8x8 partial product: contributes a_block @ b_block to C[i,j]."""

    i: int          # output row block
    k: int          # inner block index
    j: int          # output column block
    a_block: np.ndarray     # [8,8], scaled when s_a > 0
    b_block: np.ndarray
    s_a: float = 1.0
    s_b: float = 1.0

    @property
    def job_id(self) -> str:
        return f"{self.i}.{self.k}.{self.j}"


@dataclass
class AssemblyMap:
    n_rows: int          # original row count b
    row_blocks: int
    inner_blocks: int
    col_blocks: int
    n_cols: int = 10     # original column count before padding


def _scaled(block: np.ndarray) -> tuple[np.ndarray, float]:
    s = float(np.abs(block).max())
    if s == 0.0:
        return block, 0.0
    return (block / s).astype(np.float32), s


def block_decompose(x: np.ndarray, w: np.ndarray,
                    scale: bool = True) -> tuple[list[BlockJob], AssemblyMap]:
    """Split X @ W into 8x8 jobs; rows pad to a multiple of 8, columns to 16."""
    b, d = x.shape
    if d != w.shape[0]:
        raise ValueError(f"inner dims differ: {x.shape} x {w.shape}")
    if d % BLOCK:
        raise ValueError(f"feature count {d} must be a multiple of {BLOCK}")
    b8 = (b + BLOCK - 1) // BLOCK * BLOCK
    xp = np.zeros((b8, d), dtype=np.float32)
    xp[:b] = x
    wp = np.zeros((d, PADDED_COLS), dtype=np.float32)
    wp[:, : w.shape[1]] = w
    rb, ib, cb = b8 // BLOCK, d // BLOCK, PADDED_COLS // BLOCK
    jobs = []
    for i in range(rb):
        for k in range(ib):
            a = xp[i * BLOCK:(i + 1) * BLOCK, k * BLOCK:(k + 1) * BLOCK]
            for j in range(cb):
                bb = wp[k * BLOCK:(k + 1) * BLOCK, j * BLOCK:(j + 1) * BLOCK]
                if scale:
                    a_s, s_a = _scaled(a)
                    b_s, s_b = _scaled(bb)
                    jobs.append(BlockJob(i, k, j, a_s, b_s, s_a, s_b))
                else:
                    jobs.append(BlockJob(i, k, j, a.astype(np.float32),
                                         bb.astype(np.float32)))
    return jobs, AssemblyMap(b, rb, ib, cb, w.shape[1])


def emulation_placements():
    """The fixed 32x32 layout every job grid uses: A left of the output
    sharing its rows, B above sharing its columns (the same systolic layout
    fixed-placement training uses)."""
    return _fixed_placements("matmul", EMU_GRID, EMU_GRID,
                             [(BLOCK, BLOCK), (BLOCK, BLOCK)])


def _nca_run_jobs(jobs: list[BlockJob], state: TrainState, t_steps: int,
                  chunk: int) -> np.ndarray:
    """Decode the output region after a t_steps rollout for each job grid."""
    pls = emulation_placements()
    in_a, in_b = (p for p in pls if p.role == "input")
    out_p = next(p for p in pls if p.role == "output")
    if state.components is not None:
        hw_one = assemble_modular(state.components, "matmul", pls, EMU_GRID, EMU_GRID)
    else:
        mono = state.monos.get("matmul")
        if mono is None:
            raise ValueError("checkpoint has no matmul hardware")
        hw_one = mono.field
    results = np.zeros((len(jobs), BLOCK, BLOCK), dtype=np.float32)
    ars, acs = in_a.slices()
    brs, bcs = in_b.slices()
    ors_, ocs = out_p.slices()
    with T.no_grad():
        for lo in range(0, len(jobs), chunk):
            batch = jobs[lo:lo + chunk]
            mut0 = np.zeros((len(batch), EMU_GRID, EMU_GRID, state.model.c_mut),
                            dtype=np.float32)
            for idx, job in enumerate(batch):
                mut0[idx, ars, acs, 0] = job.a_block
                mut0[idx, brs, bcs, 0] = job.b_block
            hw = T.stack([hw_one] * len(batch))
            states = batch_rollout(mut0, hw, state.rule, t_steps)
            results[lo:lo + len(batch)] = states[-1].data[:, ors_, ocs, 0]
    return results


def execute_blocks(jobs: list[BlockJob], backend: str,
                   state: TrainState | None = None, t_steps: int | None = None,
                   chunk: int = 32) -> tuple[dict[str, np.ndarray], list[tuple[str, float]]]:
    """Run every job; returns unscaled partial products keyed by job id plus
    the per-job MSE of each partial against the exact one."""
    if backend not in ("oracle", "nca"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "nca" and state is None:
        raise ValueError("the nca backend needs a trained checkpoint")
    partials: dict[str, np.ndarray] = {}
    errors: list[tuple[str, float]] = []

    exact = {j.job_id: (j.a_block @ j.b_block) * np.float32(j.s_a * j.s_b) for j in jobs}
    if backend == "oracle":
        for j in jobs:
            partials[j.job_id] = exact[j.job_id]
            errors.append((j.job_id, 0.0))
        return partials, errors

    live = [j for j in jobs if j.s_a != 0.0 and j.s_b != 0.0]
    for j in jobs:
        if j.s_a == 0.0 or j.s_b == 0.0:
            # the rescale by s_a*s_b forces an exact zero partial
            partials[j.job_id] = np.zeros((BLOCK, BLOCK), dtype=np.float32)
            errors.append((j.job_id, 0.0))
    steps = t_steps if t_steps is not None else state.train.t_steps
    decoded = _nca_run_jobs(live, state, steps, chunk)
    for j, block in zip(live, decoded):
        p = block * np.float32(j.s_a * j.s_b)
        partials[j.job_id] = p
        errors.append((j.job_id, float(np.mean((p - exact[j.job_id]) ** 2))))
    return partials, errors


def aggregate_logits(partials: dict[str, np.ndarray], amap: AssemblyMap) -> np.ndarray:
    """Sum partials over the inner index and drop the padding."""
    full = np.zeros((amap.row_blocks * BLOCK, amap.col_blocks * BLOCK), dtype=np.float32)
    for i in range(amap.row_blocks):
        for j in range(amap.col_blocks):
            acc = np.zeros((BLOCK, BLOCK), dtype=np.float32)
            for k in range(amap.inner_blocks):
                key = f"{i}.{k}.{j}"
                if key not in partials:
                    raise KeyError(f"missing job {key} in assembly map")
                acc += partials[key]
            full[i * BLOCK:(i + 1) * BLOCK, j * BLOCK:(j + 1) * BLOCK] = acc
    return full[: amap.n_rows, : amap.n_cols]


def aggregate_and_evaluate(partials: dict[str, np.ndarray], amap: AssemblyMap,
                           labels: np.ndarray, w: np.ndarray,
                           x: np.ndarray) -> dict[str, float]:
    logits = aggregate_logits(partials, amap)
    emu_pred = np.argmax(logits, axis=1)
    ref_pred = np.argmax(x @ w, axis=1)
    return {
        "emulated_accuracy": float((emu_pred == labels).mean()),
        "reference_accuracy": float((ref_pred == labels).mean()),
        "agreement": float((emu_pred == ref_pred).mean()),
    }


def write_job_errors(path: str, errors: list[tuple[str, float]]) -> None:
    with open(path, "w") as fh:
        for job_id, mse in errors:
            fh.write(f"{job_id}\t{mse:.8f}\n")
