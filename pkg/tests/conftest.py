"""Shared fixtures, the finite-difference gradient oracle, and the
acceptance-criteria reporter."""
from __future__ import annotations

import numpy as np
import pytest

from autocell.config import ModelConfig, TrainConfig
from autocell.tensor import Tensor, backward

# one (status, criterion, detail) entry per acceptance criterion, printed as
# a summary block at the end of the run
ACCEPTANCE_LINES: list[tuple[str, str, str]] = []


def check_acceptance(criterion: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_LINES.append(("PASS" if passed else "FAIL", criterion, detail))
    assert passed, f"{criterion}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for status, criterion, detail in ACCEPTANCE_LINES:
        suffix = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(f"{status}  {criterion}{suffix}")


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_model():
    """Small rule dims so per-test math stays cheap."""
    return ModelConfig(c_mut=4, c_hw=4, c_perc=6, kernel_size=3,
                       n_pathways=3, hidden_width=5)


@pytest.fixture
def tiny_train():
    return TrainConfig(batch_size=2, updates=4, t_steps=8, grid_h=6, grid_w=6,
                       min_size=2, max_size=2, seed=11)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-based relative error between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def fd_gradcheck(build_loss, leaves: list[Tensor], h: float = 1e-3,
                 tol: float = 1e-3, sample: int | None = None,
                 seed: int = 0) -> float:
    """Central finite differences against the engine's analytic gradients.

    build_loss() must reconstruct the whole graph from the leaves' current
    data and return a scalar Tensor.  Checks every coordinate unless
    `sample` caps the per-leaf coordinate count.  Returns the worst
    norm-based relative error over the leaves.
    """
    for p in leaves:
        p.grad = None
    loss = build_loss()
    backward(loss)
    analytic = [p.grad.copy() for p in leaves]

    rs = np.random.default_rng(seed)
    worst = 0.0
    for p, an in zip(leaves, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if sample is None or n <= sample \
            else np.sort(rs.choice(n, size=sample, replace=False))
        fd = np.empty(len(idxs), dtype=np.float64)
        for j, i in enumerate(idxs):
            orig = flat[i]
            flat[i] = orig + h
            lp = build_loss().item()
            flat[i] = orig - h
            lm = build_loss().item()
            flat[i] = orig
            fd[j] = (lp - lm) / (2.0 * h)
        err = rel_error(fd, an.reshape(-1)[idxs])
        worst = max(worst, err)
        assert err <= tol, f"gradient mismatch: rel error {err:.2e} > {tol}"
    return worst
