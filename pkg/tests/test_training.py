"""Training loop: loss, gradient routing, determinism, logging."""
from __future__ import annotations

import numpy as np
import pytest

from autocell.config import ModelConfig, TrainConfig
from autocell.nca import GridState
from autocell.training import (TrainState, evaluate, finetune_hardware,
                               init_train_state, masked_mse, train_joint)
from autocell.tensor import Tensor


def tiny_state(task_mix=None, **overrides) -> TrainState:
    model = ModelConfig(c_mut=4, c_hw=4, c_perc=6, kernel_size=3, n_pathways=2,
                        hidden_width=4)
    kw = dict(batch_size=4, updates=3, t_steps=6, grid_h=8, grid_w=8,
              min_size=2, max_size=2, seed=5,
              task_mix=task_mix or {"identity": 1.0, "transpose": 1.0})
    kw.update(overrides)
    return init_train_state(model, TrainConfig(**kw))


def snapshot(state: TrainState) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in state.registry.named()}


class TestMaskedMse:
    def test_worked_example(self):
        mut = np.zeros((4, 4, 3), dtype=np.float32)
        mut[0, 0, 0] = 2.0
        mut[0, 1, 0] = -1.0
        target = np.zeros((4, 4), dtype=np.float32)
        target[0, 0] = 1.0
        mask = np.zeros((4, 4), dtype=np.float32)
        mask[0, :2] = 1.0
        # ((2-1)^2 + (-1-0)^2) / 2 = 1
        loss = masked_mse(Tensor(mut), target, mask)
        assert loss.item() == pytest.approx(1.0, rel=1e-6)

    def test_only_value_channel_counts(self):
        mut = np.zeros((2, 2, 3), dtype=np.float32)
        mut[:, :, 1] = 100.0  # workspace channels must not contribute
        mask = np.ones((2, 2), dtype=np.float32)
        loss = masked_mse(Tensor(mut), np.zeros((2, 2), dtype=np.float32), mask)
        assert loss.item() == 0.0

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            masked_mse(Tensor(np.zeros((2, 2, 3))), np.zeros((2, 2)),
                       np.zeros((2, 2)))

    def test_accepts_grid_state(self):
        grid = GridState(Tensor(np.ones((2, 2, 3))), Tensor(np.zeros((2, 2, 2))))
        loss = masked_mse(grid, np.zeros((2, 2), dtype=np.float32),
                          np.ones((2, 2), dtype=np.float32))
        assert loss.item() == pytest.approx(1.0)


class TestRouting:
    def test_absent_kind_groups_bitwise_untouched(self):
        """The acceptance basis: training on a mix without some kind leaves
        that kind's hardware group and optimizer state exactly unchanged."""
        state = tiny_state(task_mix={"identity": 1.0, "transpose": 1.0})
        before = snapshot(state)
        train_joint(state, 3)
        after = snapshot(state)
        for kind in ("matmul", "rotate90"):
            g = state.task_group(kind)
            name = f"{g}/embed"
            assert np.array_equal(before[name], after[name]), name
            assert state.opt[g].t == 0
            assert not state.opt[g].m
        # present groups did move
        for g in ("rule", "io", "task:identity", "task:transpose"):
            assert state.opt[g].t == 3

    def test_trained_groups_change(self):
        state = tiny_state(task_mix={"identity": 1.0})
        before = snapshot(state)
        train_joint(state, 3)
        after = snapshot(state)
        assert not np.array_equal(before["rule/pathway_w2"], after["rule/pathway_w2"])
        assert not np.array_equal(before["rule/pathway_b2"], after["rule/pathway_b2"])

    def test_monolithic_groups(self):
        state = tiny_state(task_mix={"identity": 1.0}, hardware_mode="monolithic",
                           placement="fixed")
        assert "mono:identity" in state.registry.groups
        assert "io" not in state.registry.groups
        before = snapshot(state)
        train_joint(state, 2)
        assert not np.array_equal(before["mono:identity/field"],
                                  snapshot(state)["mono:identity/field"])


class TestDeterminism:
    def test_two_runs_bitwise_identical(self):
        a, b = tiny_state(), tiny_state()
        train_joint(a, 3)
        train_joint(b, 3)
        sa, sb = snapshot(a), snapshot(b)
        assert sa.keys() == sb.keys()
        for n in sa:
            assert np.array_equal(sa[n], sb[n]), n

    def test_zero_updates_is_noop(self):
        state = tiny_state()
        before = snapshot(state)
        history = train_joint(state, 0)
        assert history == []
        assert state.trained_updates == 0
        after = snapshot(state)
        for n in before:
            assert np.array_equal(before[n], after[n]), n

    def test_split_run_matches_straight_run(self):
        a, b = tiny_state(), tiny_state()
        train_joint(a, 4)
        train_joint(b, 2)
        train_joint(b, 2)
        sa, sb = snapshot(a), snapshot(b)
        for n in sa:
            assert np.array_equal(sa[n], sb[n]), n
        assert a.trained_updates == b.trained_updates == 4


class TestFinetune:
    def test_rule_frozen_bitwise(self):
        # joint-train first so the pathway output layers are nonzero and
        # hardware actually receives gradient during the finetune
        state = tiny_state()
        train_joint(state, 2)
        before = snapshot(state)
        finetune_hardware(state, 3)
        after = snapshot(state)
        for n in before:
            if n.startswith("rule/"):
                assert np.array_equal(before[n], after[n]), n
        assert state.opt["rule"].t == 2
        # hardware keeps adapting
        assert state.opt["io"].t == 5
        assert not np.array_equal(before["io/output_embed"], after["io/output_embed"])

    def test_requires_grad_restored(self):
        state = tiny_state()
        finetune_hardware(state, 1)
        assert all(p.requires_grad for _, p in state.rule.named())


class TestLogging:
    def test_metrics_log_format(self, tmp_path):
        state = tiny_state()
        path = tmp_path / "metrics.tsv"
        history = train_joint(state, 3, log_path=str(path))
        lines = path.read_text().strip().split("\n")
        assert len(lines) == len(history)
        for line in lines:
            cols = line.split("\t")
            assert len(cols) == 4
            u, kind, loss, wall = int(cols[0]), cols[1], float(cols[2]), float(cols[3])
            assert 0 <= u < 3
            assert kind in ("identity", "transpose")
            assert np.isfinite(loss) and wall >= 0.0

    def test_log_appends_across_calls(self, tmp_path):
        state = tiny_state()
        path = tmp_path / "m.tsv"
        train_joint(state, 2, log_path=str(path))
        n1 = len(path.read_text().strip().split("\n"))
        train_joint(state, 1, log_path=str(path))
        n2 = len(path.read_text().strip().split("\n"))
        assert n2 > n1


class TestStrictMode:
    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_nonfinite_loss_aborts(self):
        state = tiny_state(strict=True)
        # poison the rule so the rollout blows up immediately
        state.rule.pathway_w2.data[:] = 1e30
        state.rule.pathway_w1.data[:] = 1e30
        with pytest.raises(FloatingPointError):
            train_joint(state, 1)


class TestEvaluate:
    def test_deterministic_and_per_kind(self):
        state = tiny_state()
        a = evaluate(state, n=4)
        b = evaluate(state, n=4)
        assert a == b
        assert set(a) == {"identity", "transpose"}
        for v in a.values():
            assert np.isfinite(v) and v >= 0.0

    def test_untrained_identity_loss_is_input_variance(self):
        # identity dynamics leave the output region at zero, so the eval loss
        # equals the mean square of the uniform inputs, 1/3
        state = tiny_state(task_mix={"identity": 1.0}, min_size=4, max_size=4,
                           grid_h=16, grid_w=16)
        loss = evaluate(state, ["identity"], n=24)["identity"]
        assert loss == pytest.approx(1 / 3, rel=0.25)
