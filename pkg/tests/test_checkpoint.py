"""Checkpoint container: round trips, resume equivalence, corruption handling."""
from __future__ import annotations

import struct

import numpy as np
import pytest

from autocell.checkpoint import (CheckpointError, load_checkpoint, load_tensors,
                                 manifest, save_checkpoint, save_tensors)
from autocell.config import ModelConfig, TrainConfig
from autocell.training import init_train_state, train_joint


def small_state(seed=5):
    model = ModelConfig(c_mut=4, c_hw=4, c_perc=6, n_pathways=2, hidden_width=4)
    train = TrainConfig(batch_size=3, updates=4, t_steps=6, grid_h=8, grid_w=8,
                        min_size=2, max_size=2, seed=seed,
                        task_mix={"identity": 1.0, "transpose": 1.0})
    return init_train_state(model, train)


def all_tensors(state):
    out = {n: p.data.copy() for n, p in state.registry.named()}
    out["viz"] = state.viz.copy()
    for g, st in state.opt.items():
        out[f"opt.{g}.t"] = np.array([st.t])
        for n in st.m:
            out[f"opt.{g}.{n}.m"] = st.m[n].copy()
            out[f"opt.{g}.{n}.v"] = st.v[n].copy()
    return out


class TestContainer:
    def test_tensor_round_trip(self, tmp_path, rng):
        path = str(tmp_path / "t.ck")
        tensors = [("a/b", rng.normal(size=(3, 4)).astype(np.float32)),
                   ("scalar", np.array(2.5, dtype=np.float32)),
                   ("empty_dim", np.zeros((0, 3), dtype=np.float32))]
        save_tensors(path, "k=v\n", tensors)
        cfg, loaded = load_tensors(path)
        assert cfg == "k=v\n"
        assert [n for n, _ in loaded] == [n for n, _ in tensors]
        for (_, want), (_, got) in zip(tensors, loaded):
            assert got.shape == want.shape
            assert np.array_equal(got, want)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ck"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_tensors(str(p))

    def test_truncation_detected(self, tmp_path, rng):
        path = tmp_path / "t.ck"
        save_tensors(str(path), "", [("w", rng.normal(size=(8, 8)).astype(np.float32))])
        blob = path.read_bytes()
        for cut in (2, 10, len(blob) // 2, len(blob) - 3):
            path.write_bytes(blob[:cut])
            with pytest.raises(CheckpointError, match="truncated"):
                load_tensors(str(path))

    def test_trailing_bytes_detected(self, tmp_path, rng):
        path = tmp_path / "t.ck"
        save_tensors(str(path), "", [("w", np.zeros(3, dtype=np.float32))])
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(CheckpointError, match="trailing"):
            load_tensors(str(path))

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "t.ck"
        save_tensors(str(path), "", [])
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_tensors(str(path))


class TestStateRoundTrip:
    def test_trained_state_bitwise(self, tmp_path):
        state = small_state()
        train_joint(state, 4)
        path = str(tmp_path / "run.ck")
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)

        a, b = all_tensors(state), all_tensors(loaded)
        assert a.keys() == b.keys()
        for n in a:
            assert np.array_equal(a[n], b[n]), n
        assert loaded.trained_updates == 4
        assert loaded.train == state.train
        assert loaded.model == state.model

    def test_save_load_save_byte_identical(self, tmp_path):
        state = small_state()
        train_joint(state, 3)
        p1, p2 = str(tmp_path / "a.ck"), str(tmp_path / "b.ck")
        save_checkpoint(state, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_resume_matches_uninterrupted(self, tmp_path):
        straight = small_state()
        train_joint(straight, 6)

        split = small_state()
        train_joint(split, 3)
        path = str(tmp_path / "mid.ck")
        save_checkpoint(split, path)
        resumed = load_checkpoint(path)
        train_joint(resumed, 3)

        a, b = all_tensors(straight), all_tensors(resumed)
        for n in a:
            assert np.array_equal(a[n], b[n]), n

    def test_unknown_tensor_rejected(self, tmp_path):
        state = small_state()
        path = str(tmp_path / "x.ck")
        save_checkpoint(state, path)
        cfg, tensors = load_tensors(path)
        tensors.append(("rule/bogus", np.zeros(3, dtype=np.float32)))
        save_tensors(path, cfg, tensors)
        with pytest.raises(CheckpointError, match="unknown tensor"):
            load_checkpoint(path)

    def test_missing_tensor_rejected(self, tmp_path):
        state = small_state()
        path = str(tmp_path / "x.ck")
        save_checkpoint(state, path)
        cfg, tensors = load_tensors(path)
        tensors = [(n, a) for n, a in tensors if n != "rule/filters"]
        save_tensors(path, cfg, tensors)
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        state = small_state()
        path = str(tmp_path / "x.ck")
        save_checkpoint(state, path)
        cfg, tensors = load_tensors(path)
        tensors = [(n, np.zeros((2, 2), dtype=np.float32) if n == "rule/filters" else a)
                   for n, a in tensors]
        save_tensors(path, cfg, tensors)
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_checkpoint(path)

    def test_manifest_lists_everything(self, tmp_path):
        state = small_state()
        train_joint(state, 2)
        path = str(tmp_path / "m.ck")
        save_checkpoint(state, path)
        cfg, entries = manifest(path)
        names = [n for n, _ in entries]
        assert "rule/filters" in names
        assert "viz/projection" in names
        assert "opt/rule/t" in names
        assert "trained_updates = 2" in cfg
        shapes = dict(entries)
        assert shapes["rule/filters"] == (3, 3, 4, 6)
