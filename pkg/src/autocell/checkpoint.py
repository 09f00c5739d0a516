"""Single-file checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"ACLK"
    version u32      currently 1
    cfg_len u32      followed by cfg_len bytes of UTF-8 config text
    count   u32      number of named tensors, then per tensor:
      name_len u16, name bytes, ndim u8, ndim x u32 dims,
      prod(dims) x f32 payload

Tensor names encode the parameter grouping ("rule/filters",
"task:matmul/embed", "opt/rule/filters/m", ...), so `inspect` needs no
side channel.  Saving is deterministic: the same state always produces
byte-identical files.
"""
from __future__ import annotations

import struct

import numpy as np

from .config import config_to_lines, parse_config_text
from .training import TrainState, init_train_state

MAGIC = b"ACLK"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_tensors(path: str, config_text: str, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Write a generic container of named float32 tensors."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        cfg = config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.asarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f4", copy=False).tobytes())


def load_tensors(path: str) -> tuple[str, list[tuple[str, np.ndarray]]]:
    """Read a container; every length is validated before use."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    config_text = take(cfg_len, "config").decode("utf-8")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: list[tuple[str, np.ndarray]] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims")) if ndim else ()
        n_items = 1
        for d in dims:
            n_items *= d
        payload = take(4 * n_items, f"payload of {name}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        tensors.append((name, arr))
    if off != len(blob):
        raise CheckpointError("trailing bytes after the last tensor")
    return config_text, tensors


def _state_tensors(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    for name, p in state.registry.named():
        out.append((name, p.data))
    out.append(("viz/projection", state.viz))
    for g in sorted(state.opt):
        st = state.opt[g]
        out.append((f"opt/{g}/t", np.array([st.t], dtype=np.float32)))
        for pname in sorted(st.m):
            out.append((f"opt/{g}/{pname}/m", st.m[pname]))
            out.append((f"opt/{g}/{pname}/v", st.v[pname]))
    return out


def save_checkpoint(state: TrainState, path: str) -> None:
    cfg_text = config_to_lines(state.model, state.train,
                               {"trained_updates": state.trained_updates})
    save_tensors(path, cfg_text, _state_tensors(state))


def load_checkpoint(path: str) -> TrainState:
    """Rebuild a TrainState so training resumes bitwise-identically."""
    cfg_text, tensors = load_tensors(path)
    model, train, extra = parse_config_text(cfg_text)
    state = init_train_state(model, train)
    state.trained_updates = extra.get("trained_updates", 0)

    params = dict(state.registry.named())
    seen = set()
    for name, arr in tensors:
        if name == "viz/projection":
            state.viz = arr
            continue
        if name.startswith("opt/"):
            parts = name.split("/")
            if len(parts) == 3 and parts[2] == "t":
                group = parts[1]
                if group not in state.opt:
                    raise CheckpointError(f"optimizer state for unknown group {group!r}")
                state.opt[group].t = int(arr[0])
            elif len(parts) == 4 and parts[3] in ("m", "v"):
                group, pname, which = parts[1], parts[2], parts[3]
                if group not in state.opt:
                    raise CheckpointError(f"optimizer state for unknown group {group!r}")
                buf = state.opt[group].m if which == "m" else state.opt[group].v
                buf[pname] = arr.copy()
            else:
                raise CheckpointError(f"malformed optimizer tensor name {name!r}")
            continue
        if name not in params:
            raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
        p = params[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: file {arr.shape} vs config {p.data.shape}")
        p.data = arr.copy()
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    return state


def manifest(path: str) -> tuple[str, list[tuple[str, tuple[int, ...]]]]:
    """Config echo plus (name, shape) per tensor, for `inspect`."""
    cfg_text, tensors = load_tensors(path)
    return cfg_text, [(n, a.shape) for n, a in tensors]
