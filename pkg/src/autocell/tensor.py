"""Dense float32 tensors with reverse-mode automatic differentiation.

Every operation is eager: it computes its numpy result immediately and, when
any input requires a gradient, records a tape node holding the inputs and a
backward closure.  ``backward(root)`` traces the nodes reachable from a
scalar root and replays them in reverse creation order (which is a reverse
topological order, since an op's inputs always exist before its output).

All buffers are float32 and reductions use numpy's fixed row-major order, so
identical inputs always produce bitwise-identical outputs.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf


def _tune_allocator() -> None:
    """Keep large malloc blocks on the heap instead of mmap-ing them.

    Training tapes hold many megabyte-scale activation buffers alive at
    once; with glibc's defaults each such allocation becomes a fresh mmap
    whose pages must be faulted in, making elementwise numpy ops an order
    of magnitude slower than the same ops on recycled memory.  Raising the
    mmap threshold and disabling trim lets the heap recycle those blocks.
    """
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)        # M_MMAP_THRESHOLD
        libc.mallopt(-1, 0x7FFFFFFF)     # M_TRIM_THRESHOLD
    except Exception:
        pass  # non-glibc platforms just run slower


_tune_allocator()

_INV_SQRT2 = np.float32(0.7071067811865476)
_INV_SQRT2PI = np.float32(0.3989422804014327)

# When enabled, every op output is checked for NaN/Inf.
_STRICT_FINITE = False


def set_strict_finite(enabled: bool) -> None:
    """Toggle NaN/Inf checking of every op output (off by default)."""
    global _STRICT_FINITE
    _STRICT_FINITE = enabled


_NO_GRAD_DEPTH = 0


class no_grad:
    """Context manager suppressing tape recording (for evaluation/inference)."""

    def __enter__(self):
        global _NO_GRAD_DEPTH
        _NO_GRAD_DEPTH += 1
        return self

    def __exit__(self, *exc):
        global _NO_GRAD_DEPTH
        _NO_GRAD_DEPTH -= 1
        return False


class TapeNode:
    """One recorded primitive: its inputs and the closure that maps the
    output gradient to input gradients (None for inputs that don't need one)."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """A dense float32 array with an optional gradient buffer.

    ``requires_grad`` marks trainable leaves; tensors produced from such
    leaves carry a ``TapeNode`` linking them into the computation graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "tid")
    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None
        self.tid = next(Tensor._ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def assert_finite(self, what: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _STRICT_FINITE and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    t = Tensor(out)
    if _NO_GRAD_DEPTH == 0 and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = TapeNode(op, inputs, backward_fn)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over broadcast axes so it matches the input shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


class ComputationTape:
    """The ordered record of taped tensors reaching a root.

    Creation order is a topological order, so iterating the record backwards
    replays the chain rule visiting each node exactly once.
    """

    def __init__(self, ordered: list[Tensor]):
        self.ordered = ordered

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationTape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t.tid in seen or t.node is None:
                continue
            seen.add(t.tid)
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.tid)
        return cls(found)

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {root.tid: seed}
        for t in reversed(self.ordered):
            g = grads.pop(t.tid, None)
            if g is None:
                continue
            in_grads = t.node.backward_fn(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    # leaf: own the buffer, accumulate additively
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    acc = grads.get(inp.tid)
                    grads[inp.tid] = ig if acc is None else acc + ig


def backward(root: Tensor) -> None:
    """Backpropagate from a scalar root, accumulating ``.grad`` on all
    requires-grad leaves reachable through the tape."""
    if root.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    if root.node is None:
        if root.requires_grad:
            g = np.ones_like(root.data)
            root.grad = g if root.grad is None else root.grad + g
            return
        raise ValueError("backward called on a detached tensor with no tape")
    tape = ComputationTape.trace(root)
    tape.replay(root, np.ones_like(root.data))


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("add", out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("sub", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", out, (a, b), bwd)


def conv2d(x: Tensor, kernels: Tensor, padding: str = "zero") -> Tensor:
    """Same-size 2-D convolution over the channel-last layout.

    ``x`` is [H,W,Cin] or [B,H,W,Cin]; ``kernels`` is [k,k,Cin,Cout] with k
    odd.  Out-of-bounds reads are zero (``padding="zero"``) or toroidal
    (``padding="wrap"``).
    """
    if kernels.ndim != 4:
        raise ValueError(f"kernels must be [k,k,Cin,Cout], got {kernels.shape}")
    kh, kw, cin, cout = kernels.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
    if padding not in ("zero", "wrap"):
        raise ValueError(f"unknown padding mode {padding!r}")
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ValueError(f"input must be [H,W,C] or [B,H,W,C], got {x.shape}")
    if x.shape[-1] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, kernels expect {cin}")

    xa = x.data if batched else x.data[None]
    bsz, h, w, _ = xa.shape
    p = kh // 2
    mode = "constant" if padding == "zero" else "wrap"
    xp = np.pad(xa, ((0, 0), (p, p), (p, p), (0, 0)), mode=mode)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # [B,H,W,Cin,kh,kw]
    patches = win.reshape(bsz * h * w, cin * kh * kw)
    k2 = np.ascontiguousarray(kernels.data.transpose(2, 0, 1, 3)).reshape(cin * kh * kw, cout)
    out = (patches @ k2).reshape(bsz, h, w, cout)
    if not batched:
        out = out[0]

    def bwd(g):
        g2 = g.reshape(bsz * h * w, cout)
        gk = None
        if kernels.requires_grad:
            gk = (patches.T @ g2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
            gk = np.ascontiguousarray(gk)
        gx = None
        if x.requires_grad:
            gp = (g2 @ k2.T).reshape(bsz, h, w, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for dy in range(kh):
                for dx in range(kw):
                    gxp[:, dy:dy + h, dx:dx + w, :] += gp[:, :, :, :, dy, dx]
            if padding == "wrap":
                # fold padded borders back onto the opposite edges
                gxp[:, p:2 * p] += gxp[:, p + h:]
                gxp[:, h:p + h] += gxp[:, :p]
                core = gxp[:, p:p + h]
                core[:, :, p:2 * p] += core[:, :, p + w:]
                core[:, :, w:p + w] += core[:, :, :p]
                gx = core[:, :, p:p + w].copy()
            else:
                gx = gxp[:, p:p + h, p:p + w, :].copy()
            if not batched:
                gx = gx[0]
        return gx, gk

    return _record("conv2d", out, (x, kernels), bwd)


def softmax_t(logits: Tensor, temperature: float, axis: int = -1) -> Tensor:
    """Temperature-scaled softmax, stabilised by max subtraction."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    inv_t = np.float32(1.0 / temperature)
    z = logits.data * inv_t
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((y * (g - dot)) * inv_t,)

    return _record("softmax_t", y, (logits,), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _record("relu", out, (x,), lambda g: (g * (x.data > 0),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2).astype(np.float32))
    out = x.data * cdf

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(np.float32(-0.5) * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _record("gelu", out, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def softsign(x: Tensor) -> Tensor:
    """x / (1 + |x|): a cheap smooth squashing nonlinearity."""
    denom = 1.0 + np.abs(x.data)
    out = x.data / denom

    def bwd(g):
        return (g / (denom * denom),)

    return _record("softsign", out, (x,), bwd)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "gelu": gelu,
    "tanh": tanh,
    "softsign": softsign,
}


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape)
    return _record("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def _is_basic_index(idx) -> bool:
    """True when idx contains no integer/boolean arrays, so no element can be
    selected twice and a plain += scatter is exact."""
    parts = idx if isinstance(idx, tuple) else (idx,)
    for p in parts:
        if isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None:
            continue
        return False
    return True


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        if _is_basic_index(idx):
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _record("getitem", out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _record("concat", out, tensors, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(
            np.squeeze(p, axis=axis) if t.requires_grad else None
            for p, t in zip(parts, tensors)
        )

    return _record("stack", out, tensors, bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=np.float32), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    inv = np.float32(1.0 / count)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g * inv, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, x.shape).copy(),)

    return _record("mean", np.asarray(out, dtype=np.float32), (x,), bwd)
