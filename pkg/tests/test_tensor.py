"""Autodiff engine tests: independent oracles first, then op contracts."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import autocell.tensor as T
from autocell.tensor import Tensor, backward

from conftest import fd_gradcheck, rel_error


# ---------------------------------------------------------------------------
# oracles: deliberately naive reimplementations


def conv2d_oracle(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Nested-loop same-size convolution with zero padding, [H,W,Ci]x[k,k,Ci,Co]."""
    h, w, ci = x.shape
    kk, _, _, co = k.shape
    p = kk // 2
    out = np.zeros((h, w, co), dtype=np.float64)
    for y in range(h):
        for xx in range(w):
            for dy in range(kk):
                for dx in range(kk):
                    sy, sx = y + dy - p, xx + dx - p
                    if not (0 <= sy < h and 0 <= sx < w):
                        continue
                    for c_in in range(ci):
                        for c_out in range(co):
                            out[y, xx, c_out] += x[sy, sx, c_in] * k[dy, dx, c_in, c_out]
    return out


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, n = a.shape
    n2, p = b.shape
    out = np.zeros((m, p), dtype=np.float64)
    for i in range(m):
        for j in range(p):
            for k in range(n):
                out[i, j] += float(a[i, k]) * float(b[k, j])
    return out


class TestOracleAgreement:
    def test_conv2d_matches_nested_loops(self, rng):
        x = rng.normal(size=(5, 4, 2)).astype(np.float32)
        k = rng.normal(size=(3, 3, 2, 3)).astype(np.float32)
        got = T.conv2d(Tensor(x), Tensor(k)).data
        want = conv2d_oracle(x, k)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_matmul_matches_triple_loop(self, rng):
        a = rng.normal(size=(4, 6)).astype(np.float32)
        b = rng.normal(size=(6, 3)).astype(np.float32)
        got = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, matmul_oracle(a, b), rtol=1e-5, atol=1e-5)

    def test_matmul_spec_case(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data,
                                      [[19.0, 22.0], [43.0, 50.0]])


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(6, 7, 1)).astype(np.float32)
        k = np.zeros((3, 3, 1, 1), dtype=np.float32)
        k[1, 1, 0, 0] = 1.0
        out = T.conv2d(Tensor(x), Tensor(k)).data
        np.testing.assert_array_equal(out, x)

    def test_all_ones_kernel_on_constant_input(self):
        x = np.ones((3, 3, 1), dtype=np.float32)
        k = np.ones((3, 3, 1, 1), dtype=np.float32)
        out = T.conv2d(Tensor(x), Tensor(k)).data[:, :, 0]
        assert out[1, 1] == 9.0
        assert out[0, 1] == out[1, 0] == out[1, 2] == out[2, 1] == 6.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0

    def test_zero_kernels_give_zero(self, rng):
        x = rng.normal(size=(4, 4, 2)).astype(np.float32)
        k = np.zeros((3, 3, 2, 5), dtype=np.float32)
        assert not T.conv2d(Tensor(x), Tensor(k)).data.any()

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros((4, 4, 1))), Tensor(np.zeros((2, 2, 1, 1))))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))

    def test_gradients_match_finite_differences(self, rng):
        x = Tensor(rng.normal(size=(5, 5, 2)).astype(np.float32), requires_grad=True)
        k = Tensor(rng.normal(scale=0.5, size=(3, 3, 2, 3)).astype(np.float32),
                   requires_grad=True)
        w = Tensor(rng.normal(size=(5, 5, 3)).astype(np.float32))

        def loss():
            return T.tsum(T.conv2d(x, k) * w)

        fd_gradcheck(loss, [x, k])

    def test_wrap_padding_gradients(self, rng):
        x = Tensor(rng.normal(size=(4, 4, 2)).astype(np.float32), requires_grad=True)
        k = Tensor(rng.normal(scale=0.5, size=(3, 3, 2, 2)).astype(np.float32),
                   requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4, 2)).astype(np.float32))

        def loss():
            return T.tsum(T.conv2d(x, k, padding="wrap") * w)

        fd_gradcheck(loss, [x, k])

    def test_batched_agrees_with_single(self, rng):
        xs = rng.normal(size=(3, 5, 5, 2)).astype(np.float32)
        k = rng.normal(size=(3, 3, 2, 4)).astype(np.float32)
        batched = T.conv2d(Tensor(xs), Tensor(k)).data
        for i in range(3):
            single = T.conv2d(Tensor(xs[i]), Tensor(k)).data
            np.testing.assert_array_equal(batched[i], single)


class TestMatmul:
    def test_identity(self, rng):
        a = rng.normal(size=(4, 4)).astype(np.float32)
        out = T.matmul(Tensor(a), Tensor(np.eye(4, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, a)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_non_2d_rejected(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((4, 2))))

    def test_gradients(self, rng):
        a = Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2)).astype(np.float32))

        def loss():
            return T.tsum(T.matmul(a, b) * w)

        fd_gradcheck(loss, [a, b])


class TestSoftmaxT:
    def test_uniform_logits(self):
        out = T.softmax_t(Tensor([0.0, 0.0, 0.0, 0.0]), 1.0).data
        np.testing.assert_allclose(out, [0.25] * 4, atol=1e-7)

    def test_closed_form_two_logits(self):
        out = T.softmax_t(Tensor([1.0, 0.0]), 1.0).data
        e = np.e
        np.testing.assert_allclose(out, [e / (1 + e), 1 / (1 + e)], atol=1e-6)

    def test_shift_invariance(self, rng):
        l = rng.normal(size=7).astype(np.float32)
        a = T.softmax_t(Tensor(l), 0.7).data
        b = T.softmax_t(Tensor(l + 3.5), 0.7).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_temperature_positive(self):
        with pytest.raises(ValueError):
            T.softmax_t(Tensor([1.0, 2.0]), 0.0)
        with pytest.raises(ValueError):
            T.softmax_t(Tensor([1.0, 2.0]), -1.0)

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=8),
           st.floats(0.05, 10.0))
    @settings(max_examples=100, deadline=None)
    def test_simplex_property(self, logits, temp):
        out = T.softmax_t(Tensor(np.array(logits, dtype=np.float32)), temp).data
        # float32 exp underflows to exact 0 for widely separated logits
        assert np.all(out >= 0.0) and np.all(out <= 1.0 + 1e-7)
        assert abs(float(out.sum()) - 1.0) <= 1e-6

    def test_extreme_logits_stable(self):
        out = T.softmax_t(Tensor([1000.0, -1000.0]), 1.0).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-6)

    def test_gradients(self, rng):
        l = Tensor(rng.normal(size=(2, 5)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 5)).astype(np.float32))

        def loss():
            return T.tsum(T.softmax_t(l, 0.8, axis=-1) * w)

        fd_gradcheck(loss, [l])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
        backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=np.float32))

    def test_square_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(T.tsum(x * x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-6)

    def test_three_layer_composition(self, rng):
        x = Tensor(rng.normal(size=(2, 4)).astype(np.float32), requires_grad=True)
        w1 = Tensor(rng.normal(scale=0.5, size=(4, 5)).astype(np.float32),
                    requires_grad=True)
        w2 = Tensor(rng.normal(scale=0.5, size=(5, 3)).astype(np.float32),
                    requires_grad=True)

        def loss():
            h = T.tanh(T.matmul(x, w1))
            return T.tsum(T.softmax_t(T.matmul(h, w2), 1.3, axis=-1) * Tensor(
                np.arange(6, dtype=np.float32).reshape(2, 3) / 5.0))

        # wider step: fd noise through a 3-op float32 chain swamps h=1e-3
        fd_gradcheck(loss, [x, w1, w2], h=3e-3)

    def test_reuse_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        backward(T.tsum(x * x + x))  # d/dx (x^2 + x) = 2x + 1 = 5
        np.testing.assert_allclose(x.grad, [5.0], atol=1e-6)

    def test_non_scalar_root_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            backward(x * x)

    def test_detached_root_rejected(self):
        with pytest.raises(ValueError):
            backward(Tensor([1.0]))

    def test_no_grad_suppresses_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * x
        assert y.node is None and not y.requires_grad


class TestElementwiseGradients:
    @pytest.mark.parametrize("name", ["relu", "gelu", "tanh", "softsign"])
    def test_activation_gradients(self, name, rng):
        # keep points away from relu's kink, where fd is ill-defined
        vals = rng.normal(size=(4, 5)).astype(np.float32)
        vals[np.abs(vals) < 0.05] = 0.5
        x = Tensor(vals, requires_grad=True)
        w = Tensor(rng.normal(size=(4, 5)).astype(np.float32))

        def loss():
            return T.tsum(T.ACTIVATIONS[name](x) * w)

        fd_gradcheck(loss, [x])

    def test_broadcast_add_gradients(self, rng):
        a = Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 4)).astype(np.float32), requires_grad=True)

        def loss():
            return T.tsum((a + b) * (a + b))

        fd_gradcheck(loss, [a, b])

    def test_getitem_fancy_gradients(self, rng):
        x = Tensor(rng.normal(size=(5, 3)).astype(np.float32), requires_grad=True)
        rows = np.array([0, 2, 2])

        def loss():
            return T.tsum(T.getitem(x, (rows,)) * T.getitem(x, (rows,)))

        fd_gradcheck(loss, [x])

    def test_getitem_basic_gradients(self, rng):
        x = Tensor(rng.normal(size=(4, 3, 2)).astype(np.float32), requires_grad=True)

        def loss():
            sliced = T.getitem(x, (Ellipsis, 0))
            return T.tsum(sliced * sliced)

        fd_gradcheck(loss, [x])

    def test_concat_stack_mean_gradients(self, rng):
        a = Tensor(rng.normal(size=(2, 3)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3)).astype(np.float32), requires_grad=True)

        def loss():
            cat = T.concat([a, b], axis=0)
            stk = T.stack([a, b], axis=0)
            return T.mean(cat * cat) + T.tsum(T.mean(stk, axis=0))

        fd_gradcheck(loss, [a, b])


class TestPurity:
    def test_ops_bitwise_deterministic(self, rng):
        x = rng.normal(size=(6, 6, 3)).astype(np.float32)
        k = rng.normal(size=(3, 3, 3, 4)).astype(np.float32)
        a = T.conv2d(Tensor(x), Tensor(k)).data
        b = T.conv2d(Tensor(x), Tensor(k)).data
        assert np.array_equal(a, b)
        l = rng.normal(size=16).astype(np.float32)
        assert np.array_equal(T.softmax_t(Tensor(l), 0.3).data,
                              T.softmax_t(Tensor(l), 0.3).data)

    def test_float32_everywhere(self):
        t = Tensor(np.arange(4, dtype=np.int64))
        assert t.data.dtype == np.float32
        out = t + Tensor([1.5, 1.5, 1.5, 1.5])
        assert out.data.dtype == np.float32

    def test_strict_finite_mode(self):
        T.set_strict_finite(True)
        try:
            with pytest.raises(FloatingPointError):
                Tensor([1.0]) * Tensor([np.inf])
        finally:
            T.set_strict_finite(False)
