"""Tests for the tensor/autodiff engine.

Covers:
- Forward values of every op against straight-line numpy oracles
- Fused ops agreeing with their unfused compositions
- Tape mechanics: gradient accumulation, reuse, broadcasting adjoints
- Non-finite detection, float32 preservation, memory-meter accounting
"""

import numpy as np
import pytest

import agileir.tensor as T
from agileir.tensor import Tensor, Tape, NonFiniteError


@pytest.fixture
def seed():
    """Seed numpy's global RNG for the legacy API and restore it after."""
    np.random.seed(42)
    yield
    np.random.seed(None)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def grad_of(loss_fn, *leaves):
    """Run loss_fn under a tape and return the leaves' gradients."""
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    return [leaf.grad for leaf in leaves]


class TestElementwise:
    """add / sub / mul / scale / add_const / sqrt / gelu / mean_all."""

    def test_add_broadcast(self, rng):
        """Broadcast add matches numpy; adjoint sums over broadcast axes."""
        a = T.tensor(rng.normal(size=(2, 3, 4)))
        b = T.tensor(rng.normal(size=(4,)))
        out = T.add(a, b)
        assert np.allclose(out.data, a.data + b.data)
        (ga, gb) = grad_of(lambda: T.mean_all(T.add(a, b)), a, b)
        assert ga.shape == a.shape and gb.shape == b.shape
        assert np.allclose(gb, np.full(4, 6 / 24.0))

    def test_sub_and_mul(self, rng):
        a = T.tensor(rng.normal(size=(3, 5)))
        b = T.tensor(rng.normal(size=(3, 5)))
        assert np.allclose(T.sub(a, b).data, a.data - b.data)
        assert np.allclose(T.mul(a, b).data, a.data * b.data)

    def test_scale_and_add_const(self, rng):
        a = T.tensor(rng.normal(size=(4, 4)))
        assert np.allclose(T.scale(a, 0.25).data, a.data * 0.25)
        assert np.allclose(T.add_const(a, 1.5).data, a.data + 1.5)

    def test_sqrt(self, rng):
        a = T.tensor(rng.uniform(0.5, 2.0, size=(6,)))
        assert np.allclose(T.sqrt(a).data, np.sqrt(a.data))

    def test_gelu_matches_tanh_form(self, rng):
        """gelu follows the tanh approximation exactly."""
        x = rng.normal(size=(5, 7)).astype(np.float32)
        out = T.gelu(T.tensor(x))
        c = np.sqrt(2.0 / np.pi)
        expected = 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))
        assert np.allclose(out.data, expected, atol=1e-6)

    def test_mean_all(self, rng):
        a = T.tensor(rng.normal(size=(3, 4)))
        assert np.isclose(T.mean_all(a).item(), a.data.mean())

    def test_charbonnier_loss_value(self, rng):
        """Fused loss equals mean(sqrt(diff^2 + eps^2))."""
        p = T.tensor(rng.normal(size=(2, 3, 8, 8)))
        t = T.tensor(rng.normal(size=(2, 3, 8, 8)))
        eps = 1e-3
        out = T.charbonnier_loss(p, t, eps)
        expected = np.sqrt((p.data - t.data) ** 2 + eps ** 2).mean()
        assert np.isclose(out.item(), expected)

    def test_charbonnier_identical_inputs(self, rng):
        """Zero residual floors the loss at eps."""
        p = T.tensor(rng.normal(size=(4, 4)))
        out = T.charbonnier_loss(p, T.tensor(p.data.copy()), 1e-3)
        assert np.isclose(out.item(), 1e-3)


class TestShapes:
    """reshape / transpose / narrow / index / concat / roll / crop / gather."""

    def test_reshape_roundtrip(self, rng):
        a = T.tensor(rng.normal(size=(2, 3, 4)))
        out = T.reshape(T.reshape(a, (6, 4)), (2, 3, 4))
        assert np.array_equal(out.data, a.data)

    def test_transpose(self, rng):
        a = T.tensor(rng.normal(size=(2, 3, 4, 5)))
        out = T.transpose(a, (0, 2, 3, 1))
        assert np.array_equal(out.data, a.data.transpose(0, 2, 3, 1))

    def test_narrow_last(self, rng):
        a = T.tensor(rng.normal(size=(3, 4, 10)))
        out = T.narrow_last(a, 2, 7)
        assert np.array_equal(out.data, a.data[..., 2:7])

    def test_narrow_last_grad_scatters(self, rng):
        a = T.tensor(rng.normal(size=(2, 6)))
        (ga,) = grad_of(lambda: T.mean_all(T.narrow_last(a, 1, 4)), a)
        assert np.allclose(ga[:, 1:4], 1.0 / 6)
        assert np.allclose(ga[:, :1], 0.0) and np.allclose(ga[:, 4:], 0.0)

    def test_index_first(self, rng):
        a = T.tensor(rng.normal(size=(3, 2, 5)))
        out = T.index_first(a, 1)
        assert np.array_equal(out.data, a.data[1])

    def test_concat_last(self, rng):
        parts = [T.tensor(rng.normal(size=(2, 3, k))) for k in (2, 4, 3)]
        out = T.concat_last(parts)
        expected = np.concatenate([p.data for p in parts], axis=-1)
        assert np.array_equal(out.data, expected)

    def test_roll2d(self, rng):
        a = T.tensor(rng.normal(size=(1, 6, 8, 2)))
        out = T.roll2d(a, -2, 3)
        assert np.array_equal(out.data, np.roll(a.data, (-2, 3), axis=(1, 2)))

    def test_crop_hw(self, rng):
        a = T.tensor(rng.normal(size=(2, 8, 9, 3)))
        out = T.crop_hw(a, 1, 5, 2, 7)
        assert np.array_equal(out.data, a.data[:, 1:5, 2:7, :])

    def test_gather_hw(self, rng):
        a = T.tensor(rng.normal(size=(1, 5, 6, 2)))
        rows = np.array([0, 0, 1, 4])
        cols = np.array([5, 2, 0])
        out = T.gather_hw(a, rows, cols)
        expected = a.data[:, rows][:, :, cols]
        assert np.array_equal(out.data, expected)


class TestWindows:
    """window_split / window_merge round trips, with and without shift."""

    def test_split_shape(self, rng):
        x = T.tensor(rng.normal(size=(2, 8, 12, 5)))
        out = T.window_split(x, 4)
        assert out.shape == (2 * 2 * 3, 16, 5)

    def test_split_merge_roundtrip_bitexact(self, rng):
        """merge(split(x)) returns every element unchanged, bit for bit."""
        x = T.tensor(rng.normal(size=(2, 12, 12, 3)))
        for shift in (0, 2, 5):
            w = T.window_split(x, 4, shift)
            back = T.window_merge(w, 4, 12, 12, shift)
            assert back.data.tobytes() == x.data.tobytes()

    def test_split_window_content(self, rng):
        """Unshifted windows tile the map in row-major window order."""
        x = T.tensor(rng.normal(size=(1, 8, 8, 2)))
        w = T.window_split(x, 4)
        block = x.data[0, 0:4, 4:8, :].reshape(16, 2)
        assert np.array_equal(w.data[1], block)

    def test_shifted_split_rolls_first(self, rng):
        """shift=s windows are taken from the map rolled by (-s, -s)."""
        x = T.tensor(rng.normal(size=(1, 8, 8, 2)))
        rolled = np.roll(x.data, (-2, -2), axis=(1, 2))
        w = T.window_split(x, 4, 2)
        assert np.array_equal(w.data[0], rolled[0, 0:4, 0:4, :].reshape(16, 2))

    def test_window_merge_add_fuses_residual(self, rng):
        x = T.tensor(rng.normal(size=(1, 8, 8, 3)))
        res = T.tensor(rng.normal(size=(1, 8, 8, 3)))
        w = T.window_split(x, 4, 2)
        fused = T.window_merge_add(w, res, 4, 2)
        plain = T.add(T.window_merge(w, 4, 8, 8, 2), res)
        assert np.allclose(fused.data, plain.data)


class TestMatmul:
    """matmul family, including the fused projection variants."""

    def test_matmul(self, rng):
        a = T.tensor(rng.normal(size=(4, 3, 5)))
        b = T.tensor(rng.normal(size=(4, 5, 2)))
        assert np.allclose(T.matmul(a, b).data, a.data @ b.data)

    def test_matmul_bias(self, rng):
        a = T.tensor(rng.normal(size=(6, 5)))
        w = T.tensor(rng.normal(size=(5, 3)))
        b = T.tensor(rng.normal(size=(3,)))
        assert np.allclose(T.matmul_bias(a, w, b).data, a.data @ w.data + b.data)

    def test_matmul_bias_add(self, rng):
        """Fused projection+residual equals the unfused composition."""
        a = T.tensor(rng.normal(size=(6, 5)))
        w = T.tensor(rng.normal(size=(5, 3)))
        b = T.tensor(rng.normal(size=(3,)))
        res = T.tensor(rng.normal(size=(6, 3)))
        out = T.matmul_bias_add(a, w, b, res)
        assert np.allclose(out.data, a.data @ w.data + b.data + res.data)

    def test_concat_matmul_bias(self, rng):
        """Fused concat+projection equals concatenate-then-matmul."""
        parts = [T.tensor(rng.normal(size=(2, 3, k))) for k in (2, 4)]
        w = T.tensor(rng.normal(size=(6, 5)))
        b = T.tensor(rng.normal(size=(5,)))
        out = T.concat_matmul_bias(parts, w, b)
        cat = np.concatenate([p.data for p in parts], axis=-1)
        assert np.allclose(out.data, cat @ w.data + b.data)

    def test_slice_add(self, rng):
        """Fused slice+carry equals narrow followed by add."""
        a = T.tensor(rng.normal(size=(4, 12)))
        prev = T.tensor(rng.normal(size=(4, 4)))
        out = T.slice_add(a, prev, 4, 8)
        assert np.allclose(out.data, a.data[:, 4:8] + prev.data)


class TestNormalization:
    """layer_norm, the fused norm_windows, and softmax variants."""

    def test_layer_norm_matches_manual(self, rng):
        x = T.tensor(rng.normal(size=(3, 7, 6)))
        gamma = T.tensor(rng.normal(size=(6,)))
        beta = T.tensor(rng.normal(size=(6,)))
        out = T.layer_norm(x, gamma, beta, eps=1e-5)
        mu = x.data.mean(axis=-1, keepdims=True)
        var = x.data.var(axis=-1, keepdims=True)
        expected = (x.data - mu) / np.sqrt(var + 1e-5) * gamma.data + beta.data
        assert np.allclose(out.data, expected, atol=1e-5)

    def test_norm_windows_equals_composition(self, rng):
        """Fused norm+split equals layer_norm followed by window_split."""
        x = T.tensor(rng.normal(size=(2, 8, 8, 6)))
        gamma = T.tensor(rng.normal(size=(6,)))
        beta = T.tensor(rng.normal(size=(6,)))
        for shift in (0, 2):
            fused = T.norm_windows(x, gamma, beta, 4, shift)
            plain = T.window_split(T.layer_norm(x, gamma, beta), 4, shift)
            assert np.allclose(fused.data, plain.data, atol=1e-6)

    def test_softmax_rows_sum_to_one(self, rng):
        x = T.tensor(rng.normal(size=(3, 4, 9)))
        out = T.softmax_last(x)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_softmax_shift_invariance(self, rng):
        """Adding a constant to all logits leaves the softmax unchanged."""
        x = rng.normal(size=(2, 5))
        a = T.softmax_last(T.tensor(x))
        b = T.softmax_last(T.tensor(x + 100.0))
        assert np.allclose(a.data, b.data, atol=1e-6)

    def test_softmax_bias_no_mask(self, rng):
        """Fused bias softmax equals softmax of (logits + bias)."""
        logits = T.tensor(rng.normal(size=(4, 2, 6, 6)))
        bias = T.tensor(rng.normal(size=(2, 6, 6)))
        out = T.softmax_bias(logits, bias, None, 4)
        z = logits.data + bias.data
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        assert np.allclose(out.data, e / e.sum(axis=-1, keepdims=True), atol=1e-6)

    def test_softmax_bias_with_mask(self, rng):
        """The (nW, N, N) mask is added per window before normalizing."""
        num_win = 3
        logits = T.tensor(rng.normal(size=(2 * num_win, 2, 4, 4)))
        bias = T.tensor(rng.normal(size=(2, 4, 4)))
        mask = np.where(rng.random((num_win, 4, 4)) < 0.3, -100.0, 0.0).astype(np.float32)
        out = T.softmax_bias(logits, bias, mask, num_win)
        z = logits.data + bias.data
        z = z.reshape(2, num_win, 2, 4, 4) + mask[:, None]
        z = z.reshape(2 * num_win, 2, 4, 4)
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        assert np.allclose(out.data, e / e.sum(axis=-1, keepdims=True), atol=1e-6)

    def test_bias_gather(self, rng):
        table = T.tensor(rng.normal(size=(9, 2)))
        index = np.array([[0, 4], [8, 4]])
        out = T.bias_gather(table, index)
        assert np.array_equal(out.data, table.data[index])


class TestAttend:
    """The recomputing attention core against a dense numpy oracle."""

    def test_attend_matches_oracle(self, rng):
        q = rng.normal(size=(6, 9, 4)).astype(np.float32)
        k = rng.normal(size=(6, 9, 4)).astype(np.float32)
        v = rng.normal(size=(6, 9, 5)).astype(np.float32)
        bias = rng.normal(size=(9, 9)).astype(np.float32)
        scale = 0.5
        out = T.attend(T.tensor(q), T.tensor(k), T.tensor(v), T.tensor(bias),
                       None, 1, scale)
        z = q @ k.transpose(0, 2, 1) * scale + bias
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
        assert np.allclose(out.data, p @ v, atol=1e-5)

    def test_attend_mask_blocks_tokens(self, rng):
        """A -100 mask entry zeroes that token's attention weight."""
        num_win = 2
        q = rng.normal(size=(num_win, 4, 3)).astype(np.float32)
        k = rng.normal(size=(num_win, 4, 3)).astype(np.float32)
        v = np.eye(4, dtype=np.float32)[None].repeat(num_win, axis=0)
        bias = np.zeros((4, 4), dtype=np.float32)
        mask = np.zeros((num_win, 4, 4), dtype=np.float32)
        mask[0, :, 2] = -100.0
        out = T.attend(T.tensor(q), T.tensor(k), T.tensor(v), T.tensor(bias),
                       mask, num_win, 1.0)
        # v is the identity, so out[w, i, j] is the weight token i puts on j.
        assert np.all(out.data[0, :, 2] < 1e-6)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-5)


class TestConv:
    """conv3x3 (both layouts), pixel_shuffle, and the fused upsampler op."""

    @staticmethod
    def naive_conv(x, w, b):
        bb, h, wd, c = x.shape
        co = w.shape[0]
        xp = np.zeros((bb, h + 2, wd + 2, c), dtype=np.float64)
        xp[:, 1:-1, 1:-1] = x
        out = np.zeros((bb, h, wd, co))
        for i in range(h):
            for j in range(wd):
                patch = xp[:, i:i + 3, j:j + 3, :]  # (B, 3, 3, C)
                out[:, i, j, :] = np.einsum("byxc,ocyx->bo", patch, w)
        return out + b

    def test_conv3x3_matches_naive(self, rng):
        x = rng.normal(size=(2, 5, 6, 3)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=(4,)).astype(np.float32)
        out = T.conv3x3(T.tensor(x), T.tensor(w), T.tensor(b))
        assert np.allclose(out.data, self.naive_conv(x, w, b), atol=1e-4)

    def test_conv3x3_nchw_output(self, rng):
        x = rng.normal(size=(1, 4, 4, 2)).astype(np.float32)
        w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        b = rng.normal(size=(3,)).astype(np.float32)
        nhwc = T.conv3x3(T.tensor(x), T.tensor(w), T.tensor(b))
        nchw = T.conv3x3(T.tensor(x), T.tensor(w), T.tensor(b), out_nchw=True)
        assert np.array_equal(nchw.data, nhwc.data.transpose(0, 3, 1, 2))

    def test_pixel_shuffle_layout(self, rng):
        """Channel block c*s*s + i*s + j lands at spatial offset (i, j)."""
        s = 2
        x = rng.normal(size=(1, 3, 4, 2 * s * s)).astype(np.float32)
        out = T.pixel_shuffle(T.tensor(x), s)
        assert out.shape == (1, 6, 8, 2)
        for ys in range(6):
            for xs in range(8):
                src = x[0, ys // s, xs // s, :].reshape(2, s, s)
                assert np.array_equal(out.data[0, ys, xs], src[:, ys % s, xs % s])

    def test_conv3x3_shuffle_equals_composition(self, rng):
        x = T.tensor(rng.normal(size=(1, 4, 5, 3)).astype(np.float32))
        w = T.tensor(rng.normal(size=(8, 3, 3, 3)).astype(np.float32))
        b = T.tensor(rng.normal(size=(8,)).astype(np.float32))
        fused = T.conv3x3_shuffle(x, w, b, 2)
        plain = T.pixel_shuffle(T.conv3x3(x, w, b), 2)
        assert np.allclose(fused.data, plain.data, atol=1e-5)


class TestTape:
    """Gradient bookkeeping: accumulation, reuse, and error paths."""

    def test_grad_accumulates_on_reuse(self, rng):
        """A tensor consumed twice receives the sum of both adjoints."""
        a = T.tensor(rng.normal(size=(3,)))
        (ga,) = grad_of(lambda: T.mean_all(T.add(a, a)), a)
        assert np.allclose(ga, 2.0 / 3.0)

    def test_backward_requires_scalar(self, rng):
        a = T.tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with Tape() as tape:
            out = T.scale(a, 2.0)
            with pytest.raises(ValueError):
                tape.backward(out)

    def test_intermediate_grads_dropped(self, rng):
        """Only leaves keep gradients after backward."""
        a = T.tensor(rng.normal(size=(4,)), requires_grad=True)
        with Tape() as tape:
            mid = T.scale(a, 3.0)
            loss = T.mean_all(mid)
            tape.backward(loss)
        assert a.grad is not None
        assert mid.grad is None

    def test_untracked_inputs_get_no_grad(self, rng):
        a = T.tensor(rng.normal(size=(3,)), requires_grad=True)
        b = T.tensor(rng.normal(size=(3,)))
        with Tape() as tape:
            loss = T.mean_all(T.mul(a, b))
            tape.backward(loss)
        assert a.grad is not None
        assert b.grad is None

    def test_chain_rule_value(self, rng):
        """d/da mean((2a)^2) = 8a/n, checked against the closed form."""
        a = T.tensor(rng.normal(size=(5,)))
        (ga,) = grad_of(lambda: T.mean_all(T.mul(T.scale(a, 2.0), T.scale(a, 2.0))), a)
        assert np.allclose(ga, 8.0 * a.data / 5.0, atol=1e-5)


class TestNonFinite:
    """Every op output is checked; poisoned inputs raise immediately."""

    def test_nan_input_raises(self):
        a = T.tensor([1.0, np.nan])
        b = T.tensor([1.0, 1.0])
        with pytest.raises(NonFiniteError):
            T.add(a, b)

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_inf_via_overflow_raises(self):
        big = T.tensor(np.full(4, 3e38, dtype=np.float32))
        with pytest.raises(NonFiniteError):
            T.mul(big, big)

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_error_names_the_op(self):
        with pytest.raises(NonFiniteError, match="matmul"):
            T.matmul(T.tensor(np.full((2, 2), np.inf)), T.tensor(np.eye(2)))


class TestDtype:
    """float32 stays float32 through every op (no silent promotion)."""

    def test_ops_preserve_float32(self, rng):
        x32 = T.tensor(rng.normal(size=(1, 8, 8, 4)).astype(np.float32))
        gamma = T.tensor(np.ones(4, dtype=np.float32))
        beta = T.tensor(np.zeros(4, dtype=np.float32))
        outs = {
            "gelu": T.gelu(x32),
            "layer_norm": T.layer_norm(x32, gamma, beta),
            "softmax": T.softmax_last(x32),
            "scale": T.scale(x32, 0.3),
            "add_const": T.add_const(x32, 0.1),
            "window_split": T.window_split(x32, 4, 2),
            "charbonnier": T.charbonnier_loss(x32, T.tensor(np.zeros_like(x32.data)), 1e-3),
        }
        for name, out in outs.items():
            assert out.dtype == np.float32, f"{name} promoted to {out.dtype}"

    def test_gelu_backward_preserves_float32(self, rng):
        """The tanh recompute in backward must not widen the gradient."""
        a = T.tensor(rng.normal(size=(6,)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            loss = T.mean_all(T.gelu(a))
            tape.backward(loss)
        assert a.grad.dtype == np.float32


class TestMemoryMeter:
    """Buffer accounting used by the peak-memory measurement."""

    def test_counts_each_buffer_once(self, rng):
        T.meter.reset()
        T.meter.enabled = True
        try:
            data = rng.normal(size=(16, 16)).astype(np.float32)
            t1 = Tensor(data)
            before = T.meter.live_bytes
            t2 = Tensor(data[2:8])  # view into the same buffer
            assert T.meter.live_bytes == before
            t3 = Tensor(data.copy())
            assert T.meter.live_bytes == before + data.nbytes
            del t1, t2, t3
        finally:
            T.meter.enabled = False
            T.meter.reset()

    def test_peak_tracks_high_water(self, rng):
        T.meter.reset()
        T.meter.enabled = True
        try:
            keep = Tensor(np.zeros(1000, dtype=np.float32))
            tmp = Tensor(np.zeros(4000, dtype=np.float32))
            peak = T.meter.peak_bytes
            del tmp
            import gc
            gc.collect()
            assert T.meter.live_bytes <= peak
            assert peak >= 5000 * 4
            del keep
        finally:
            T.meter.enabled = False
            T.meter.reset()

    def test_disabled_meter_costs_nothing(self, rng):
        assert T.meter.enabled is False
        before = T.meter.live_bytes
        Tensor(np.zeros(100, dtype=np.float32))
        assert T.meter.live_bytes == before
