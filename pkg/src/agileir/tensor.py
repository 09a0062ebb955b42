"""Reverse-mode automatic differentiation on numpy buffers.

A ``Tensor`` wraps a contiguous numpy array.  While a ``Tape`` is active,
every differentiable op appends one record to it;  ``Tape.backward`` replays
the records in exact reverse order of recording and accumulates gradients
into ``Tensor.grad``.  There is no graph pruning and no higher-order
differentiation: one tape, one forward, one backward.

Training runs in float32.  For gradient checking the same ops run unchanged
in float64 (dtype follows the input buffers).

Every op validates its output for NaN/Inf and raises ``NonFiniteError``
naming the offending op, so numerical blow-ups fail loudly at the op that
produced them instead of three modules later.
"""

from __future__ import annotations

import weakref
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "tensor", "zeros", "meter",
    "add", "sub", "mul", "scale", "add_const", "matmul", "matmul_bias",
    "reshape", "transpose", "narrow_last", "index_first", "concat_last",
    "roll2d", "window_split", "window_merge", "gather_hw",
    "crop_hw", "layer_norm", "gelu", "softmax_last", "softmax_bias", "attend",
    "bias_gather", "conv3x3", "pixel_shuffle", "mean_all", "sqrt",
    "norm_windows", "window_merge_add", "slice_add", "matmul_bias_add",
    "concat_matmul_bias", "charbonnier_loss", "conv3x3_shuffle",
]

class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf.  ``op`` names the producer."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


class _MemoryMeter:
    """Live-bytes accounting for tensor buffers, used by the memory model.

    Disabled by default (zero overhead on the training path); the peak
    measurement utilities enable it around a forward/backward pass.  Each
    distinct owning numpy buffer reachable from a ``Tensor`` is counted
    once, including buffers held only through views.
    """

    __slots__ = ("enabled", "live_bytes", "peak_bytes", "epoch", "_ids")

    def __init__(self):
        self.enabled = False
        self.live_bytes = 0
        self.peak_bytes = 0
        self.epoch = 0
        self._ids: set[int] = set()

    def reset(self):
        self.live_bytes = 0
        self.peak_bytes = 0
        self.epoch += 1
        self._ids = set()

    def register(self, data: np.ndarray):
        buf = data
        while isinstance(buf.base, np.ndarray):
            buf = buf.base
        key = id(buf)
        if key in self._ids:
            return
        self._ids.add(key)
        self.live_bytes += buf.nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
        weakref.finalize(buf, self._release, key, buf.nbytes, self.epoch)

    def _release(self, key: int, nbytes: int, epoch: int):
        if epoch == self.epoch:
            self._ids.discard(key)
            self.live_bytes -= nbytes


meter = _MemoryMeter()


class Tensor:
    """A numpy buffer plus gradient slot.

    Args:
        data: array-like; stored as given (dtype is the caller's choice).
        requires_grad: mark as a gradient leaf (parameters) or force
            gradient tracking.  Op outputs inherit this from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        if meter.enabled:
            meter.register(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    """Build a tensor with an explicit dtype (default float32)."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


class Tape:
    """Ordered record of ops for one forward pass.

    Used as a context manager::

        with Tape() as tape:
            loss = ...
            tape.backward(loss)

    ``backward`` seeds d(loss)/d(loss) = 1 and visits records strictly in
    reverse order of recording.  Gradients of intermediates are dropped as
    soon as they have been consumed; leaf gradients stay on ``.grad``.
    """

    _active: Optional["Tape"] = None

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise RuntimeError("a Tape is already active; nested tapes are not supported")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self._records.append((out, inputs, backward))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into each leaf's ``.grad``."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            grads = backward(g)
            for t, gi in zip(inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = gi
                else:
                    t.grad = t.grad + gi
            out.grad = None


def _check_finite(op: str, data: np.ndarray):
    # One cheap pass: a float64 sum is finite iff every element is finite
    # (NaN/Inf propagate through the accumulator).
    if not np.isfinite(data.sum(dtype=np.float64)):
        raise NonFiniteError(op)


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Wrap an op output: finiteness check, grad flag, tape record."""
    _check_finite(op, data)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = Tape._active
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _result("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)
    return _result("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))
    return _result("mul", a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        return (g * s,)
    return _result("scale", a.data * s, (a,), backward)


def add_const(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g,)
    return _result("add_const", a.data + c, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g * (0.5 / out_data),)
    return _result("sqrt", out_data, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    inv = 1.0 / a.data.size

    def backward(g):
        return (np.full(a.data.shape, float(g) * inv, dtype=a.data.dtype),)
    return _result("mean_all", np.asarray(a.data.mean(dtype=a.data.dtype)), (a,), backward)


def charbonnier_loss(pred: Tensor, target: Tensor, eps: float) -> Tensor:
    """mean(sqrt((pred - target)^2 + eps^2)) as one op.

    Every intermediate (difference, square, root) is scratch; backward
    rebuilds them from the two saved endpoints.
    """
    if pred.data.shape != target.data.shape:
        raise ValueError(f"shape mismatch: {pred.data.shape} vs {target.data.shape}")
    d = pred.data - target.data
    out_data = np.asarray(np.sqrt(d * d + eps * eps).mean(dtype=pred.data.dtype))
    inv = 1.0 / pred.data.size

    def backward(g):
        d_b = pred.data - target.data
        gp = (float(g) * inv) * d_b / np.sqrt(d_b * d_b + eps * eps)
        return gp, -gp
    return _result("charbonnier_loss", out_data, (pred, target), backward)


# Plain python floats: numpy scalar constants would promote float32
# activations to float64 under the value-independent casting rules.
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3))).

    Only the pre-activation is saved; the tanh is recomputed in backward
    (an elementwise pass is far cheaper than holding the hidden map).
    """
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        xx = x * x
        t_b = np.tanh(_GELU_C * (x + _GELU_A * xx * x))
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xx)
        return (g * (0.5 * (1.0 + t_b) + 0.5 * x * (1.0 - t_b * t_b) * du),)
    return _result("gelu", out_data, (a,), backward)


# ---------------------------------------------------------------------------
# shape / layout
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.data.shape),)
    return _result("reshape", np.ascontiguousarray(a.data.reshape(shape)), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)
    return _result("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def narrow_last(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        ga = np.zeros(a.data.shape, dtype=a.data.dtype)
        ga[..., start:stop] = g
        return (ga,)
    return _result("narrow_last", np.ascontiguousarray(a.data[..., start:stop]), (a,), backward)


def slice_add(a: Tensor, prev: Tensor, start: int, stop: int) -> Tensor:
    """Fused a[..., start:stop] + prev (one buffer, no separate slice copy)."""
    def backward(g):
        ga = np.zeros(a.data.shape, dtype=a.data.dtype)
        ga[..., start:stop] = g
        return ga, g
    return _result("slice_add", a.data[..., start:stop] + prev.data, (a, prev), backward)


def index_first(a: Tensor, i: int) -> Tensor:
    """Select index ``i`` along axis 0 (dropping the axis)."""
    def backward(g):
        ga = np.zeros(a.data.shape, dtype=g.dtype)
        ga[i] = g
        return (ga,)
    return _result("index_first", np.ascontiguousarray(a.data[i]), (a,), backward)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        return tuple(np.ascontiguousarray(g[..., offsets[i]:offsets[i + 1]])
                     for i in range(len(widths)))
    return _result("concat_last", np.concatenate([p.data for p in parts], axis=-1),
                   tuple(parts), backward)


def roll2d(a: Tensor, shift_h: int, shift_w: int) -> Tensor:
    """Cyclic shift along axes 1 and 2 of a (B, H, W, C) tensor."""
    def backward(g):
        return (np.roll(g, (-shift_h, -shift_w), axis=(1, 2)),)
    return _result("roll2d", np.roll(a.data, (shift_h, shift_w), axis=(1, 2)), (a,), backward)


def _split_windows(data: np.ndarray, m: int, shift: int) -> np.ndarray:
    b, h, w, c = data.shape
    if shift:
        data = np.roll(data, (-shift, -shift), axis=(1, 2))
    tiles = data.reshape(b, h // m, m, w // m, m, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tiles).reshape(-1, m * m, c)


def _merge_windows(data: np.ndarray, m: int, h: int, w: int, shift: int) -> np.ndarray:
    c = data.shape[-1]
    tiles = data.reshape(-1, h // m, w // m, m, m, c).transpose(0, 1, 3, 2, 4, 5)
    out = np.ascontiguousarray(tiles).reshape(-1, h, w, c)
    if shift:
        out = np.roll(out, (shift, shift), axis=(1, 2))
    return out


def window_split(a: Tensor, m: int, shift: int = 0) -> Tensor:
    """(B, H, W, C) -> (B*nW, M*M, C) row-major tiles, with an optional
    cyclic shift by ``-shift`` folded in (one materialized buffer total)."""
    def backward(g):
        b, h, w, _ = a.data.shape
        return (_merge_windows(g, m, h, w, shift),)
    return _result("window_split", _split_windows(a.data, m, shift), (a,), backward)


def window_merge(a: Tensor, m: int, h: int, w: int, shift: int = 0) -> Tensor:
    """Inverse of :func:`window_split` (undoes the shift last)."""
    def backward(g):
        return (_split_windows(g, m, shift),)
    return _result("window_merge", _merge_windows(a.data, m, h, w, shift), (a,), backward)


def window_merge_add(a: Tensor, res: Tensor, m: int, shift: int = 0) -> Tensor:
    """Window merge fused with a residual add: merge(a) + res.

    ``res`` is the (B, H, W, C) canvas the windows came from, which also
    fixes the output size; the un-added merged canvas is never retained.
    """
    _, h, w, _ = res.data.shape
    out_data = _merge_windows(a.data, m, h, w, shift)
    out_data += res.data

    def backward(g):
        return _split_windows(g, m, shift), g
    return _result("window_merge_add", out_data, (a, res), backward)


def gather_hw(a: Tensor, row_idx: np.ndarray, col_idx: np.ndarray) -> Tensor:
    """Index rows/cols of a (B, H, W, C) tensor: out[:, i, j] = a[:, row_idx[i], col_idx[j]].

    Backward scatter-adds, so repeated indices (padding) accumulate.
    """
    out_data = np.ascontiguousarray(a.data[:, row_idx][:, :, col_idx])

    def backward(g):
        h_in = a.data.shape[1]
        tmp = np.zeros((g.shape[0], h_in) + g.shape[2:], dtype=g.dtype)
        np.add.at(tmp, (slice(None), row_idx), g)
        ga = np.zeros(a.data.shape, dtype=g.dtype)
        np.add.at(ga, (slice(None), slice(None), col_idx), tmp)
        return (ga,)
    return _result("gather_hw", out_data, (a,), backward)


def crop_hw(a: Tensor, h0: int, h1: int, w0: int, w1: int) -> Tensor:
    """Crop axes 1 and 2 of a (B, H, W, C) tensor to [h0:h1, w0:w1]."""
    def backward(g):
        ga = np.zeros(a.data.shape, dtype=g.dtype)
        ga[:, h0:h1, w0:w1] = g
        return (ga,)
    return _result("crop_hw", np.ascontiguousarray(a.data[:, h0:h1, w0:w1]), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading dims."""
    def backward(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb
    return _result("matmul", a.data @ b.data, (a, b), backward)


def matmul_bias(a: Tensor, b: Tensor, c: Tensor) -> Tensor:
    """Fused a @ b + c (one output buffer instead of two)."""
    def backward(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb, _unbroadcast(g, c.data.shape)
    return _result("matmul_bias", a.data @ b.data + c.data, (a, b, c), backward)


def matmul_bias_add(a: Tensor, b: Tensor, c: Tensor, res: Tensor) -> Tensor:
    """Fused a @ b + c + res; ``res`` must match the output shape.

    Folds a projection's residual connection into the projection itself so
    the pre-residual product is never a retained buffer.
    """
    out_data = a.data @ b.data + c.data
    out_data += res.data

    def backward(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb, _unbroadcast(g, c.data.shape), g
    return _result("matmul_bias_add", out_data, (a, b, c, res), backward)


def concat_matmul_bias(parts: Sequence[Tensor], w: Tensor, b: Tensor) -> Tensor:
    """Fused concat(parts, axis=-1) @ w + b.

    The concatenation is scratch in both passes (rebuilt for the weight
    gradient), so only the projection output is retained.
    """
    parts = tuple(parts)
    widths = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)
    cat = np.concatenate([p.data for p in parts], axis=-1)
    out_data = cat @ w.data + b.data
    del cat
    lead = tuple(range(out_data.ndim - 1))

    def backward(g):
        cat_b = np.concatenate([p.data for p in parts], axis=-1)
        gw = np.tensordot(cat_b, g, axes=(lead, lead))
        del cat_b
        gcat = g @ w.data.swapaxes(-1, -2)
        gparts = tuple(gcat[..., offsets[i]:offsets[i + 1]] for i in range(len(parts)))
        return gparts + (gw, g.sum(axis=lead))
    return _result("concat_matmul_bias", out_data, parts + (w, b), backward)


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis.  Saves its output for backward."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return ((g - dot) * out_data,)
    return _result("softmax_last", out_data, (a,), backward)


def softmax_bias(logits: Tensor, bias: Tensor, mask: Optional[np.ndarray],
                 num_win: int) -> Tensor:
    """Additive position bias (and optional window mask) folded into a softmax.

    ``logits`` is (B*nW, heads, N, N); ``bias`` broadcasts as (N, N); ``mask``
    is a constant (nW, N, N) applied per window.  Backward needs only the
    probabilities, so this path keeps exactly two map-sized buffers alive:
    the raw logits and this output.
    """
    x = logits.data + bias.data
    n = x.shape[-1]
    if mask is not None:
        view = x.reshape(-1, num_win, x.shape[1], n, n)
        view += mask[:, None]
    m = x.max(axis=-1, keepdims=True)
    x -= m
    np.exp(x, out=x)
    s = x.sum(axis=-1, keepdims=True)
    np.reciprocal(s, out=s)
    x *= s
    out_data = x

    def backward(g):
        ds = out_data * (g - (g * out_data).sum(axis=-1, keepdims=True))
        return ds, _unbroadcast(ds, bias.data.shape)
    return _result("softmax_bias", out_data, (logits, bias), backward)


def _norm_stats(data: np.ndarray, eps: float):
    mu = data.mean(axis=-1, keepdims=True)
    var = data.var(axis=-1, keepdims=True)
    return mu, 1.0 / np.sqrt(var + eps)


def _norm_backward(g, data, gamma, mu, rstd):
    """Shared layer-norm input/parameter gradients; xhat is recomputed."""
    xhat = (data - mu) * rstd
    red = tuple(range(g.ndim - 1))
    dgamma = (g * xhat).sum(axis=red)
    dbeta = g.sum(axis=red)
    dxhat = g * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = rstd * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis (population variance).

    Only the per-row mean and inverse std survive to backward; the
    normalized map is recomputed there instead of being held.
    """
    data = x.data
    mu, rstd = _norm_stats(data, eps)
    out_data = ((data - mu) * rstd) * gamma.data + beta.data

    def backward(g):
        return _norm_backward(g, x.data, gamma.data, mu, rstd)
    return _result("layer_norm", out_data, (x, gamma, beta), backward)


def norm_windows(x: Tensor, gamma: Tensor, beta: Tensor, m: int,
                 shift: int = 0, eps: float = 1e-5) -> Tensor:
    """Layer norm immediately followed by window partition, fused.

    (B, H, W, C) -> (B*nW, M*M, C).  The normalized canvas is a transient;
    only the windowed output is retained.
    """
    data = x.data
    mu, rstd = _norm_stats(data, eps)
    normed = ((data - mu) * rstd) * gamma.data + beta.data
    out_data = _split_windows(normed, m, shift)

    def backward(g):
        b, h, w, _ = x.data.shape
        gy = _merge_windows(g, m, h, w, shift)
        return _norm_backward(gy, x.data, gamma.data, mu, rstd)
    return _result("norm_windows", out_data, (x, gamma, beta), backward)


def bias_gather(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather a flat bias table into a (N, N) matrix by integer index."""
    flat = index.ravel()

    def backward(g):
        gt = np.bincount(flat, weights=g.ravel().astype(np.float64),
                         minlength=table.data.size)
        return (gt.astype(table.data.dtype),)
    return _result("bias_gather", table.data[index], (table,), backward)


def _attention_probs(q, k, bias, mask, num_win, att_scale):
    """Shared forward math for ``attend``: softmax(q k^T * scale + bias + mask).

    The scale is applied to q (the small operand) and bias/mask are merged
    into one additive pass; everything after the matmul mutates the logits
    buffer in place.
    """
    logits = (q * att_scale) @ k.swapaxes(-1, -2)
    if mask is None:
        logits += bias
    else:
        n = q.shape[-2]
        view = logits.reshape(-1, num_win, n, n)
        view += bias + mask  # (nW, N, N) temp, freed on return
    m = logits.max(axis=-1, keepdims=True)
    logits -= m
    np.exp(logits, out=logits)
    s = logits.sum(axis=-1, keepdims=True)
    np.reciprocal(s, out=s)
    logits *= s
    return logits


def attend(q: Tensor, k: Tensor, v: Tensor, bias: Tensor,
           mask: Optional[np.ndarray], num_win: int, att_scale: float) -> Tensor:
    """Windowed attention core: softmax(q k^T * scale + bias + mask) @ v.

    ``q``/``k`` are (B*nW, N, d_k), ``v`` is (B*nW, N, d_v), ``bias`` a
    (N, N) matrix and ``mask`` an optional (nW, N, N) constant.  The
    probability matrix is NOT retained for backward; it is recomputed from
    the saved q/k/bias, so the only buffers this op keeps alive are its
    inputs.  That trade (one extra small matmul in backward for not holding
    an (B*nW, N, N) map per layer) is what keeps training memory low.
    """
    probs = _attention_probs(q.data, k.data, bias.data, mask, num_win, att_scale)
    out_data = probs @ v.data
    del probs

    def backward(g):
        p = _attention_probs(q.data, k.data, bias.data, mask, num_win, att_scale)
        gv = p.swapaxes(-1, -2) @ g
        dp = g @ v.data.swapaxes(-1, -2)
        ds = (dp - (dp * p).sum(axis=-1, keepdims=True)) * p
        del p, dp
        gq = (ds @ k.data) * att_scale
        gk = (ds.swapaxes(-1, -2) @ q.data) * att_scale
        gbias = ds.sum(axis=0)
        return gq, gk, gv, gbias
    return _result("attend", out_data, (q, k, v, bias), backward)


# ---------------------------------------------------------------------------
# convolution / reconstruction
# ---------------------------------------------------------------------------

def _im2col3(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, H*W, 9*C) patches of the zero-padded input.

    Patch layout is tap-major ((dy, dx) blocks of C channels), so each of
    the nine fills is a plain strided copy with a contiguous channel run.
    """
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
    for t in range(9):
        i, j = divmod(t, 3)
        cols[:, :, :, t, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(b, h * w, 9 * c)


def _col2im3(cols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of ``_im2col3``: scatter-add patch gradients back."""
    b, h, w, c = shape
    acc = np.zeros((b, h + 2, w + 2, c), dtype=cols.dtype)
    g = cols.reshape(b, h, w, 9, c)
    for t in range(9):
        i, j = divmod(t, 3)
        acc[:, i:i + h, j:j + w, :] += g[:, :, :, t, :]
    return acc[:, 1:-1, 1:-1, :]


def _conv_weight2d(w: np.ndarray) -> np.ndarray:
    """(co, c, 3, 3) -> (9c, co), matching the tap-major patch layout."""
    co, c = w.shape[:2]
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(9 * c, co)


def _conv_backward(g2, x, w, w2, has_bias):
    """Input/weight/bias gradients from the flattened output gradient."""
    co, c = w.shape[:2]
    cols_b = _im2col3(x)
    gw2 = np.tensordot(cols_b, g2, axes=([0, 1], [0, 1]))  # (9c, co)
    del cols_b
    gw = np.ascontiguousarray(gw2.reshape(3, 3, c, co).transpose(3, 2, 0, 1))
    gx = _col2im3(g2 @ w2.T, x.shape)
    if not has_bias:
        return gx, gw
    return gx, gw, g2.sum(axis=(0, 1))


def conv3x3(x: Tensor, w: Tensor, b: Optional[Tensor],
            out_nchw: bool = False) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, on (B, H, W, C).

    ``w`` is (C_out, C_in, 3, 3).  The input is saved and the im2col matrix
    is recomputed in backward rather than held (it is 9x the input size).
    ``out_nchw`` transposes the result to (B, C_out, H, W) inside the op,
    for the network's channels-first boundary.
    """
    bb, h, wd, c = x.data.shape
    co = w.data.shape[0]
    w2 = _conv_weight2d(w.data)
    y = _im2col3(x.data) @ w2
    if b is not None:
        y += b.data
    if out_nchw:
        out_data = np.ascontiguousarray(y.reshape(bb, h, wd, co).transpose(0, 3, 1, 2))
        del y
    else:
        out_data = y.reshape(bb, h, wd, co)

    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        if out_nchw:
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bb, h * wd, co)
        else:
            g2 = g.reshape(bb, h * wd, co)
        return _conv_backward(g2, x.data, w.data, w2, b is not None)
    return _result("conv3x3", out_data, inputs, backward)


def _shuffle(y: np.ndarray, s: int) -> np.ndarray:
    b, h, w, cs2 = y.shape
    c = cs2 // (s * s)
    return np.ascontiguousarray(
        y.reshape(b, h, w, c, s, s).transpose(0, 1, 4, 2, 5, 3)
    ).reshape(b, h * s, w * s, c)


def _unshuffle(g: np.ndarray, s: int) -> np.ndarray:
    b, hs, ws, c = g.shape
    h, w = hs // s, ws // s
    gg = g.reshape(b, h, s, w, s, c).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(gg).reshape(b, h, w, c * s * s)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """(B, H, W, C*s^2) -> (B, H*s, W*s, C); channel block (c, i, j) maps to
    spatial offset (i, j)."""
    def backward(g):
        return (_unshuffle(g, s),)
    return _result("pixel_shuffle", _shuffle(x.data, s), (x,), backward)


def conv3x3_shuffle(x: Tensor, w: Tensor, b: Optional[Tensor], s: int) -> Tensor:
    """Upsampling stage: conv3x3 fused with pixel shuffle.

    The pre-shuffle feature map is scratch in both passes; only the
    s-times-larger shuffled output is retained.
    """
    bb, h, wd, c = x.data.shape
    co = w.data.shape[0]
    w2 = _conv_weight2d(w.data)
    y = _im2col3(x.data) @ w2
    if b is not None:
        y += b.data
    out_data = _shuffle(y.reshape(bb, h, wd, co), s)
    del y

    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = _unshuffle(g, s).reshape(bb, h * wd, co)
        return _conv_backward(g2, x.data, w.data, w2, b is not None)
    return _result("conv3x3_shuffle", out_data, inputs, backward)
