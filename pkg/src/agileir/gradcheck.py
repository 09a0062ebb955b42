"""Finite-difference verification of every backward rule.

All checks run in float64.  A check builds a scalar loss from one op (or a
layer, or the whole tiny model), computes analytic gradients through the
tape, then perturbs every input element by +-h and compares.  The reported
number is max|analytic - numeric| / max(|numeric|_inf, |analytic|_inf, 1e-6).
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from . import windowing
from .attention import FusedWindowAttention, GroupedWindowAttention
from .model import ModelConfig, TransformerLayer, build
from .nn import Conv3x3, LayerNorm, Mlp
from .tensor import Tape, Tensor
from .training import charbonnier

TOLERANCE = 1e-4
_FD_EPS = 1e-5


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = _FD_EPS) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. every element."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.abs(numeric).max(initial=0.0)),
                float(np.abs(analytic).max(initial=0.0)), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / denom


def check(loss_fn: Callable[[], Tensor], leaves: Iterable[Tensor]) -> float:
    """Worst relative error across all leaves of ``loss_fn``."""
    leaves = list(leaves)
    for p in leaves:
        p.grad = None
    with Tape() as tape:
        tape.backward(loss_fn())
    worst = 0.0
    for p in leaves:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(lambda: loss_fn().item(), p.data)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def _leaf(rng: np.random.Generator, shape, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _probe(x: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce any tensor to a scalar with a fixed random projection."""
    w = Tensor(rng.uniform(-1.0, 1.0, size=x.shape))
    return T.mean_all(T.mul(x, w))


# ---------------------------------------------------------------------------
# op-level checks
# ---------------------------------------------------------------------------

def _op_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    def binary(op):
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
        return lambda: check(lambda: _probe(op(a, b), np.random.default_rng(2)), [a, b])

    checks: dict[str, Callable[[], float]] = {}
    checks["add"] = binary(T.add)
    checks["sub"] = binary(T.sub)
    checks["mul"] = binary(T.mul)

    def add_broadcast():
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))
        return check(lambda: _probe(T.add(a, b), np.random.default_rng(2)), [a, b])
    checks["add_broadcast"] = add_broadcast

    def scale_op():
        a = _leaf(rng, (3, 4))
        return check(lambda: _probe(T.scale(a, 0.37), np.random.default_rng(2)), [a])
    checks["scale"] = scale_op

    def add_const():
        a = _leaf(rng, (3, 4))
        return check(lambda: _probe(T.add_const(a, 0.5), np.random.default_rng(2)), [a])
    checks["add_const"] = add_const

    def sqrt_op():
        a = _leaf(rng, (3, 4), 0.5, 2.0)
        return check(lambda: _probe(T.sqrt(a), np.random.default_rng(2)), [a])
    checks["sqrt"] = sqrt_op

    def mean_op():
        a = _leaf(rng, (3, 4))
        return check(lambda: T.mean_all(a), [a])
    checks["mean_all"] = mean_op

    def gelu_op():
        a = _leaf(rng, (3, 4), -2.0, 2.0)
        return check(lambda: _probe(T.gelu(a), np.random.default_rng(2)), [a])
    checks["gelu"] = gelu_op

    def matmul_op():
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 5))
        return check(lambda: _probe(T.matmul(a, b), np.random.default_rng(2)), [a, b])
    checks["matmul"] = matmul_op

    def matmul_batched():
        a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 4, 5))
        return check(lambda: _probe(T.matmul(a, b), np.random.default_rng(2)), [a, b])
    checks["matmul_batched"] = matmul_batched

    def matmul_bias_op():
        a, b, c = _leaf(rng, (3, 4)), _leaf(rng, (4, 5)), _leaf(rng, (5,))
        return check(lambda: _probe(T.matmul_bias(a, b, c), np.random.default_rng(2)), [a, b, c])
    checks["matmul_bias"] = matmul_bias_op

    def softmax_bias_op():
        logits = _leaf(rng, (2, 2, 4, 4), -2.0, 2.0)
        bias = _leaf(rng, (4, 4))
        return check(lambda: _probe(T.softmax_bias(logits, bias, None, 1),
                                    np.random.default_rng(2)), [logits, bias])
    checks["softmax_bias"] = softmax_bias_op

    def softmax_bias_masked_op():
        mask = windowing.build_attn_mask(4, 4, 2, 1).astype(np.float64)
        logits = _leaf(rng, (2 * mask.shape[0], 2, 4, 4), -2.0, 2.0)
        bias = _leaf(rng, (4, 4))
        return check(lambda: _probe(T.softmax_bias(logits, bias, mask, mask.shape[0]),
                                    np.random.default_rng(2)), [logits, bias])
    checks["softmax_bias_masked"] = softmax_bias_masked_op

    def reshape_op():
        a = _leaf(rng, (3, 4))
        return check(lambda: _probe(T.reshape(a, (2, 6)), np.random.default_rng(2)), [a])
    checks["reshape"] = reshape_op

    def transpose_op():
        a = _leaf(rng, (2, 3, 4))
        return check(lambda: _probe(T.transpose(a, (2, 0, 1)), np.random.default_rng(2)), [a])
    checks["transpose"] = transpose_op

    def narrow_op():
        a = _leaf(rng, (3, 6))
        return check(lambda: _probe(T.narrow_last(a, 1, 4), np.random.default_rng(2)), [a])
    checks["narrow_last"] = narrow_op

    def index_first_op():
        a = _leaf(rng, (3, 2, 4))
        return check(lambda: _probe(T.index_first(a, 1), np.random.default_rng(2)), [a])
    checks["index_first"] = index_first_op

    def concat_op():
        a, b = _leaf(rng, (3, 2)), _leaf(rng, (3, 4))
        return check(lambda: _probe(T.concat_last([a, b]), np.random.default_rng(2)), [a, b])
    checks["concat_last"] = concat_op

    def roll_op():
        a = _leaf(rng, (1, 4, 4, 2))
        return check(lambda: _probe(T.roll2d(a, -1, -2), np.random.default_rng(2)), [a])
    checks["roll2d"] = roll_op

    def window_ops():
        a = _leaf(rng, (1, 4, 4, 3))
        def loss():
            w = T.window_split(a, 2, 1)
            back = T.window_merge(w, 2, 4, 4, 1)
            return _probe(back, np.random.default_rng(2))
        return check(loss, [a])
    checks["window_split_merge"] = window_ops

    def gather_op():
        a = _leaf(rng, (1, 3, 3, 2))
        rows = np.array([0, 1, 2, 2, 1])
        cols = np.array([0, 0, 1, 2])
        return check(lambda: _probe(T.gather_hw(a, rows, cols), np.random.default_rng(2)), [a])
    checks["gather_hw"] = gather_op

    def crop_op():
        a = _leaf(rng, (1, 4, 5, 2))
        return check(lambda: _probe(T.crop_hw(a, 1, 3, 0, 4), np.random.default_rng(2)), [a])
    checks["crop_hw"] = crop_op

    def softmax_op():
        a = _leaf(rng, (3, 5), -3.0, 3.0)
        return check(lambda: _probe(T.softmax_last(a), np.random.default_rng(2)), [a])
    checks["softmax_last"] = softmax_op

    def layer_norm_op():
        x = _leaf(rng, (3, 6))
        gamma = _leaf(rng, (6,), 0.5, 1.5)
        beta = _leaf(rng, (6,))
        return check(lambda: _probe(T.layer_norm(x, gamma, beta), np.random.default_rng(2)),
                     [x, gamma, beta])
    checks["layer_norm"] = layer_norm_op

    def bias_gather_op():
        table = _leaf(rng, (9,))
        index = windowing.build_rel_index(2)
        return check(lambda: _probe(T.bias_gather(table, index), np.random.default_rng(2)), [table])
    checks["bias_gather"] = bias_gather_op

    def attend_op():
        mask = windowing.build_attn_mask(4, 4, 2, 1).astype(np.float64)
        nw = mask.shape[0]  # 4 windows of a 4x4 canvas at window 2
        q, k = _leaf(rng, (2 * nw, 4, 3)), _leaf(rng, (2 * nw, 4, 3))
        v = _leaf(rng, (2 * nw, 4, 5))
        bias = _leaf(rng, (4, 4))
        return check(lambda: _probe(T.attend(q, k, v, bias, mask, nw, 3 ** -0.5),
                                    np.random.default_rng(2)), [q, k, v, bias])
    checks["attend"] = attend_op

    def conv_op():
        x = _leaf(rng, (2, 4, 4, 3))
        w = _leaf(rng, (5, 3, 3, 3), -0.5, 0.5)
        b = _leaf(rng, (5,))
        return check(lambda: _probe(T.conv3x3(x, w, b), np.random.default_rng(2)), [x, w, b])
    checks["conv3x3"] = conv_op

    def shuffle_op():
        x = _leaf(rng, (1, 3, 3, 8))
        return check(lambda: _probe(T.pixel_shuffle(x, 2), np.random.default_rng(2)), [x])
    checks["pixel_shuffle"] = shuffle_op

    def charbonnier_op():
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
        return check(lambda: charbonnier(a, b, 1e-3), [a, b])
    checks["charbonnier"] = charbonnier_op

    def norm_windows_op():
        x = _leaf(rng, (1, 4, 4, 3))
        gamma = _leaf(rng, (3,), 0.5, 1.5)
        beta = _leaf(rng, (3,))
        return check(lambda: _probe(T.norm_windows(x, gamma, beta, 2, 1),
                                    np.random.default_rng(2)), [x, gamma, beta])
    checks["norm_windows"] = norm_windows_op

    def window_merge_add_op():
        a = _leaf(rng, (4, 4, 2))  # 4 windows of 2x2 over a 4x4 canvas
        res = _leaf(rng, (1, 4, 4, 2))
        return check(lambda: _probe(T.window_merge_add(a, res, 2, 1),
                                    np.random.default_rng(2)), [a, res])
    checks["window_merge_add"] = window_merge_add_op

    def slice_add_op():
        a, prev = _leaf(rng, (3, 6)), _leaf(rng, (3, 3))
        return check(lambda: _probe(T.slice_add(a, prev, 2, 5),
                                    np.random.default_rng(2)), [a, prev])
    checks["slice_add"] = slice_add_op

    def matmul_bias_add_op():
        a, b, c = _leaf(rng, (3, 4)), _leaf(rng, (4, 5)), _leaf(rng, (5,))
        res = _leaf(rng, (3, 5))
        return check(lambda: _probe(T.matmul_bias_add(a, b, c, res),
                                    np.random.default_rng(2)), [a, b, c, res])
    checks["matmul_bias_add"] = matmul_bias_add_op

    def concat_matmul_bias_op():
        p1, p2 = _leaf(rng, (2, 3, 2)), _leaf(rng, (2, 3, 4))
        w, b = _leaf(rng, (6, 5)), _leaf(rng, (5,))
        return check(lambda: _probe(T.concat_matmul_bias([p1, p2], w, b),
                                    np.random.default_rng(2)), [p1, p2, w, b])
    checks["concat_matmul_bias"] = concat_matmul_bias_op

    def conv_shuffle_op():
        x = _leaf(rng, (1, 3, 3, 2))
        w = _leaf(rng, (8, 2, 3, 3), -0.5, 0.5)
        b = _leaf(rng, (8,))
        return check(lambda: _probe(T.conv3x3_shuffle(x, w, b, 2),
                                    np.random.default_rng(2)), [x, w, b])
    checks["conv3x3_shuffle"] = conv_shuffle_op

    def conv_nchw_op():
        x = _leaf(rng, (1, 4, 4, 2))
        w = _leaf(rng, (3, 2, 3, 3), -0.5, 0.5)
        b = _leaf(rng, (3,))
        return check(lambda: _probe(T.conv3x3(x, w, b, out_nchw=True),
                                    np.random.default_rng(2)), [x, w, b])
    checks["conv3x3_nchw"] = conv_nchw_op

    return checks


# ---------------------------------------------------------------------------
# layer- and model-level checks
# ---------------------------------------------------------------------------

def _layer_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    def grouped_layer():
        attn = GroupedWindowAttention(4, 2, 2, 2, np.random.default_rng(7)).astype(np.float64)
        mask = windowing.build_attn_mask(4, 4, 2, 1).astype(np.float64)  # 4 windows
        x = _leaf(rng, (4, 4, 4))
        leaves = [x] + attn.parameters()
        return check(lambda: _probe(attn(x, mask, 4), np.random.default_rng(2)), leaves)

    def fused_layer():
        attn = FusedWindowAttention(4, 2, 2, np.random.default_rng(7)).astype(np.float64)
        mask = windowing.build_attn_mask(4, 4, 2, 1).astype(np.float64)  # 4 windows
        x = _leaf(rng, (4, 4, 4))
        leaves = [x] + attn.parameters()
        return check(lambda: _probe(attn(x, mask, 4), np.random.default_rng(2)), leaves)

    def transformer_layer():
        cfg = ModelConfig(channels=4, num_blocks=1, layers_per_block=2, groups=2,
                          qk_dim=2, window=2, mlp_ratio=2.0, scale=2)
        layer = TransformerLayer(cfg, shift=1, rng=np.random.default_rng(7)).astype(np.float64)
        x = _leaf(rng, (1, 4, 4, 4))
        mask = windowing.build_attn_mask(4, 4, 2, 1).astype(np.float64)
        leaves = [x] + layer.parameters()
        return check(lambda: _probe(layer(x, mask), np.random.default_rng(2)), leaves)

    def mlp_layer():
        m = Mlp(4, 8, np.random.default_rng(7)).astype(np.float64)
        x = _leaf(rng, (3, 4))
        return check(lambda: _probe(m(x), np.random.default_rng(2)), [x] + m.parameters())

    def norm_layer():
        n = LayerNorm(5).astype(np.float64)
        x = _leaf(rng, (4, 5))
        return check(lambda: _probe(n(x), np.random.default_rng(2)), [x] + n.parameters())

    def conv_layer():
        c = Conv3x3(2, 3, np.random.default_rng(7)).astype(np.float64)
        x = _leaf(rng, (1, 4, 4, 2))
        return check(lambda: _probe(c(x), np.random.default_rng(2)), [x] + c.parameters())

    return {
        "grouped_attention": grouped_layer,
        "fused_attention": fused_layer,
        "transformer_layer": transformer_layer,
        "mlp": mlp_layer,
        "layernorm": norm_layer,
        "conv": conv_layer,
    }


def tiny_model_config() -> ModelConfig:
    return ModelConfig(channels=8, num_blocks=1, layers_per_block=2, groups=2,
                       qk_dim=2, window=4, mlp_ratio=2.0, scale=2)


def _model_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    def end_to_end():
        model = build(tiny_model_config(), seed=7).astype(np.float64)
        lr = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 12, 12)))
        hr = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 24, 24)))
        return check(lambda: charbonnier(model(lr), hr, 1e-3), model.parameters())
    return {"tiny_model_end_to_end": end_to_end}


def suites(scope: str = "all", seed: int = 0) -> dict[str, Callable[[], float]]:
    """Named checks for a scope in {"op", "layer", "model", "all"}."""
    rng = np.random.default_rng(seed)
    out: dict[str, Callable[[], float]] = {}
    if scope in ("op", "all"):
        out.update(_op_checks(rng))
    if scope in ("layer", "all"):
        out.update(_layer_checks(rng))
    if scope in ("model", "all"):
        out.update(_model_checks(rng))
    if not out:
        raise ValueError(f"unknown gradcheck scope '{scope}'")
    return out


def run_checks(scope: str = "all", seed: int = 0, only: str | None = None,
               verbose: bool = True) -> dict[str, float]:
    """Execute checks; returns name -> max relative error."""
    results = {}
    for name, fn in suites(scope, seed).items():
        if only and only not in name:
            continue
        err = fn()
        results[name] = err
        if verbose:
            status = "ok" if err < TOLERANCE else "FAIL"
            print(f"{name:28s} {err:12.3e}  {status}")
    if only and not results:
        raise ValueError(f"no gradcheck target matching '{only}'")
    return results


def run(scope: str = "all", seed: int = 0, only: str | None = None,
        verbose: bool = True) -> int:
    """Execute checks; returns the number of checks above tolerance."""
    results = run_checks(scope, seed, only, verbose)
    return sum(1 for err in results.values() if not err < TOLERANCE)
