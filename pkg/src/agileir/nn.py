"""Small layer library on top of the tape engine."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples truncated to +-2 std (resampled, not clipped)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


class Module:
    """Base class: child modules and parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if prefix else name
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Convert all parameters in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map over the last axis.

    Args:
        in_dim: input width.
        out_dim: output width.
        bias: include an additive bias.
        rng: generator for the truncated-normal weight init.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True):
        self.weight = Tensor(trunc_normal(rng, (in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        shape = x.shape
        if len(shape) > 2:
            x = T.reshape(x, (-1, shape[-1]))
        if self.bias is not None:
            out = T.matmul_bias(x, self.weight, self.bias)
        else:
            out = T.matmul(x, self.weight)
        if len(shape) > 2:
            out = T.reshape(out, shape[:-1] + (self.weight.shape[1],))
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv3x3(Module):
    """3x3 same conv on (B, H, W, C) with zero padding.

    ``out_nchw`` makes the op emit (B, C_out, H, W) directly, for the
    channels-first output boundary.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 bias: bool = True, out_nchw: bool = False):
        self.weight = Tensor(trunc_normal(rng, (out_ch, in_ch, 3, 3)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True) if bias else None
        self.out_nchw = out_nchw

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3x3(x, self.weight, self.bias, self.out_nchw)


class Mlp(Module):
    """Two linears with a GELU in between (the transformer feed-forward).

    When a residual tensor is passed, the second projection and the add are
    one fused op, so the pre-residual activation is never retained.
    """

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor, res: Optional[Tensor] = None) -> Tensor:
        t = T.gelu(self.fc1(x))
        if res is None:
            return self.fc2(t)
        shape = res.shape
        t = T.reshape(t, (-1, t.shape[-1]))
        out = T.matmul_bias_add(t, self.fc2.weight, self.fc2.bias,
                                T.reshape(res, (-1, shape[-1])))
        return T.reshape(out, shape)
