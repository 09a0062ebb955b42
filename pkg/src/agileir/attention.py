"""Window attention layers: the cascaded grouped form and a fused baseline."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from . import windowing
from .nn import Linear, Module
from .tensor import Tensor


class GroupedWindowAttention(Module):
    """Cascaded group attention over window tokens.

    The channel axis is split into ``groups`` slices of width C/groups.
    Group i runs standard single-head attention on its slice, but with two
    twists:

    * its Q/K projections map down to a small ``qk_dim`` (the value path
      keeps the full slice width), and
    * from the second group on, the previous group's output is added to the
      incoming slice before projection, so later groups refine an
      accumulated signal rather than seeing raw channels.

    Outputs are concatenated back to C channels and mixed by a final
    projection.  A single (2M-1)^2 relative-position bias table is shared
    by all groups; shifted layers additionally receive the window mask.

    Args:
        dim: total channel width C.
        window: window side length M.
        groups: number of channel groups.
        qk_dim: per-group query/key width.
        rng: init generator.
        qkv_bias: add biases to the per-group projections (off by default;
            only the output projection carries a bias).
    """

    def __init__(self, dim: int, window: int, groups: int, qk_dim: int,
                 rng: np.random.Generator, qkv_bias: bool = False):
        if dim % groups != 0:
            raise ValueError(f"dim {dim} not divisible by groups {groups}")
        self.dim = dim
        self.window = window
        self.groups = groups
        self.qk_dim = qk_dim
        self.group_dim = dim // groups
        self.att_scale = qk_dim ** -0.5
        self.to_q = [Linear(self.group_dim, qk_dim, rng, bias=qkv_bias) for _ in range(groups)]
        self.to_k = [Linear(self.group_dim, qk_dim, rng, bias=qkv_bias) for _ in range(groups)]
        self.to_v = [Linear(self.group_dim, self.group_dim, rng, bias=qkv_bias) for _ in range(groups)]
        self.proj = Linear(dim, dim, rng, bias=True)
        side = 2 * window - 1
        self.bias_table = Tensor(np.zeros(side * side, dtype=np.float32), requires_grad=True)
        self.rel_index = windowing.build_rel_index(window)

    def forward(self, x: Tensor, mask: Optional[np.ndarray], num_win: int) -> Tensor:
        """Attend within windows.

        Args:
            x: (B*nW, M*M, C) window tokens.
            mask: optional (nW, M*M, M*M) additive mask for shifted layers.
            num_win: windows per image (nW), for mask broadcasting.
        """
        bias = T.bias_gather(self.bias_table, self.rel_index)
        gd = self.group_dim
        prev = None
        outs = []
        for i in range(self.groups):
            if prev is None:
                u = T.narrow_last(x, 0, gd)
            else:
                u = T.slice_add(x, prev, i * gd, (i + 1) * gd)
            q = self.to_q[i](u)
            k = self.to_k[i](u)
            v = self.to_v[i](u)
            out = T.attend(q, k, v, bias, mask, num_win, self.att_scale)
            outs.append(out)
            prev = out
        return T.concat_matmul_bias(outs, self.proj.weight, self.proj.bias)


class FusedWindowAttention(Module):
    """Standard multi-head window attention (the memory baseline).

    One fused C -> 3C projection produces Q, K, V at full width; heads are
    views of width C/heads and every head's probability map is materialized
    and retained for backward (the usual eager formulation).

    Args:
        dim: channel width C.
        window: window side length M.
        heads: number of attention heads.
        rng: init generator.
        qkv_bias: add a bias to the fused projection.
    """

    def __init__(self, dim: int, window: int, heads: int,
                 rng: np.random.Generator, qkv_bias: bool = False):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.window = window
        self.heads = heads
        self.head_dim = dim // heads
        self.att_scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng, bias=qkv_bias)
        self.proj = Linear(dim, dim, rng, bias=True)
        side = 2 * window - 1
        self.bias_table = Tensor(np.zeros(side * side, dtype=np.float32), requires_grad=True)
        self.rel_index = windowing.build_rel_index(window)

    def forward(self, x: Tensor, mask: Optional[np.ndarray], num_win: int) -> Tensor:
        b_, n, c = x.shape
        h = self.heads
        qkv = self.qkv(x)  # (b_, n, 3c)
        qkv = T.reshape(qkv, (b_, n, 3, h, self.head_dim))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, b_, h, n, hd)
        q = T.scale(T.index_first(qkv, 0), self.att_scale)
        k = T.index_first(qkv, 1)
        v = T.index_first(qkv, 2)

        logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        bias = T.bias_gather(self.bias_table, self.rel_index)
        probs = T.softmax_bias(logits, bias, mask, num_win)
        out = T.matmul(probs, v)  # (b_, h, n, hd)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b_, n, c))
        return self.proj(out)


def grouped_attention_params(dim: int, groups: int, qk_dim: int, window: int,
                             qkv_bias: bool = False) -> int:
    """Closed-form parameter count of one :class:`GroupedWindowAttention`.

    Per group: two (C/h, d_k) Q/K maps and one (C/h, C/h) value map; plus
    the (C, C) output projection with bias and the (2M-1)^2 bias table.
    """
    gd = dim // groups
    per_group = 2 * gd * qk_dim + gd * gd
    if qkv_bias:
        per_group += 2 * qk_dim + gd
    return groups * per_group + dim * dim + dim + (2 * window - 1) ** 2


def fused_attention_params(dim: int, window: int, qkv_bias: bool = False) -> int:
    """Closed-form parameter count of one :class:`FusedWindowAttention`."""
    total = 3 * dim * dim + dim * dim + dim + (2 * window - 1) ** 2
    if qkv_bias:
        total += 3 * dim
    return total
