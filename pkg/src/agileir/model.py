"""The super-resolution network: shallow conv, attention body, pixel-shuffle head.

Layout of the forward pass::

    lr (B, 3, H, W)
      conv_first ----------------------------.
      [to (B, H, W, C), pad to window grid]  |
      residual attention blocks              | global residual
      [crop, back to (B, C, H, W)]           |
      (+) <----------------------------------'
      upsample (conv + pixel shuffle) , conv_last -> sr (B, 3, sH, sW)

Each block is an even run of window-attention layers alternating between
unshifted and shifted windows, closed by a 3x3 conv and a block residual.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from . import windowing
from .attention import FusedWindowAttention, GroupedWindowAttention
from .nn import Conv3x3, LayerNorm, Mlp, Module
from .tensor import Tensor

CKPT_MAGIC = b"AGLRCKP1"
CKPT_VERSION = 1

PRESETS = ("agileir", "agileir_plus", "swinir_light_ref")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    Attributes:
        channels: feature width C.
        num_blocks: residual attention blocks in the body.
        layers_per_block: attention layers per block (must be even so the
            shift pattern closes).
        groups: attention groups (or heads for the fused baseline).
        qk_dim: per-group query/key width.
        window: window side length M.
        mlp_ratio: feed-forward expansion factor.
        scale: upsampling factor (2, 3 or 4).
        cascade: grouped cascaded attention if True, fused baseline if False.
        qkv_bias: biases on the attention input projections.
    """

    channels: int = 60
    num_blocks: int = 3
    layers_per_block: int = 6
    groups: int = 4
    qk_dim: int = 4
    window: int = 12
    mlp_ratio: float = 2.0
    scale: int = 2
    cascade: bool = True
    qkv_bias: bool = False

    def __post_init__(self):
        if self.layers_per_block % 2 != 0:
            raise ValueError("layers_per_block must be even (shift pattern pairs layers)")
        if self.channels % self.groups != 0:
            raise ValueError(f"channels {self.channels} not divisible by groups {self.groups}")
        if self.scale not in (2, 3, 4):
            raise ValueError(f"unsupported scale {self.scale}")


def preset(name: str, scale: int = 2) -> ModelConfig:
    """Named configurations; "swinir_light_ref" is the fused-attention baseline."""
    if name == "agileir":
        return ModelConfig(scale=scale)
    if name == "agileir_plus":
        return ModelConfig(num_blocks=4, groups=6, qk_dim=3, scale=scale)
    if name == "swinir_light_ref":
        return ModelConfig(num_blocks=4, groups=6, qk_dim=10, window=8,
                           cascade=False, scale=scale)
    raise ValueError(f"unknown preset '{name}' (choose from {', '.join(PRESETS)})")


class TransformerLayer(Module):
    """Pre-norm window attention plus feed-forward, each with a residual.

    Args:
        cfg: model config.
        shift: spatial shift for this layer (0 or window // 2).
        rng: init generator.
    """

    def __init__(self, cfg: ModelConfig, shift: int, rng: np.random.Generator):
        c = cfg.channels
        self.shift = shift
        self.window = cfg.window
        self.norm1 = LayerNorm(c)
        if cfg.cascade:
            self.attn = GroupedWindowAttention(c, cfg.window, cfg.groups,
                                               cfg.qk_dim, rng, cfg.qkv_bias)
        else:
            self.attn = FusedWindowAttention(c, cfg.window, cfg.groups, rng,
                                             cfg.qkv_bias)
        self.norm2 = LayerNorm(c)
        self.mlp = Mlp(c, int(c * cfg.mlp_ratio), rng)

    def forward(self, x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        b, h, w, c = x.shape
        m = self.window
        t = T.norm_windows(x, self.norm1.gamma, self.norm1.beta, m, self.shift)
        t = self.attn(t, mask if self.shift else None, (h // m) * (w // m))
        x = T.window_merge_add(t, x, m, self.shift)
        return self.mlp(self.norm2(x), x)


class ResidualBlock(Module):
    """Even run of attention layers (shift 0, M/2, 0, ...) + conv + residual."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        half = cfg.window // 2
        self.layers = [TransformerLayer(cfg, 0 if i % 2 == 0 else half, rng)
                       for i in range(cfg.layers_per_block)]
        self.conv = Conv3x3(cfg.channels, cfg.channels, rng)

    def forward(self, x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        t = x
        for layer in self.layers:
            t = layer(t, mask)
        return T.add(x, self.conv(t))


class Upsampler(Module):
    """Pixel-shuffle reconstruction: one conv per x2/x3 stage."""

    def __init__(self, channels: int, scale: int, rng: np.random.Generator):
        self.scale = scale
        if scale == 4:
            self.convs = [Conv3x3(channels, channels * 4, rng),
                          Conv3x3(channels, channels * 4, rng)]
            self.steps = [2, 2]
        else:
            self.convs = [Conv3x3(channels, channels * scale * scale, rng)]
            self.steps = [scale]

    def forward(self, x: Tensor) -> Tensor:
        for conv, s in zip(self.convs, self.steps):
            x = T.conv3x3_shuffle(x, conv.weight, conv.bias, s)
        return x


class AgileIR(Module):
    """Full network.

    Args:
        cfg: architecture config.
        rng: generator used for every weight init (pass a seeded generator
            for reproducible builds).
    """

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.cfg = cfg
        self.conv_first = Conv3x3(3, cfg.channels, rng)
        self.blocks = [ResidualBlock(cfg, rng) for _ in range(cfg.num_blocks)]
        self.upsample = Upsampler(cfg.channels, cfg.scale, rng)
        self.conv_last = Conv3x3(cfg.channels, 3, rng, out_nchw=True)
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}

    def _mask_for(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._mask_cache:
            m = self.cfg.window
            self._mask_cache[key] = windowing.build_attn_mask(h, w, m, m // 2)
        return self._mask_cache[key]

    def forward(self, lr: Tensor) -> Tensor:
        """(B, 3, H, W) in [0, 1] -> (B, 3, scale*H, scale*W).

        Internally everything runs channels-last; only the public boundary
        is channels-first.
        """
        x = T.transpose(lr, (0, 2, 3, 1))
        shallow = self.conv_first(x)
        t, h0, w0 = windowing.pad_to_multiple(shallow, self.cfg.window)
        mask = self._mask_for(t.shape[1], t.shape[2])
        for block in self.blocks:
            t = block(t, mask)
        t = T.crop_hw(t, 0, h0, 0, w0)
        feat = T.add(shallow, t)
        return self.conv_last(self.upsample(feat))


# ---------------------------------------------------------------------------
# parameter bookkeeping
# ---------------------------------------------------------------------------

def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Enumerate (name, shape) for every parameter without building the net.

    Mirrors the constructor layout exactly; a test pins the two together.
    """
    c = cfg.channels
    gd = c // cfg.groups
    side = (2 * cfg.window - 1) ** 2
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def conv(prefix: str, cin: int, cout: int):
        shapes.append((f"{prefix}.weight", (cout, cin, 3, 3)))
        shapes.append((f"{prefix}.bias", (cout,)))

    def linear(prefix: str, din: int, dout: int, bias: bool):
        shapes.append((f"{prefix}.weight", (din, dout)))
        if bias:
            shapes.append((f"{prefix}.bias", (dout,)))

    conv("conv_first", 3, c)
    for b in range(cfg.num_blocks):
        for l in range(cfg.layers_per_block):
            p = f"blocks.{b}.layers.{l}"
            shapes.append((f"{p}.norm1.gamma", (c,)))
            shapes.append((f"{p}.norm1.beta", (c,)))
            if cfg.cascade:
                for g in range(cfg.groups):
                    linear(f"{p}.attn.to_q.{g}", gd, cfg.qk_dim, cfg.qkv_bias)
                for g in range(cfg.groups):
                    linear(f"{p}.attn.to_k.{g}", gd, cfg.qk_dim, cfg.qkv_bias)
                for g in range(cfg.groups):
                    linear(f"{p}.attn.to_v.{g}", gd, gd, cfg.qkv_bias)
            else:
                linear(f"{p}.attn.qkv", c, 3 * c, cfg.qkv_bias)
            linear(f"{p}.attn.proj", c, c, True)
            shapes.append((f"{p}.attn.bias_table", (side,)))
            shapes.append((f"{p}.norm2.gamma", (c,)))
            shapes.append((f"{p}.norm2.beta", (c,)))
            linear(f"{p}.mlp.fc1", c, int(c * cfg.mlp_ratio), True)
            linear(f"{p}.mlp.fc2", int(c * cfg.mlp_ratio), c, True)
        conv(f"blocks.{b}.conv", c, c)
    if cfg.scale == 4:
        conv("upsample.convs.0", c, 4 * c)
        conv("upsample.convs.1", c, 4 * c)
    else:
        conv("upsample.convs.0", c, c * cfg.scale * cfg.scale)
    conv("conv_last", c, 3)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Total trainable parameters for a config (closed-form enumeration)."""
    return sum(int(np.prod(s)) for _, s in parameter_shapes(cfg))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def state_dict(model: AgileIR) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def save_checkpoint(path: str, model: AgileIR):
    """Write config + parameters: fixed magic, JSON header, raw float32 LE."""
    buffers = [(name, p.data) for name, p in model.named_parameters()]
    header = {
        "version": CKPT_VERSION,
        "config": asdict(model.cfg),
        "buffers": [{"name": n, "shape": list(a.shape)} for n, a in buffers],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in buffers:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (config, name -> float32 array)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        if header["version"] != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        cfg = ModelConfig(**header["config"])
        state: dict[str, np.ndarray] = {}
        for entry in header["buffers"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            state[entry["name"]] = np.ascontiguousarray(data)
    return cfg, state


def load_state(model: AgileIR, state: dict[str, np.ndarray]):
    """Copy a full state dict into the model; any mismatch is an error."""
    own = dict(model.named_parameters())
    for name, p in own.items():
        if name not in state:
            raise ValueError(f"incompatible checkpoint: missing buffer '{name}'")
        if state[name].shape != p.data.shape:
            raise ValueError(
                f"incompatible checkpoint: buffer '{name}' has shape "
                f"{state[name].shape}, expected {p.data.shape}")
        p.data = state[name].astype(np.float32, copy=True)
    extra = set(state) - set(own)
    if extra:
        raise ValueError(f"incompatible checkpoint: unknown buffer '{sorted(extra)[0]}'")


def load_transfer(model: AgileIR, state: dict[str, np.ndarray]) -> list[str]:
    """Initialize from a checkpoint trained at another scale.

    Everything is copied except the ``upsample.*`` head, which keeps its
    fresh init (its shapes depend on the scale).  Returns the skipped names.
    Non-upsampler mismatches are still errors.
    """
    skipped = []
    for name, p in model.named_parameters():
        if name.startswith("upsample."):
            skipped.append(name)
            continue
        if name not in state:
            raise ValueError(f"incompatible checkpoint: missing buffer '{name}'")
        if state[name].shape != p.data.shape:
            raise ValueError(
                f"incompatible checkpoint: buffer '{name}' has shape "
                f"{state[name].shape}, expected {p.data.shape}")
        p.data = state[name].astype(np.float32, copy=True)
    return skipped


def build(cfg: ModelConfig, seed: int = 0) -> AgileIR:
    """Construct a model with a deterministic seeded init."""
    return AgileIR(cfg, np.random.default_rng(seed))
