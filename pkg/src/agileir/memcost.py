"""Analytic training-memory model, plus an empirical cross-check.

The model counts, in closed form, the bytes a training step keeps alive:

* parameters, their gradients, and the two AdamW moment buffers
  (4x parameter bytes in total), batch-independent;
* activations retained for the backward pass, linear in batch size.

Retained activations are the tensors a reverse pass must still hold when
the forward pass finishes: inputs of matmuls/convs/norms/softmaxes, GELU
pre-activations, and materialized softmax outputs.  The two attention
flavors differ exactly here:

* the fused baseline materializes its (nW, heads, M^2, M^2) probability
  maps and keeps them for backward;
* the grouped cascade's attention op recomputes probabilities from the
  saved Q/K during backward, so its maps are transient scratch, never
  retained.  Together with the narrow Q/K projections and the shorter
  body, that is where the training-memory gap comes from.

Workspace buffers (im2col scratch, allocator slack) are deliberately out
of model; the empirical ``measure_peak`` bounds their effect.
"""

from __future__ import annotations

import gc
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelConfig, build, count_params
from .tensor import Tape, Tensor, meter
from .training import charbonnier

BYTES_PER_ELEM = 4
MOMENT_FACTOR = 2  # AdamW first+second moment buffers
REFERENCE_LINE = ("reference GPU training measurement: 2.23x "
                  "(67.52 GB -> 30.23 GB, batch 256)")


@dataclass
class MemRow:
    name: str
    param_elems: int
    act_elems: int  # per batch item


@dataclass
class MemReport:
    """Per-layer parameter/activation element counts for one config."""

    cfg: ModelConfig
    batch: int
    height: int
    width: int
    rows: list[MemRow] = field(default_factory=list)
    transient_attn_elems_per_layer: int = 0

    @property
    def param_elems(self) -> int:
        return sum(r.param_elems for r in self.rows)

    @property
    def act_elems_per_item(self) -> int:
        return sum(r.act_elems for r in self.rows)

    @property
    def param_state_bytes(self) -> int:
        # weights + gradients + two moments
        return self.param_elems * (2 + MOMENT_FACTOR) * BYTES_PER_ELEM

    @property
    def activation_bytes(self) -> int:
        return self.act_elems_per_item * self.batch * BYTES_PER_ELEM

    @property
    def total_bytes(self) -> int:
        return self.param_state_bytes + self.activation_bytes

    def lines(self, machine: bool = False) -> list[str]:
        out = []
        if machine:
            for r in self.rows:
                out.append(f"row={r.name} param_elems={r.param_elems} act_elems={r.act_elems}")
            out.append(f"param_state_bytes={self.param_state_bytes}")
            out.append(f"activation_bytes={self.activation_bytes}")
            out.append(f"total_bytes={self.total_bytes}")
            return out
        out.append(f"{'layer':<24}{'param elems':>14}{'act elems/item':>16}")
        for r in self.rows:
            out.append(f"{r.name:<24}{r.param_elems:>14}{r.act_elems:>16}")
        out.append(f"{'total':<24}{self.param_elems:>14}{self.act_elems_per_item:>16}")
        out.append(f"param+grad+moments: {_gb(self.param_state_bytes)}")
        out.append(f"activations (batch {self.batch}): {_gb(self.activation_bytes)}")
        out.append(f"total: {_gb(self.total_bytes)}")
        return out


def _gb(nbytes: float) -> str:
    return f"{nbytes / 2 ** 30:.2f} GB" if nbytes >= 2 ** 30 else f"{nbytes / 2 ** 20:.2f} MB"


def padded_side(n: int, m: int) -> int:
    return n + (m - n % m) % m


def _attention_layer_terms(cfg: ModelConfig, n_tok: int) -> dict[str, int]:
    """Retained activation elements of one attention layer, batch 1."""
    c = cfg.channels
    hidden = int(c * cfg.mlp_ratio)
    m2 = cfg.window * cfg.window
    probs = n_tok * cfg.groups * m2  # == nW * h * M^4
    terms = {
        "norm1_in": n_tok * c,
        "attn_in": n_tok * c,          # projection input (norm output / slices)
        "attn_v": n_tok * c,
        "proj_in": n_tok * c,
        "norm2_in": n_tok * c,
        "mlp_fc1_in": n_tok * c,
        "mlp_gelu_pre": n_tok * hidden,
        "mlp_fc2_in": n_tok * hidden,
    }
    if cfg.cascade:
        terms["attn_qk"] = 2 * n_tok * cfg.qk_dim * cfg.groups
        terms["attn_probs"] = 0  # recomputed in backward, never retained
    else:
        terms["attn_qk"] = 2 * n_tok * c
        terms["attn_probs"] = 2 * probs  # softmax input + retained output
    return terms


def attention_map_elems(cfg: ModelConfig, h: int, w: int) -> int:
    """Size of one layer's full attention maps (nW * groups * M^4 elements).

    Retained by the fused baseline; transient scratch for the cascade.
    """
    hp, wp = padded_side(h, cfg.window), padded_side(w, cfg.window)
    return hp * wp * cfg.groups * cfg.window * cfg.window


def activation_cost(cfg: ModelConfig, batch: int, height: int, width: int) -> MemReport:
    """Closed-form memory report for one config at one input size."""
    c = cfg.channels
    s = cfg.scale
    hp, wp = padded_side(height, cfg.window), padded_side(width, cfg.window)
    n_tok = hp * wp
    report = MemReport(cfg=cfg, batch=batch, height=height, width=width,
                       transient_attn_elems_per_layer=attention_map_elems(cfg, height, width))

    from .model import parameter_shapes
    psizes = {name: int(np.prod(shape)) for name, shape in parameter_shapes(cfg)}

    def params_under(prefix: str) -> int:
        return sum(v for k, v in psizes.items() if k.startswith(prefix))

    report.rows.append(MemRow("conv_first", params_under("conv_first"),
                              3 * height * width))
    layer_act = sum(_attention_layer_terms(cfg, n_tok).values())
    for b in range(cfg.num_blocks):
        for l in range(cfg.layers_per_block):
            report.rows.append(MemRow(f"block{b}.layer{l}",
                                      params_under(f"blocks.{b}.layers.{l}."),
                                      layer_act))
        report.rows.append(MemRow(f"block{b}.conv",
                                  params_under(f"blocks.{b}.conv."), n_tok * c))
    up_act = height * width * c if s != 4 else height * width * c * 5
    report.rows.append(MemRow("upsample", params_under("upsample."), up_act))
    report.rows.append(MemRow("conv_last", params_under("conv_last"),
                              s * s * height * width * c))
    report.rows.append(MemRow("loss", 0, 2 * s * s * height * width * 3))
    assert report.param_elems == count_params(cfg)
    return report


@dataclass
class CompareReport:
    report_a: MemReport
    report_b: MemReport

    @property
    def ratio(self) -> float:
        return self.report_a.total_bytes / self.report_b.total_bytes

    def lines(self, machine: bool = False) -> list[str]:
        a, b = self.report_a, self.report_b
        name_a = _cfg_name(a.cfg)
        name_b = _cfg_name(b.cfg)
        if machine:
            out = [f"config_a={name_a}", f"config_b={name_b}",
                   f"total_bytes_a={a.total_bytes}", f"total_bytes_b={b.total_bytes}",
                   f"ratio={self.ratio:.4f}"]
            out.extend(f"a.{l}" for l in a.lines(machine=True))
            out.extend(f"b.{l}" for l in b.lines(machine=True))
            return out
        layers_a = a.cfg.num_blocks * a.cfg.layers_per_block
        layers_b = b.cfg.num_blocks * b.cfg.layers_per_block
        ta = _attention_layer_terms(a.cfg, padded_side(a.height, a.cfg.window)
                                    * padded_side(a.width, a.cfg.window))
        tb = _attention_layer_terms(b.cfg, padded_side(b.height, b.cfg.window)
                                    * padded_side(b.width, b.cfg.window))

        def act_gb(terms, keys, layers, batch):
            return sum(terms[k] for k in keys) * layers * batch * BYTES_PER_ELEM

        probs_a = act_gb(ta, ["attn_probs"], layers_a, a.batch)
        probs_b = act_gb(tb, ["attn_probs"], layers_b, b.batch)
        qk_a = act_gb(ta, ["attn_qk"], layers_a, a.batch)
        qk_b = act_gb(tb, ["attn_qk"], layers_b, b.batch)
        out = [
            f"memory comparison at batch {a.batch}, {a.height}x{a.width} input",
            f"  {name_a}: {_gb(a.total_bytes)} "
            f"({layers_a} attention layers)",
            f"  {name_b}: {_gb(b.total_bytes)} "
            f"({layers_b} attention layers)",
            f"  ratio: {self.ratio:.2f}x",
            f"  {REFERENCE_LINE}",
            "savings breakdown (a - b):",
            f"  retained attention maps: {_gb(probs_a)} vs {_gb(probs_b)} "
            f"(delta {_gb(probs_a - probs_b)})",
            f"  q/k activations: {_gb(qk_a)} vs {_gb(qk_b)} "
            f"(delta {_gb(qk_a - qk_b)})",
            f"  attention layer count: {layers_a} vs {layers_b}",
            f"  parameter state: {_gb(a.param_state_bytes)} vs {_gb(b.param_state_bytes)} "
            f"(delta {_gb(a.param_state_bytes - b.param_state_bytes)})",
            f"  transient attention scratch per layer (not retained by the cascade): "
            f"{b.transient_attn_elems_per_layer * b.batch * BYTES_PER_ELEM / 2**20:.1f} MB",
        ]
        return out


def _cfg_name(cfg: ModelConfig) -> str:
    kind = "cascade" if cfg.cascade else "fused"
    return (f"{kind}[C={cfg.channels},blocks={cfg.num_blocks}x{cfg.layers_per_block},"
            f"h={cfg.groups},dk={cfg.qk_dim},M={cfg.window}]")


def compare(cfg_a: ModelConfig, cfg_b: ModelConfig, batch: int,
            height: int, width: int) -> CompareReport:
    """Total-training-memory comparison (ratio a/b) with a term breakdown."""
    return CompareReport(activation_cost(cfg_a, batch, height, width),
                         activation_cost(cfg_b, batch, height, width))


def measure_peak(cfg: ModelConfig, batch: int, height: int, width: int,
                 seed: int = 0) -> dict:
    """Run one forward+backward and report the engine's live-byte high water.

    Returns a dict with ``measured_bytes``, the matching analytic totals,
    and ``ok`` (False when the host ran out of memory mid-run).
    """
    analytic = activation_cost(cfg, batch, height, width)
    analytic_bytes = (analytic.param_elems + analytic.act_elems_per_item * batch) * BYTES_PER_ELEM
    result = {
        "analytic_activation_bytes": analytic.act_elems_per_item * batch * BYTES_PER_ELEM,
        "analytic_param_bytes": analytic.param_elems * BYTES_PER_ELEM,
        "analytic_bytes": analytic_bytes,
        "measured_bytes": None,
        "ok": False,
    }
    rng = np.random.default_rng(seed)
    gc.collect()
    meter.reset()
    meter.enabled = True
    try:
        model = build(cfg, seed=seed)
        lr = Tensor(rng.random((batch, 3, height, width), dtype=np.float32))
        hr = Tensor(rng.random((batch, 3, cfg.scale * height, cfg.scale * width),
                               dtype=np.float32))
        with Tape() as tape:
            loss = charbonnier(model(lr), hr)
            tape.backward(loss)
        result["measured_bytes"] = meter.peak_bytes
        result["ok"] = True
    except MemoryError:
        result["measured_bytes"] = meter.peak_bytes  # partial high-water
    finally:
        meter.enabled = False
        gc.collect()
    return result
