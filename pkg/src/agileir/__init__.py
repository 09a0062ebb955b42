"""Lightweight windowed-attention image super-resolution, NumPy only.

The package bundles a small reverse-mode autodiff engine (`agileir.tensor`),
the grouped shifted-window attention model (`agileir.model`), training and
evaluation utilities, an analytic training-memory cost model, and a CLI
(``agileir --help``).
"""

from .model import (AgileIR, ModelConfig, PRESETS, build, count_params,
                    load_checkpoint, load_state, load_transfer,
                    parameter_shapes, preset, save_checkpoint)
from .attention import (FusedWindowAttention, GroupedWindowAttention,
                        fused_attention_params, grouped_attention_params)
from .training import AdamW, TrainConfig, charbonnier, lr_schedule, train
from .metrics import EvalReport, evaluate, psnr, rgb_to_y, ssim, upscale_image
from .data import PairedDataset, downscale, imread, imwrite, resize_bicubic
from .memcost import activation_cost, compare, measure_peak
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "AgileIR", "ModelConfig", "PRESETS", "build", "count_params",
    "load_checkpoint", "load_state", "load_transfer", "parameter_shapes",
    "preset", "save_checkpoint",
    "FusedWindowAttention", "GroupedWindowAttention",
    "fused_attention_params", "grouped_attention_params",
    "AdamW", "TrainConfig", "charbonnier", "lr_schedule", "train",
    "EvalReport", "evaluate", "psnr", "rgb_to_y", "ssim", "upscale_image",
    "PairedDataset", "downscale", "imread", "imwrite", "resize_bicubic",
    "activation_cost", "compare", "measure_peak",
    "Tape", "Tensor",
    "__version__",
]
