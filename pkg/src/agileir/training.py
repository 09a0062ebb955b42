"""Training loop: Charbonnier loss, AdamW with decoupled decay, step schedule."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import PairedDataset
from .model import AgileIR, load_checkpoint, load_transfer, save_checkpoint
from .tensor import Tape, Tensor


@dataclass
class TrainConfig:
    """Optimization hyper-parameters (desk-scale defaults).

    ``milestones`` default to 1/2, 3/4 and 7/8 of ``iters``; the learning
    rate halves at each.
    """

    iters: int = 2000
    batch: int = 4
    patch_lr: int = 48
    lr0: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.9
    eps: float = 1e-8
    weight_decay: float = 0.0
    charb_eps: float = 1e-3
    grad_clip: float = 0.0
    seed: int = 0
    eval_every: int = 0
    milestones: Optional[tuple[int, ...]] = None

    def resolved_milestones(self) -> tuple[int, ...]:
        if self.milestones is not None:
            return self.milestones
        return (self.iters // 2, self.iters * 3 // 4, self.iters * 7 // 8)


def charbonnier(pred: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    """mean(sqrt((pred - target)^2 + eps^2)); smooth at zero."""
    return T.charbonnier_loss(pred, target, eps)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Piecewise-constant: lr0 halved at each milestone passed."""
    lr = cfg.lr0
    for m in cfg.resolved_milestones():
        if step >= m:
            lr *= 0.5
    return lr


class AdamW:
    """AdamW with decoupled weight decay.

    The decay multiplies weights by (1 - lr*wd) independently of the moment
    update, so decay and gradient adaptation do not interact.

    Args:
        named_params: (name, tensor) pairs; names appear in error messages.
        cfg: hyper-parameters (betas, eps, weight decay).
    """

    def __init__(self, named_params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, lr: float):
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p, m, v in zip(self.names, self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
            if cfg.weight_decay:
                p.data *= 1.0 - lr * cfg.weight_decay
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * np.square(g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def train_step(model: AgileIR, opt: AdamW, lr_batch: np.ndarray,
               hr_batch: np.ndarray, lr: float, charb_eps: float,
               grad_clip: float = 0.0) -> float:
    """One forward/backward/update; returns the batch loss."""
    model.zero_grad()
    with Tape() as tape:
        pred = model(Tensor(lr_batch))
        loss = charbonnier(pred, Tensor(hr_batch), charb_eps)
        tape.backward(loss)
    if grad_clip > 0:
        clip_gradients(opt.params, grad_clip)
    opt.step(lr)
    return loss.item()


def train(model: AgileIR, dataset: PairedDataset, cfg: TrainConfig,
          log_path: Optional[str] = None,
          ckpt_path: Optional[str] = None,
          init_ckpt: Optional[str] = None,
          eval_fn: Optional[Callable[[AgileIR], float]] = None,
          header: Optional[list[str]] = None,
          emit: Optional[Callable[[str], None]] = None) -> list[float]:
    """Run the loop; returns the per-iteration loss trajectory.

    ``init_ckpt`` loads weights trained at another scale, keeping the fresh
    upsampler (the x2 -> x4 warm start).  ``eval_fn`` is called every
    ``cfg.eval_every`` steps and its PSNR lands in the log.  The metrics log
    has one record per line: ``step lr loss [psnr]``; ``emit`` sees each line
    as it is produced (the CLI tees it to stdout and the log file).
    """
    lines: list[str] = list(header) if header else []
    lines.append(f"# iters={cfg.iters} batch={cfg.batch} patch_lr={cfg.patch_lr} "
                 f"scale={dataset.scale} seed={cfg.seed}")
    if init_ckpt:
        _, state = load_checkpoint(init_ckpt)
        skipped = load_transfer(model, state)
        lines.append(f"# init from {os.path.basename(init_ckpt)}, "
                     f"reinitialized {len(skipped)} upsampler buffers")
    if emit:
        for line in lines:
            emit(line)

    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(list(model.named_parameters()), cfg)
    losses: list[float] = []
    for step in range(cfg.iters):
        lr_now = lr_schedule(step, cfg)
        lr_b, hr_b = dataset.sample_batch(rng, cfg.patch_lr, cfg.batch)
        loss = train_step(model, opt, lr_b, hr_b, lr_now, cfg.charb_eps, cfg.grad_clip)
        losses.append(loss)
        record = f"{step + 1} {lr_now:.8e} {loss:.8e}"
        if eval_fn is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            record += f" {eval_fn(model):.4f}"
        lines.append(record)
        if emit:
            emit(record)

    if log_path:
        with open(log_path, "w") as f:
            f.write("\n".join(lines) + "\n")
    if ckpt_path:
        save_checkpoint(ckpt_path, model)
    return losses
