"""Y-channel PSNR / SSIM and dataset evaluation."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .model import AgileIR
from .tensor import Tensor


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing luma of an (H, W, 3) image in [0, 1].

    Output lives in [16/255, 235/255] (black maps to 16/255, white to
    235/255), matching the convention benchmark PSNR tables use.
    """
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0


def psnr(a: np.ndarray, b: np.ndarray, border: int = 0) -> float:
    """10*log10(1/MSE) on [0, 1] images; identical inputs give +inf."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if border:
        a = a[border:-border, border:-border]
        b = b[border:-border, border:-border]
    mse = float(np.mean(np.square(a.astype(np.float64) - b.astype(np.float64))))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering with a 1-D kernel along both axes."""
    t = k.size
    win = np.lib.stride_tricks.sliding_window_view(img, t, axis=0)
    img = win @ k
    win = np.lib.stride_tricks.sliding_window_view(img, t, axis=1)
    return win @ k


def ssim(a: np.ndarray, b: np.ndarray, border: int = 0) -> float:
    """Single-scale SSIM, 11x11 Gaussian sigma 1.5, range 1.0, valid positions."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if border:
        a = a[border:-border, border:-border]
        b = b[border:-border, border:-border]
    if min(a.shape) < 11:
        raise ValueError(f"image {a.shape} smaller than the 11x11 SSIM window")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    k = _gaussian_kernel()
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a * mu_a
    var_b = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    """Per-image and mean metrics for one dataset."""

    dataset: str
    scale: int
    border: int
    names: list[str] = field(default_factory=list)
    psnrs: list[float] = field(default_factory=list)
    ssims: list[float] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return sum(self.psnrs) / len(self.psnrs) if self.psnrs else math.nan

    @property
    def mean_ssim(self) -> float:
        return sum(self.ssims) / len(self.ssims) if self.ssims else math.nan

    def lines(self) -> list[str]:
        out = [f"# dataset={self.dataset} scale={self.scale} border={self.border}"]
        for n, p, s in zip(self.names, self.psnrs, self.ssims):
            out.append(f"{n} {_fmt_db(p)} {s:.6f}")
        for msg in self.failures:
            out.append(f"# failed: {msg}")
        out.append(f"mean {_fmt_db(self.mean_psnr)} {self.mean_ssim:.6f}")
        return out

    def write(self, path: str):
        with open(path, "w") as f:
            f.write("\n".join(self.lines()) + "\n")


def _fmt_db(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def upscale_image(model: AgileIR, lr_img: np.ndarray) -> np.ndarray:
    """Run the network on one (H, W, 3) image in [0, 1]; output clipped."""
    x = Tensor(np.ascontiguousarray(lr_img.transpose(2, 0, 1))[None].astype(np.float32))
    y = model(x).numpy()[0].transpose(1, 2, 0)
    return np.clip(y, 0.0, 1.0)


def evaluate(model: AgileIR | None, dataset_dir: str, scale: int,
             report_path: str | None = None) -> EvalReport:
    """Score a directory of HR PNGs.

    LR inputs are read from an ``LR`` subdirectory when one exists
    (matching filenames), otherwise synthesized by bicubic downsampling.
    Both output and ground truth are converted to the Y channel and cropped
    by ``scale`` pixels per side before PSNR/SSIM.  Files are processed in
    sorted order; decode failures are recorded and skipped.

    ``model=None`` scores ground truth against itself (PSNR inf, SSIM 1.0),
    a quick sanity check of the metric stack.
    """
    names = sorted(f for f in os.listdir(dataset_dir)
                   if f.lower().endswith(".png"))
    if not names:
        raise ValueError(f"no PNG images in {dataset_dir}")
    lr_dir = os.path.join(dataset_dir, "LR")
    report = EvalReport(dataset=os.path.basename(os.path.normpath(dataset_dir)),
                        scale=scale, border=scale)
    for name in names:
        try:
            hr = D.imread(os.path.join(dataset_dir, name))
        except Exception as e:  # decode failure: report, keep going
            report.failures.append(f"{name}: {e}")
            continue
        h, w = hr.shape[:2]
        hr = hr[: h - h % scale, : w - w % scale]
        if model is None:
            sr = hr
        else:
            lr_path = os.path.join(lr_dir, name)
            if os.path.isfile(lr_path):
                lr = D.imread(lr_path)
            else:
                lr = D.downscale(hr, scale)
            sr = upscale_image(model, lr)
        y_sr = rgb_to_y(sr)
        y_hr = rgb_to_y(hr)
        report.names.append(name)
        report.psnrs.append(psnr(y_sr, y_hr, border=scale))
        report.ssims.append(ssim(y_sr, y_hr, border=scale))
    if report_path:
        report.write(report_path)
    return report
