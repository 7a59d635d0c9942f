"""Luma PSNR/SSIM and the evaluation driver.

Metric functions accept either 3-channel RGB tensors in [0, 1], converted to
BT.601 studio-swing luma, or 1-channel tensors already on the 0-255 luma
scale.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from .model import SpanModel, span_forward
from .resample import bicubic_upscale
from .tensor import ShapeError, as_tensor4

log = logging.getLogger(__name__)

Y_WEIGHTS = (65.481, 128.553, 24.966)
Y_OFFSET = 16.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2


def rgb_to_y(img) -> np.ndarray:
    img = as_tensor4(img)
    if img.shape[1] != 3:
        raise ShapeError(f"rgb_to_y needs 3 channels, got {img.shape[1]}")
    x = img.astype(np.float64)
    r, g, b = Y_WEIGHTS
    return (r * x[:, 0:1] + g * x[:, 1:2] + b * x[:, 2:3]) + Y_OFFSET


def _luma(img) -> np.ndarray:
    img = as_tensor4(img)
    if img.shape[1] == 3:
        return rgb_to_y(img)
    if img.shape[1] == 1:
        return img.astype(np.float64)
    raise ShapeError(f"metrics need 1 or 3 channels, got {img.shape[1]}")


def _crop_pair(a, b, border: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_tensor4(a), as_tensor4(b)
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    h, w = a.shape[2:]
    if border < 0 or 2 * border >= min(h, w):
        raise ShapeError(f"border {border} too large for {h}x{w}")
    ya, yb = _luma(a), _luma(b)
    if border:
        ya = ya[:, :, border:-border, border:-border]
        yb = yb[:, :, border:-border, border:-border]
    return ya, yb


def psnr(a, b, border: int = 0) -> float:
    """PSNR in dB with peak 255; ``inf`` for identical inputs."""
    ya, yb = _crop_pair(a, b, border)
    mse = float(np.mean(np.square(ya - yb)))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=-2)
    x = np.einsum("...hwk,k->...hw", rows, g)
    cols = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1)
    return np.einsum("...hwk,k->...hw", cols, g)


def ssim_map(ya: np.ndarray, yb: np.ndarray) -> np.ndarray:
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(ya, g), _filter_valid(yb, g)
    var_a = _filter_valid(ya * ya, g) - mu_a * mu_a
    var_b = _filter_valid(yb * yb, g) - mu_b * mu_b
    cov = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b, border: int = 0) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows of the luma channel."""
    ya, yb = _crop_pair(a, b, border)
    if min(ya.shape[2:]) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} after cropping, "
                         f"got {ya.shape[2:]}")
    return float(np.mean(ssim_map(ya, yb)))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class ImageScore:
    image: str
    psnr_db: float
    ssim: float
    bicubic_psnr_db: float
    bicubic_ssim: float
    ms: float


@dataclass
class EvalReport:
    rows: list[ImageScore] = field(default_factory=list)
    border: int = 0
    skipped: list[str] = field(default_factory=list)

    def _mean(self, attr: str) -> float:
        if not self.rows:
            return math.nan
        return float(np.mean([getattr(r, attr) for r in self.rows]))

    @property
    def mean_psnr(self) -> float:
        return self._mean("psnr_db")

    @property
    def mean_ssim(self) -> float:
        return self._mean("ssim")

    @property
    def mean_bicubic_psnr(self) -> float:
        return self._mean("bicubic_psnr_db")

    @property
    def mean_bicubic_ssim(self) -> float:
        return self._mean("bicubic_ssim")

    @property
    def mean_ms(self) -> float:
        return self._mean("ms")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "psnr_db", "ssim", "bicubic_psnr_db", "bicubic_ssim", "ms"])
            for r in self.rows:
                w.writerow([r.image, _fmt(r.psnr_db), _fmt(r.ssim), _fmt(r.bicubic_psnr_db),
                            _fmt(r.bicubic_ssim), f"{r.ms:.3f}"])
            w.writerow(["mean", _fmt(self.mean_psnr), _fmt(self.mean_ssim),
                        _fmt(self.mean_bicubic_psnr), _fmt(self.mean_bicubic_ssim),
                        f"{self.mean_ms:.3f}"])

    def to_json(self) -> str:
        return json.dumps({
            "border": self.border,
            "images": [asdict(r) for r in self.rows],
            "mean": {"psnr_db": self.mean_psnr, "ssim": self.mean_ssim,
                     "bicubic_psnr_db": self.mean_bicubic_psnr,
                     "bicubic_ssim": self.mean_bicubic_ssim, "ms": self.mean_ms},
            "skipped": self.skipped,
        }, indent=2)


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else repr(float(v))


def evaluate(model: SpanModel | Callable[[np.ndarray], np.ndarray],
             pairs: Iterable[tuple[str, np.ndarray, np.ndarray]], r: int,
             border: int | None = None) -> EvalReport:
    """Score whole-image super-resolution of (name, LR, HR) pairs.

    ``model`` is a :class:`SpanModel` or any callable mapping an LR tensor
    to an HR tensor. Outputs are clamped to [0, 1] before scoring; the
    border defaults to ``r`` pixels per side.
    """
    if isinstance(model, SpanModel):
        if model.config.scale != r:
            raise ValueError(f"model scale {model.config.scale} != evaluation scale {r}")
        net = model
        model = lambda x: span_forward(x, net)[0]  # noqa: E731
    border = r if border is None else border
    report = EvalReport(border=border)
    for name, lr, hr in pairs:
        lr, hr = as_tensor4(lr), as_tensor4(hr)
        if (lr.shape[2] * r, lr.shape[3] * r) != hr.shape[2:]:
            log.warning("skipping %s: LR %s x%d does not match HR %s", name, lr.shape[2:], r,
                        hr.shape[2:])
            report.skipped.append(name)
            continue
        t0 = time.perf_counter()
        sr = np.clip(model(lr), 0.0, 1.0)
        ms = (time.perf_counter() - t0) * 1000.0
        base = np.clip(bicubic_upscale(lr, r), 0.0, 1.0)
        report.rows.append(ImageScore(
            name, psnr(sr, hr, border), ssim(sr, hr, border),
            psnr(base, hr, border), ssim(base, hr, border), ms))
    return report

