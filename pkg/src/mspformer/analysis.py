# analysis.py

"""Reconstruction loss, image quality metrics and dataset evaluation."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter

from .errors import ContractError, InputError, ShapeError
from .model import restore
from .tensor import Tensor, _result

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11 x 11 window
SSIM_K1, SSIM_K2 = 0.01, 0.03

EVAL_COLUMNS = ["name", "psnr", "ssim", "baseline_psnr", "baseline_ssim"]


def charbonnier(pred, gt, eps=1e-3):
    """Mean over elements of sqrt(r^2 + eps^2) for r = pred - gt.

    Evaluated in float64 as eps + mean(r^2 / (sqrt(r^2 + eps^2) + eps)) so that a
    zero residual gives exactly eps; a 32-bit result holds eps rounded to float32.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"charbonnier shapes differ: {list(pred.shape)} vs {list(gt.shape)}")
    if not eps > 0:
        raise ContractError("charbonnier eps must be positive")
    r = pred.data.astype(np.float64) - gt.data.astype(np.float64)
    smooth = np.sqrt(r * r + eps * eps)
    count = r.size
    value = np.sum(r * r / (smooth + eps)) / count + eps

    def grad_fn(g):
        d = (g.reshape(()) * r / smooth / count).astype(pred.data.dtype)
        return d, -d

    return _result("charbonnier", np.asarray([value]), (pred, gt), grad_fn)


def _as_array(image):
    data = image.data if isinstance(image, Tensor) else image
    return np.asarray(data, dtype=np.float64)


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 100."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {list(a.shape)} vs {list(b.shape)}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def ssim(a, b):
    """Mean structural similarity over channels with an 11x11 Gaussian window (sigma 1.5).

    Images are [..., H, W] in [0, 1]; the mean is taken over window centres
    that do not touch the border when the image is large enough.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {list(a.shape)} vs {list(b.shape)}")
    h, w = a.shape[-2:]
    a = a.reshape(-1, h, w)
    b = b.reshape(-1, h, w)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    truncate = SSIM_RADIUS / SSIM_SIGMA

    def blur(x):
        return gaussian_filter(x, sigma=(0, SSIM_SIGMA, SSIM_SIGMA), mode="reflect", truncate=truncate)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    ssim_map = numerator / denominator
    if h > 2 * SSIM_RADIUS and w > 2 * SSIM_RADIUS:
        ssim_map = ssim_map[:, SSIM_RADIUS:h - SSIM_RADIUS, SSIM_RADIUS:w - SSIM_RADIUS]
    return float(ssim_map.mean(axis=(1, 2)).mean())


@dataclass
class EvalResult:
    table: pd.DataFrame
    skipped: int = 0

    @property
    def mean_psnr(self):
        return float(self.table["psnr"].mean())

    @property
    def mean_ssim(self):
        return float(self.table["ssim"].mean())

    @property
    def baseline_psnr(self):
        return float(self.table["baseline_psnr"].mean())

    @property
    def baseline_ssim(self):
        return float(self.table["baseline_ssim"].mean())


def score_pair(model, name, snowy, clean):
    """Metrics of the restored image and of the snowy input, both against ``clean``."""
    restored = np.clip(restore(model, snowy).data, 0.0, 1.0)
    snowy = snowy.data
    return {
        "name": name,
        "psnr": psnr(restored, clean),
        "ssim": ssim(restored, clean),
        "baseline_psnr": psnr(snowy, clean),
        "baseline_ssim": ssim(snowy, clean),
    }


def evaluate(model, dataset, workers=1):
    """Scores every readable pair of ``dataset`` in manifest order.

    Args:
        model: a built MSPFormer.
        dataset: a SnowDataset (pairs already loaded, unreadable ones counted in ``skipped``).
        workers: threads used to score images; row order never depends on it.
    """
    if len(dataset) == 0:
        raise InputError("evaluation dataset is empty")

    def run(index):
        name, snowy, clean = dataset.pair(index)
        return score_pair(model, name, Tensor(snowy[None]), clean[None])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, range(len(dataset))))
    else:
        rows = [run(i) for i in range(len(dataset))]

    result = EvalResult(pd.DataFrame(rows, columns=EVAL_COLUMNS), getattr(dataset, "skipped", 0))
    logger.info("eval images=%d skipped=%d psnr=%.4f ssim=%.4f baseline_psnr=%.4f baseline_ssim=%.4f",
                len(rows), result.skipped, result.mean_psnr, result.mean_ssim,
                result.baseline_psnr, result.baseline_ssim)
    return result


def write_report(result: EvalResult, path):
    """UTF-8 TSV with one row per image."""
    result.table.to_csv(path, sep="\t", index=False, float_format="%.6f", encoding="utf-8")
