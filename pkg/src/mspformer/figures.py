# figures.py

import logging

import numpy as np
from matplotlib.figure import Figure

from .analysis import psnr
from .tensor import Tensor

logger = logging.getLogger(__name__)


def _to_hwc(image):
    data = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if data.ndim == 4:
        data = data[0]
    return np.clip(data.transpose(1, 2, 0), 0.0, 1.0)


def plot_loss_curve(log, path, width=6, height=4, dpi=100):
    """``log`` is the DataFrame returned by ``train.read_metrics_log``."""
    fig = Figure(figsize=(width, height), dpi=dpi)
    axes = fig.add_subplot(111)
    axes.plot(log["epoch"], log["loss"], color="#C61618", linewidth=1.5)
    axes.set_yscale("log")
    axes.set_xlabel("epoch")
    axes.set_ylabel("Charbonnier loss")
    axes.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    logger.info("figure=%s", path)


def plot_comparison(snowy, restored, clean, path, dpi=100):
    """Snowy input, restored output and ground truth side by side, titled with PSNR."""
    panels = [
        ("snowy", _to_hwc(snowy)),
        ("restored", _to_hwc(restored)),
        ("ground truth", _to_hwc(clean)),
    ]
    gt = panels[2][1]
    fig = Figure(figsize=(3 * len(panels), 3.2), dpi=dpi)
    for i, (title, image) in enumerate(panels, start=1):
        axes = fig.add_subplot(1, len(panels), i)
        axes.imshow(image, interpolation="nearest")
        if title != "ground truth":
            title = f"{title} ({psnr(image, gt):.2f} dB)"
        axes.set_title(title, fontsize=9)
        axes.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    logger.info("figure=%s", path)
