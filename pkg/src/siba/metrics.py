"""Benign accuracy, attack success rate, SSIM, a pluggable perceptual distance and report rows."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .core import InvalidInputError, LabeledImageSet
from .models import Classifier

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
NOT_AVAILABLE = "n/a"


def benign_accuracy(model: Classifier, clean_test: LabeledImageSet) -> float:
    if len(clean_test) == 0:
        raise InvalidInputError("empty test set")
    return float(np.mean(model.predict(clean_test.images) == clean_test.labels))


def attack_success_rate(model: Classifier, poisoned_test: LabeledImageSet) -> float:
    """Fraction of triggered samples predicted as their rule-mapped label.

    ``poisoned_test`` comes from ``poison_test_set``, so its labels already hold
    the attack targets and target-class samples are excluded under all-to-one.
    """
    if len(poisoned_test) == 0:
        raise InvalidInputError("empty poisoned test set")
    return float(np.mean(model.predict(poisoned_test.images) == poisoned_test.labels))


def _gaussian_band(n: int, window: int, sigma: float) -> np.ndarray:
    """(n - w + 1, n) matrix applying a normalized 1-D Gaussian in valid mode.

    Dimensions shorter than ``window`` get the centre ``n`` taps of the kernel,
    renormalized, i.e. a single window cropped to the image.
    """
    w = min(window, n)
    offsets = np.arange(window) - (window - 1) / 2
    kernel = np.exp(-(offsets ** 2) / (2 * sigma ** 2))
    start = (window - w) // 2
    kernel = kernel[start:start + w]
    kernel /= kernel.sum()
    band = np.zeros((n - w + 1, n))
    for i in range(n - w + 1):
        band[i, i:i + w] = kernel
    return band


def ssim(image_a, image_b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Gaussian-window SSIM on [0, 1] images, averaged over positions and channels."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    rows = _gaussian_band(a.shape[0], window, sigma)
    cols = _gaussian_band(a.shape[1], window, sigma)

    def filt(x):
        return np.einsum("ih,hwc,jw->ijc", rows, x, cols)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def mean_ssim(images_a, images_b) -> float:
    images_a, images_b = np.asarray(images_a), np.asarray(images_b)
    if images_a.shape != images_b.shape or len(images_a) == 0:
        raise InvalidInputError("need two non-empty batches of equal shape")
    return float(np.mean([ssim(a, b) for a, b in zip(images_a, images_b)]))


# Perceptual distance is a plug-in boundary: the toolkit ships no scorer.
_perceptual_scorer: Callable | None = None


def register_perceptual_scorer(scorer: Callable | None) -> None:
    """Install ``scorer(image_a, image_b) -> float >= 0``; it must return 0 on identical images."""
    global _perceptual_scorer
    _perceptual_scorer = scorer


def perceptual_distance(image_a, image_b, scorer: Callable | None = None) -> float | None:
    """Delegate to ``scorer`` or the registered one; ``None`` when nothing is registered."""
    scorer = scorer or _perceptual_scorer
    if scorer is None:
        return None
    value = float(scorer(image_a, image_b))
    if value < 0 or math.isnan(value):
        raise ValueError(f"perceptual scorer returned {value}")
    return value


def mean_perceptual_distance(images_a, images_b, scorer: Callable | None = None) -> float | None:
    if (scorer or _perceptual_scorer) is None:
        return None
    return float(np.mean([perceptual_distance(a, b, scorer) for a, b in zip(images_a, images_b)]))


@dataclass
class MetricsRow:
    experiment_id: str
    attack: str
    model: str
    BA: float
    ASR: float
    L0: int | None = None
    Linf: float | None = None
    SSIM: float | None = None
    LPIPS: float | None = None

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def formatted(self) -> dict:
        out = {}
        for key, value in asdict(self).items():
            if value is None:
                out[key] = NOT_AVAILABLE
            elif isinstance(value, float):
                out[key] = f"{value:.6g}"
            else:
                out[key] = value
        return out


def write_metrics_csv(rows, path, append: bool = False) -> Path:
    path = Path(path)
    new_file = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MetricsRow.columns())
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow(row.formatted())
    return path


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
