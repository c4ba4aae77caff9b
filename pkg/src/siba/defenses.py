"""Backdoor defenses used to stress a trained victim: STRIP, Scale-Up, Fine-Pruning, Neural Cleanse."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import xlogy
from scipy.stats import rankdata

from .core import InvalidInputError, LabeledImageSet, clip_to_valid_range
from .metrics import attack_success_rate, benign_accuracy
from .models import Classifier, to_nchw

log = logging.getLogger(__name__)

DEFAULT_SCALES = (2.0, 3.0, 4.0, 5.0, 6.0)
MAD_CONSISTENCY = 1.4826
NC_THRESHOLD = 2.0


@dataclass
class DetectionReport:
    tpr: float
    fpr: float
    auroc: float
    post_defense_asr: float | None
    threshold: float
    scores_poisoned: list[float] = field(repr=False)
    scores_benign: list[float] = field(repr=False)

    def __post_init__(self):
        for name in ("tpr", "fpr", "auroc"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} = {value} outside [0, 1]")

    def write_csv(self, path, defense: str = "") -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["defense", "TPR", "FPR", "AUROC", "ASR", "threshold"])
            asr = "n/a" if self.post_defense_asr is None else f"{self.post_defense_asr:.6g}"
            writer.writerow([defense, f"{self.tpr:.6g}", f"{self.fpr:.6g}", f"{self.auroc:.6g}",
                             asr, f"{self.threshold:.6g}"])
            writer.writerow([])
            writer.writerow(["kind", "score"])
            writer.writerows(("poisoned", f"{s:.8g}") for s in self.scores_poisoned)
            writer.writerows(("benign", f"{s:.8g}") for s in self.scores_benign)


def auroc(scores_positive, scores_negative) -> float:
    """Mann-Whitney AUROC with mid-ranks for ties (higher score = more positive)."""
    pos = np.asarray(scores_positive, dtype=np.float64)
    neg = np.asarray(scores_negative, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise InvalidInputError("AUROC needs both positive and negative scores")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


def _oriented(scores, flag_direction: str) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if flag_direction == "high":
        return scores
    if flag_direction == "low":
        return -scores
    raise InvalidInputError(f"flag_direction must be 'high' or 'low', got {flag_direction!r}")


def flagged(scores, threshold: float, flag_direction: str) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return scores >= threshold if flag_direction == "high" else scores <= threshold


def detection_report(scores_poisoned, scores_benign, threshold: float, flag_direction: str = "high",
                     poisoned_hits=None) -> DetectionReport:
    """TPR/FPR at ``threshold`` plus threshold-free AUROC.

    ``poisoned_hits`` marks poisoned inputs the model sends to the attack target;
    when given, the post-defense ASR counts hits that escaped the filter.
    """
    sp = np.asarray(scores_poisoned, dtype=np.float64)
    sb = np.asarray(scores_benign, dtype=np.float64)
    if sp.size == 0 or sb.size == 0:
        raise InvalidInputError("both score lists must be non-empty")
    fp, fb = flagged(sp, threshold, flag_direction), flagged(sb, threshold, flag_direction)
    post_asr = None
    if poisoned_hits is not None:
        hits = np.asarray(poisoned_hits, dtype=bool)
        post_asr = float(np.mean(hits & ~fp))
    return DetectionReport(
        tpr=float(fp.mean()), fpr=float(fb.mean()),
        auroc=auroc(_oriented(sp, flag_direction), _oriented(sb, flag_direction)),
        post_defense_asr=post_asr, threshold=float(threshold),
        scores_poisoned=sp.tolist(), scores_benign=sb.tolist())


def best_tpr_at_fpr(scores_poisoned, scores_benign, max_fpr: float, flag_direction: str) -> float:
    """Highest TPR reachable by any threshold whose FPR stays within ``max_fpr``."""
    sp = _oriented(scores_poisoned, flag_direction)
    sb = _oriented(scores_benign, flag_direction)
    best = 0.0
    for thr in np.unique(np.concatenate([sp, sb])):
        if np.mean(sb >= thr) <= max_fpr:
            best = max(best, float(np.mean(sp >= thr)))
    return best


# -- STRIP ------------------------------------------------------------------

def strip_entropies(model: Classifier, samples, overlay_pool: LabeledImageSet, n_overlays: int = 64,
                    blend: float = 0.5, seed: int = 0) -> np.ndarray:
    """Mean prediction entropy (nats) of each sample under random superposition."""
    if len(overlay_pool) == 0:
        raise InvalidInputError("overlay pool is empty")
    if not 0.0 < blend < 1.0:
        raise InvalidInputError(f"blend must lie in (0, 1), got {blend}")
    samples = np.asarray(samples)
    if samples.ndim == 3:
        samples = samples[None]
    rng = np.random.default_rng(seed)
    out = np.empty(len(samples))
    for i, sample in enumerate(samples):
        idx = rng.choice(len(overlay_pool), size=n_overlays, replace=n_overlays > len(overlay_pool))
        mixed = clip_to_valid_range((1 - blend) * sample + blend * overlay_pool.images[idx])
        p = model.probabilities(mixed.astype(np.float32))
        out[i] = float(np.mean(-xlogy(p, p).sum(axis=1)))
    return out


def strip_entropy(model: Classifier, sample, overlay_pool: LabeledImageSet, n_overlays: int = 64,
                  blend: float = 0.5, seed: int = 0) -> float:
    return float(strip_entropies(model, sample, overlay_pool, n_overlays, blend, seed)[0])


# -- Scale-Up -----------------------------------------------------------------

def scale_up_scores(model: Classifier, samples, scales=DEFAULT_SCALES) -> np.ndarray:
    """Fraction of amplification factors under which each prediction is unchanged."""
    scales = tuple(scales)
    if not scales:
        raise InvalidInputError("need at least one scale")
    samples = np.asarray(samples)
    if samples.ndim == 3:
        samples = samples[None]
    base = model.predict(samples)
    same = np.zeros(len(samples))
    for s in scales:
        same += model.predict(clip_to_valid_range(s * samples).astype(np.float32)) == base
    return same / len(scales)


def scale_up_score(model: Classifier, sample, scales=DEFAULT_SCALES) -> float:
    return float(scale_up_scores(model, sample, scales)[0])


# -- Fine-Pruning -------------------------------------------------------------

def pruning_order(model: Classifier, clean_validation: LabeledImageSet) -> np.ndarray:
    """Penultimate channels sorted by mean activation, ascending; ties by index."""
    mean_act = model.penultimate(clean_validation.images).mean(axis=0)
    return np.argsort(mean_act, kind="stable")


def fine_prune(model: Classifier, clean_validation: LabeledImageSet, poisoned_test: LabeledImageSet,
               steps, clean_test: LabeledImageSet | None = None) -> list[tuple[int, float, float]]:
    """(pruned channel count, BA, ASR) after masking the least active channels.

    Channels are ranked on ``clean_validation``; BA is measured on ``clean_test``
    when given, else on the validation set itself.
    """
    n = model.feature_channels
    steps = [int(s) for s in steps]
    if any(s < 0 or s > n for s in steps):
        raise InvalidInputError(f"prune counts must lie in [0, {n}]")
    order = pruning_order(model, clean_validation)
    clean_test = clean_test if clean_test is not None else clean_validation
    curve = []
    for count in steps:
        pruned = model.mask_channels(order[:count])
        curve.append((count, benign_accuracy(pruned, clean_test), attack_success_rate(pruned, poisoned_test)))
    return curve


def write_curve_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pruned_channels", "BA", "ASR"])
        writer.writerows((c, f"{ba:.6g}", f"{asr:.6g}") for c, ba, asr in curve)


# -- Neural Cleanse -----------------------------------------------------------

def anomaly_indices(norms) -> np.ndarray:
    """``|x - median| / (1.4826 * MAD)``; NaN entries (failed classes) stay NaN."""
    x = np.asarray(norms, dtype=np.float64)
    ok = np.isfinite(x)
    out = np.full(x.shape, np.nan)
    if not ok.any():
        return out
    med = np.median(x[ok])
    dev = np.abs(x[ok] - med)
    mad = MAD_CONSISTENCY * np.median(dev)
    if mad == 0:
        out[ok] = np.where(dev == 0, 0.0, np.inf)
    else:
        out[ok] = dev / mad
    return out


@dataclass
class NeuralCleanseResult:
    l1_norms: np.ndarray
    anomaly: np.ndarray
    failed_classes: list[int]
    masks: list[np.ndarray | None] = field(repr=False, default_factory=list)

    @property
    def max_anomaly(self) -> float:
        finite = self.anomaly[~np.isnan(self.anomaly)]
        return float(finite.max()) if finite.size else math.nan

    @property
    def flagged(self) -> bool:
        return bool(self.max_anomaly > NC_THRESHOLD)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "l1_norm", "anomaly_index", "status"])
            for c, (norm, idx) in enumerate(zip(self.l1_norms, self.anomaly)):
                status = "failed" if c in self.failed_classes else "ok"
                writer.writerow([c, f"{norm:.6g}", f"{idx:.6g}", status])


def reverse_engineer_trigger(model: Classifier, probe_set: LabeledImageSet, target: int, lr: float = 0.1,
                             reg_coef: float = 1e-3, epochs: int = 50, batch_size: int = 128,
                             seed: int = 0) -> tuple[float, np.ndarray]:
    """Smallest (mask, pattern) pair that sends probe images to ``target``.

    Mask (H, W) and pattern (H, W, C) are squashed into [0, 1] through tanh and
    optimized with Adam. Returns the mask L1 norm and the mask itself.
    """
    gen = torch.Generator().manual_seed(seed)
    h, w, c = model.input_shape.as_tuple
    dtype, dev = model.dtype, model.device
    mask_raw = torch.zeros(1, 1, h, w, dtype=dtype, device=dev, requires_grad=True)
    pattern_raw = torch.zeros(1, c, h, w, dtype=dtype, device=dev, requires_grad=True)
    with torch.no_grad():
        mask_raw.normal_(0, 0.1, generator=gen)
        pattern_raw.normal_(0, 0.1, generator=gen)
    opt = torch.optim.Adam([mask_raw, pattern_raw], lr=lr, betas=(0.5, 0.9))
    x_all = to_nchw(probe_set.images, dtype, dev)
    n = len(probe_set)
    for _ in range(epochs):
        for start in range(0, n, batch_size):
            idx = torch.randperm(n, generator=gen)[:batch_size] if n > batch_size else slice(None)
            x = x_all[idx]
            mask = (torch.tanh(mask_raw) + 1) / 2
            pattern = (torch.tanh(pattern_raw) + 1) / 2
            logits = model.forward_tensor((1 - mask) * x + mask * pattern)
            y = torch.full((len(x),), target, dtype=torch.long, device=dev)
            loss = F.cross_entropy(logits, y) + reg_coef * mask.abs().sum()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite reverse-engineering loss for class {target}")
            grads = torch.autograd.grad(loss, [mask_raw, pattern_raw])
            opt.zero_grad()
            mask_raw.grad, pattern_raw.grad = grads
            opt.step()
    mask = ((torch.tanh(mask_raw) + 1) / 2).detach().cpu().numpy()[0, 0]
    return float(mask.sum()), mask


def neural_cleanse(model: Classifier, probe_set: LabeledImageSet, lr: float = 0.1, reg_coef: float = 1e-3,
                   epochs: int = 50, batch_size: int = 128, seed: int = 0) -> NeuralCleanseResult:
    """Per-class trigger reverse engineering and MAD anomaly indices over mask L1 norms."""
    if len(np.unique(probe_set.labels)) < 2:
        raise InvalidInputError("probe set must contain several classes")
    norms = np.full(model.num_classes, np.nan)
    masks, failed = [], []
    for c in range(model.num_classes):
        try:
            norms[c], mask = reverse_engineer_trigger(model, probe_set, c, lr, reg_coef, epochs,
                                                      batch_size, seed + c)
            masks.append(mask)
        except FloatingPointError as exc:
            log.warning("neural cleanse failed for class %d: %s", c, exc)
            failed.append(c)
            masks.append(None)
    return NeuralCleanseResult(norms, anomaly_indices(norms), failed, masks)


# -- documented exclusions ---------------------------------------------------

def anti_backdoor_learning(*args, **kwargs):
    """Anti-Backdoor Learning (Li et al., NeurIPS 2021) is a training-time defense; not provided."""
    raise NotImplementedError("ABL is not implemented; see Li et al., 'Anti-Backdoor Learning', NeurIPS 2021")


def sentinet(*args, **kwargs):
    """SentiNet (Chou et al., 2020) needs saliency-map tooling; not provided."""
    raise NotImplementedError("SentiNet is not implemented; see Chou et al., 'SentiNet', IEEE SPW 2020")
