"""Poisoned train/test set construction and the baseline trigger generators."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (AllToAll, AllToOne, ImageShape, InvalidInputError, LabeledImageSet, LabelRule,
                   PoisonPlan, TriggerPattern, clip_to_valid_range, round_half_up)
from .synthesis import SynthesisConfig, baseline_sparse_trigger, sparse_baseline_trace

__all__ = [
    "AllToAll", "AllToOne", "BlendTransform", "PatchStamp", "amplify_trigger",
    "baseline_blended_trigger", "baseline_patch_trigger", "baseline_random_trigger",
    "baseline_sparse_trigger", "export_poisoned_dataset", "make_poison_plan",
    "poison_test_set", "poison_training_set", "sparse_baseline_trace",
]


def make_poison_plan(dataset: LabeledImageSet, rate: float, label_rule: LabelRule, trigger,
                     seed: int = 0) -> PoisonPlan:
    """Pick ``round(rate * N)`` indices uniformly without replacement.

    Target-class samples are eligible too, so the poisoned subset is a plain
    random subset of the dataset.
    """
    if not 0.0 < rate <= 1.0:
        raise InvalidInputError(f"poisoning rate must lie in (0, 1], got {rate}")
    n = round_half_up(rate * len(dataset))
    if n == 0:
        raise InvalidInputError(f"rate {rate} poisons zero of {len(dataset)} samples")
    if isinstance(label_rule, AllToOne):
        label_rule.apply([], dataset.num_classes)  # validates the target
    idx = np.random.default_rng(seed).choice(len(dataset), size=n, replace=False)
    return PoisonPlan(frozenset(idx.tolist()), label_rule, trigger, rate, len(dataset))


def poison_training_set(dataset: LabeledImageSet, plan: PoisonPlan) -> LabeledImageSet:
    if plan.dataset_size != len(dataset):
        raise InvalidInputError(f"plan is for {plan.dataset_size} samples, dataset has {len(dataset)}")
    idx = plan.sorted_indices()
    images = np.array(dataset.images)
    labels = np.array(dataset.labels)
    if len(idx):
        images[idx] = plan.trigger.apply(images[idx])
        labels[idx] = plan.label_rule.apply(labels[idx], dataset.num_classes)
    return LabeledImageSet(images, labels, dataset.num_classes, dataset.class_names)


def poison_test_set(dataset: LabeledImageSet, trigger, label_rule: LabelRule) -> LabeledImageSet:
    """Triggered copy of every test sample with rule-mapped labels.

    Under all-to-one, samples already in the target class are dropped: they
    cannot show a misclassification and would inflate the success rate.
    """
    keep = np.arange(len(dataset))
    if isinstance(label_rule, AllToOne):
        keep = np.flatnonzero(dataset.labels != label_rule.target)
    images = trigger.apply(dataset.images[keep])
    labels = label_rule.apply(dataset.labels[keep], dataset.num_classes)
    return LabeledImageSet(images, labels, dataset.num_classes, dataset.class_names)


def amplify_trigger(trigger: TriggerPattern, eps_test: float) -> TriggerPattern:
    """Sign-saturated copy ``eps_test * sign(t)`` used only at inference."""
    if eps_test <= 0:
        raise InvalidInputError("eps_test must be positive")
    return TriggerPattern(eps_test * np.sign(trigger.values), trigger.k_budget, min(1.0, eps_test))


def baseline_random_trigger(shape: ImageShape, k: int, eps: float, seed: int = 0) -> TriggerPattern:
    """``k`` random positions, each set to -eps or +eps with equal probability."""
    d = shape.pixel_count
    if not 1 <= k <= d:
        raise InvalidInputError(f"k = {k} outside [1, {d}]")
    rng = np.random.default_rng(seed)
    values = np.zeros(d)
    values[rng.choice(d, size=k, replace=False)] = eps * rng.choice([-1.0, 1.0], size=k)
    return TriggerPattern(values.reshape(shape.as_tuple), k, eps)


@dataclass(frozen=True, eq=False)
class PatchStamp:
    """Replaces a square region with a fixed patch (BadNets-style)."""

    patch: np.ndarray   # (p, p, C)
    top: int
    left: int

    @property
    def l0_elements(self) -> int:
        return self.patch.size

    def apply(self, images: np.ndarray) -> np.ndarray:
        out = np.array(images, copy=True)
        p = self.patch.shape[0]
        out[..., self.top:self.top + p, self.left:self.left + p, :] = self.patch
        return out


def baseline_patch_trigger(shape: ImageShape, patch_size: int = 3, style: str = "checkerboard",
                           corner: str | tuple[int, int] = "bottom-right") -> PatchStamp:
    if not 1 <= patch_size <= min(shape.height, shape.width):
        raise InvalidInputError(f"patch of size {patch_size} does not fit a {shape.height}x{shape.width} image")
    if style == "checkerboard":
        yy, xx = np.indices((patch_size, patch_size))
        cell = ((yy + xx) % 2 == 0).astype(np.float32)
    elif style == "white":
        cell = np.ones((patch_size, patch_size), dtype=np.float32)
    else:
        raise InvalidInputError(f"unknown patch style {style!r}")
    patch = np.repeat(cell[..., None], shape.channels, axis=-1)
    corners = {
        "bottom-right": (shape.height - patch_size, shape.width - patch_size),
        "bottom-left": (shape.height - patch_size, 0),
        "top-right": (0, shape.width - patch_size),
        "top-left": (0, 0),
    }
    if isinstance(corner, str):
        if corner not in corners:
            raise InvalidInputError(f"unknown corner {corner!r}")
        top, left = corners[corner]
    else:
        top, left = corner
    if not (0 <= top <= shape.height - patch_size and 0 <= left <= shape.width - patch_size):
        raise InvalidInputError(f"patch at ({top}, {left}) falls outside the image")
    return PatchStamp(patch, top, left)


@dataclass(frozen=True, eq=False)
class BlendTransform:
    """``(1 - transparency) * image + transparency * pattern``."""

    pattern: np.ndarray
    transparency: float

    def apply(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        if images.shape[-3:] != self.pattern.shape:
            raise InvalidInputError(f"image shape {images.shape[-3:]} != pattern shape {self.pattern.shape}")
        blended = (1 - self.transparency) * images + self.transparency * self.pattern
        return clip_to_valid_range(blended).astype(images.dtype, copy=False)


def baseline_blended_trigger(shape: ImageShape, pattern_image=None, transparency: float = 0.2,
                             seed: int = 0) -> BlendTransform:
    """Blend transform; defaults to a uniform-noise pattern when no image is given."""
    if not 0.0 <= transparency <= 1.0:
        raise InvalidInputError(f"transparency must lie in [0, 1], got {transparency}")
    if pattern_image is None:
        pattern_image = np.random.default_rng(seed).random(shape.as_tuple)
    pattern = np.asarray(pattern_image, dtype=np.float64)
    if pattern.shape != shape.as_tuple:
        raise InvalidInputError(f"pattern shape {pattern.shape} != {shape.as_tuple}")
    return BlendTransform(pattern, transparency)


def export_poisoned_dataset(original: LabeledImageSet, poisoned: LabeledImageSet, plan: PoisonPlan,
                            out_dir) -> Path:
    """Write class sub-directories of 8-bit PNGs plus ``manifest.csv``.

    PNG quantizes to 1/255 steps; pipelines that need exact trigger values read
    the ``.npz`` cache instead.
    """
    from .data import save_image_folder

    out_dir = Path(out_dir)
    save_image_folder(poisoned, out_dir)
    flagged = plan.poisoned_indices
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "original_label", "new_label", "poisoned_flag"])
        for i, (a, b) in enumerate(zip(original.labels, poisoned.labels)):
            writer.writerow([i, int(a), int(b), int(i in flagged)])
    return out_dir
