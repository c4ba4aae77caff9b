"""Shared domain types, norms and the trigger file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FLOAT_TOL = 1e-6
TRIGGER_MAGIC = b"SIBA1"
_HEADER = struct.Struct("<5sIIIId")


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class NumericError(ArithmeticError):
    """Raised on non-finite values where finite ones are required."""


@dataclass(frozen=True)
class ImageShape:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        for name in ("height", "width", "channels"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")

    @property
    def pixel_count(self) -> int:
        """Dimensionality d of the flattened (H, W, C) space."""
        return self.height * self.width * self.channels

    @property
    def as_tuple(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @classmethod
    def of(cls, array: np.ndarray) -> "ImageShape":
        if array.ndim != 3:
            raise InvalidInputError(f"expected an (H, W, C) array, got shape {array.shape}")
        return cls(*array.shape)


def _as_nonempty(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.size == 0:
        raise InvalidInputError("norm of an empty array is undefined")
    return arr


def l0_norm(values) -> int:
    """Number of exactly-nonzero elements."""
    return int(np.count_nonzero(_as_nonempty(values)))


def linf_norm(values) -> float:
    """Largest absolute element."""
    return float(np.max(np.abs(_as_nonempty(values))))


def clip_to_valid_range(image) -> np.ndarray:
    return np.clip(image, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class TriggerPattern:
    """Additive perturbation with its sparsity (L0) and visibility (L-inf) budgets.

    ``values`` is stored in (H, W, C) layout on the normalized [0, 1] pixel scale.
    Construction fails when either budget is exceeded.
    """

    values: np.ndarray
    k_budget: int
    eps_budget: float

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise InvalidInputError(f"trigger values must be (H, W, C), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericError("trigger contains non-finite values")
        if int(self.k_budget) != self.k_budget or self.k_budget < 1:
            raise InvalidInputError(f"k_budget must be a positive integer, got {self.k_budget!r}")
        if not 0.0 < self.eps_budget <= 1.0:
            raise InvalidInputError(f"eps_budget must lie in (0, 1], got {self.eps_budget!r}")
        if values.size and l0_norm(values) > self.k_budget:
            raise InvalidInputError(
                f"L0 norm {l0_norm(values)} exceeds k_budget {self.k_budget}")
        if values.size and linf_norm(values) > self.eps_budget + FLOAT_TOL:
            raise InvalidInputError(
                f"L-inf norm {linf_norm(values):.6g} exceeds eps_budget {self.eps_budget:.6g}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "k_budget", int(self.k_budget))
        object.__setattr__(self, "eps_budget", float(self.eps_budget))

    @classmethod
    def zeros(cls, shape: ImageShape, k_budget: int, eps_budget: float) -> "TriggerPattern":
        return cls(np.zeros(shape.as_tuple), k_budget, eps_budget)

    @property
    def shape(self) -> ImageShape:
        return ImageShape(*self.values.shape)

    @property
    def support(self) -> np.ndarray:
        return self.values != 0

    def apply(self, images: np.ndarray) -> np.ndarray:
        """Add the trigger to a single image or an (N, H, W, C) batch and clip."""
        images = np.asarray(images)
        if images.shape[-3:] != self.values.shape:
            raise InvalidInputError(
                f"image shape {images.shape[-3:]} does not match trigger {self.values.shape}")
        return clip_to_valid_range(images + self.values).astype(images.dtype, copy=False)

    def save(self, path) -> None:
        h, w, c = self.values.shape
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(TRIGGER_MAGIC, h, w, c, self.k_budget, self.eps_budget))
            fh.write(self.values.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "TriggerPattern":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise InvalidInputError(f"{path}: truncated trigger header")
        magic, h, w, c, k, eps = _HEADER.unpack_from(raw)
        if magic != TRIGGER_MAGIC:
            raise InvalidInputError(f"{path}: bad magic {magic!r}")
        body = raw[_HEADER.size:]
        if len(body) != h * w * c * 8:
            raise InvalidInputError(f"{path}: expected {h * w * c} values, got {len(body) // 8}")
        values = np.frombuffer(body, dtype="<f8").reshape(h, w, c)
        return cls(values.copy(), k, eps)


@dataclass(frozen=True, eq=False)
class SparsityMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if not np.all((bits == 0) | (bits == 1)):
            raise InvalidInputError("mask elements must be 0 or 1")
        bits = bits.astype(np.float64)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def indices(self) -> np.ndarray:
        """Flat indices of the selected positions, ascending."""
        return np.flatnonzero(self.bits.ravel())


@dataclass(frozen=True, eq=False)
class LabeledImageSet:
    """Images in (N, H, W, C) float32 layout with integer labels in [0, C)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_names: tuple[str, ...] | None = field(default=None)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32).view()
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1).view()
        if images.ndim != 4:
            raise InvalidInputError(f"images must be (N, H, W, C), got {images.shape}")
        if len(images) != len(labels):
            raise InvalidInputError(f"{len(images)} images but {len(labels)} labels")
        if self.num_classes < 1:
            raise InvalidInputError("num_classes must be positive")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes - 1}]")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise InvalidInputError("pixel values must lie in [0, 1]")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> ImageShape:
        return ImageShape(*self.images.shape[1:])

    def subset(self, indices) -> "LabeledImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(self.images[indices], self.labels[indices],
                               self.num_classes, self.class_names)

    def fraction(self, frac: float, seed: int = 0) -> "LabeledImageSet":
        """Uniform random subset holding ``round(frac * N)`` samples."""
        if not 0.0 < frac <= 1.0:
            raise InvalidInputError(f"fraction must lie in (0, 1], got {frac}")
        n = max(1, round_half_up(frac * len(self)))
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return self.subset(idx)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class AllToOne:
    """Every poisoned sample is relabelled as ``target``."""

    target: int = 0

    def apply(self, labels, num_classes: int) -> np.ndarray:
        if not 0 <= self.target < num_classes:
            raise InvalidInputError(f"target {self.target} outside [0, {num_classes - 1}]")
        return np.full(np.shape(labels), self.target, dtype=np.int64)


@dataclass(frozen=True)
class AllToAll:
    """Label ``y`` maps to ``(y + shift) mod C``."""

    shift: int = 1

    def apply(self, labels, num_classes: int) -> np.ndarray:
        return (np.asarray(labels, dtype=np.int64) + self.shift) % num_classes


LabelRule = AllToOne | AllToAll


@dataclass(frozen=True, eq=False)
class PoisonPlan:
    """Which samples of a dataset of ``dataset_size`` get the trigger and how they are relabelled.

    ``trigger`` is anything with an ``apply(images) -> images`` method: an additive
    :class:`TriggerPattern` or one of the non-additive stamp/blend transforms.
    """

    poisoned_indices: frozenset
    label_rule: LabelRule
    trigger: object
    poisoning_rate: float
    dataset_size: int

    def __post_init__(self):
        if not 0.0 < self.poisoning_rate <= 1.0:
            raise InvalidInputError(f"poisoning_rate must lie in (0, 1], got {self.poisoning_rate}")
        indices = frozenset(int(i) for i in self.poisoned_indices)
        expected = round_half_up(self.poisoning_rate * self.dataset_size)
        if len(indices) != expected:
            raise InvalidInputError(f"{len(indices)} poisoned indices, expected {expected}")
        if indices and (min(indices) < 0 or max(indices) >= self.dataset_size):
            raise InvalidInputError("poisoned index out of range")
        object.__setattr__(self, "poisoned_indices", indices)

    def sorted_indices(self) -> np.ndarray:
        return np.array(sorted(self.poisoned_indices), dtype=np.int64)
