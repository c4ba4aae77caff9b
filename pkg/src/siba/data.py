"""Dataset ingestion: CIFAR-10 archives, class-folder image trees, npz caches, synthetic sets."""

from __future__ import annotations

import os
import pickle
import tarfile
from pathlib import Path

import numpy as np
from PIL import Image

from .core import InvalidInputError, LabeledImageSet

CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")
IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff"}
_CIFAR_RECORD = 1 + 32 * 32 * 3


def data_dir() -> Path:
    return Path(os.environ.get("SIBA_DATA_DIR", "data"))


def _from_chw_bytes(raw: np.ndarray) -> np.ndarray:
    return raw.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0


def _read_binary_batches(files) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for f in files:
        raw = np.frombuffer(Path(f).read_bytes(), dtype=np.uint8)
        if raw.size % _CIFAR_RECORD:
            raise InvalidInputError(f"{f}: size is not a multiple of the CIFAR-10 record length")
        raw = raw.reshape(-1, _CIFAR_RECORD)
        labels.append(raw[:, 0].astype(np.int64))
        images.append(_from_chw_bytes(raw[:, 1:]))
    return np.concatenate(images), np.concatenate(labels)


def _read_python_batches(files) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for f in files:
        with open(f, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        images.append(_from_chw_bytes(np.asarray(batch[b"data"], dtype=np.uint8)))
        labels.append(np.asarray(batch[b"labels"], dtype=np.int64))
    return np.concatenate(images), np.concatenate(labels)


def find_cifar10(root=None) -> Path | None:
    """Locate an extracted (or extract a tarred) CIFAR-10 archive under ``root``."""
    root = Path(root) if root is not None else data_dir()
    for name in ("cifar-10-batches-bin", "cifar-10-batches-py"):
        if (root / name).is_dir():
            return root / name
    for name in ("cifar-10-binary.tar.gz", "cifar-10-python.tar.gz"):
        if (root / name).is_file():
            with tarfile.open(root / name) as tar:
                tar.extractall(root, filter="data")
            return find_cifar10(root)
    return None


def load_cifar10(root=None, train: bool = True) -> LabeledImageSet:
    """Load the binary (``data_batch_*.bin``) or pickled (``data_batch_*``) layout."""
    folder = find_cifar10(root)
    if folder is None:
        raise FileNotFoundError(
            f"no CIFAR-10 archive under {root or data_dir()} (set SIBA_DATA_DIR)")
    if folder.name.endswith("bin"):
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if train else ["test_batch.bin"]
        images, labels = _read_binary_batches(folder / n for n in names)
    else:
        names = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
        images, labels = _read_python_batches(folder / n for n in names)
    return LabeledImageSet(images, labels, 10, CIFAR10_CLASSES)


def load_image_folder(root, class_names=None) -> LabeledImageSet:
    """``root/<class>/<image>`` tree of lossless images; classes sorted by name."""
    root = Path(root)
    if class_names is None:
        class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not class_names:
        raise InvalidInputError(f"{root} has no class sub-directories")
    images, labels = [], []
    for label, name in enumerate(class_names):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
                if arr.ndim == 2:
                    arr = arr[..., None]
                images.append(arr.astype(np.float32) / 255.0)
                labels.append(label)
    if not images:
        raise InvalidInputError(f"no images found under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise InvalidInputError(f"mixed image shapes in {root}: {sorted(shapes)[:3]}")
    return LabeledImageSet(np.stack(images), np.array(labels), len(class_names), tuple(class_names))


def save_image_folder(dataset: LabeledImageSet, root) -> None:
    """Write ``root/<class>/<index>.png`` (8-bit, so values round to 1/255 steps)."""
    root = Path(root)
    names = dataset.class_names or tuple(f"class_{c:03d}" for c in range(dataset.num_classes))
    for name in names:
        (root / name).mkdir(parents=True, exist_ok=True)
    width = len(str(max(len(dataset) - 1, 0)))
    for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
        arr = np.round(img * 255).astype(np.uint8)
        if arr.shape[-1] == 1:
            arr = arr[..., 0]
        Image.fromarray(arr).save(root / names[label] / f"{i:0{width}d}.png")


def save_npz(dataset: LabeledImageSet, path) -> None:
    np.savez_compressed(path, images=dataset.images, labels=dataset.labels,
                        num_classes=dataset.num_classes,
                        class_names=np.array(dataset.class_names or (), dtype=str))


def load_npz(path) -> LabeledImageSet:
    with np.load(path) as z:
        names = tuple(str(n) for n in z["class_names"]) or None
        return LabeledImageSet(z["images"], z["labels"], int(z["num_classes"]), names)


def make_synthetic_dataset(num_classes: int = 10, per_class: int = 100, height: int = 16,
                           width: int = 16, channels: int = 3, noise: float = 0.12,
                           seed: int = 0, split: str = "train") -> LabeledImageSet:
    """Class-conditional smooth templates plus per-sample noise and brightness jitter.

    The class templates depend on ``seed`` only, so "train" and "test" splits drawn
    with the same ``seed`` share them while their samples differ.
    """
    rng = np.random.default_rng(seed)
    coarse = rng.random((num_classes, 4, 4, channels))
    reps = (int(np.ceil(height / 4)), int(np.ceil(width / 4)))
    templates = np.kron(coarse, np.ones((1, *reps, 1)))[:, :height, :width]
    sample_rng = np.random.default_rng([seed, {"train": 0, "test": 1}[split], per_class])
    labels = np.repeat(np.arange(num_classes), per_class)
    brightness = sample_rng.uniform(-0.1, 0.1, size=(len(labels), 1, 1, 1))
    images = 0.2 + 0.6 * templates[labels] + brightness
    images = images + noise * sample_rng.standard_normal(images.shape)
    order = sample_rng.permutation(len(labels))
    return LabeledImageSet(np.clip(images[order], 0, 1).astype(np.float32), labels[order], num_classes,
                           tuple(f"class_{c}" for c in range(num_classes)))


def train_test_split(dataset: LabeledImageSet, test_fraction: float, seed: int = 0):
    n_test = int(round(test_fraction * len(dataset)))
    order = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))
