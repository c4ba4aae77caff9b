"""Classifier architectures, the model handle consumed by attacks/defenses, and training."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ImageShape, InvalidInputError, LabeledImageSet

log = logging.getLogger(__name__)

ARCHITECTURES = ("small-resnet", "small-vgg", "small-cnn")


class TrainingError(RuntimeError):
    pass


class UnsupportedError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Architectures. Each exposes ``features`` (conv trunk -> N x F x h x w) and
# ``head`` (Linear over the spatially averaged F channels).
# --------------------------------------------------------------------------

class _Backbone(nn.Module):
    feature_channels: int

    def forward(self, x, channel_mask=None):
        return self.head(self.pooled(x, channel_mask))

    def pooled(self, x, channel_mask=None):
        f = self.features(x)
        if channel_mask is not None:
            f = f * channel_mask.view(1, -1, 1, 1)
        return f.mean(dim=(2, 3))


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class SmallResNet(_Backbone):
    """ResNet-18 layout for small images (3x3 stem, no max-pool)."""

    def __init__(self, in_channels=3, num_classes=10, blocks=(2, 2, 2, 2)):
        super().__init__()
        self.in_planes = 64
        stem = [nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False), nn.BatchNorm2d(64), nn.ReLU()]
        layers = []
        for planes, n, stride in zip((64, 128, 256, 512), blocks, (1, 2, 2, 2)):
            for s in [stride] + [1] * (n - 1):
                layers.append(BasicBlock(self.in_planes, planes, s))
                self.in_planes = planes
        self.features = nn.Sequential(*stem, *layers)
        self.feature_channels = 512
        self.head = nn.Linear(512, num_classes)


VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512)


class SmallVGG(_Backbone):
    """VGG-16 with batch norm; the final max-pool is replaced by global averaging."""

    def __init__(self, in_channels=3, num_classes=10, cfg=VGG16_CFG):
        super().__init__()
        layers, c = [], in_channels
        for v in cfg:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [nn.Conv2d(c, v, 3, padding=1), nn.BatchNorm2d(v), nn.ReLU()]
                c = v
        self.features = nn.Sequential(*layers)
        self.feature_channels = c
        self.head = nn.Linear(c, num_classes)


class SmallCNN(_Backbone):
    """Three conv blocks; fast enough for CI-scale runs."""

    def __init__(self, in_channels=3, num_classes=10, width=32):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1), nn.BatchNorm2d(width), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.BatchNorm2d(2 * width), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 4 * width, 3, padding=1), nn.BatchNorm2d(4 * width), nn.ReLU(),
        )
        self.feature_channels = 4 * width
        self.head = nn.Linear(4 * width, num_classes)


def build_network(architecture: str, input_shape: ImageShape, num_classes: int) -> nn.Module:
    if architecture == "small-resnet":
        return SmallResNet(input_shape.channels, num_classes)
    if architecture == "small-vgg":
        if min(input_shape.height, input_shape.width) < 16:
            raise InvalidInputError("small-vgg needs images of at least 16x16")
        return SmallVGG(input_shape.channels, num_classes)
    if architecture == "small-cnn":
        return SmallCNN(input_shape.channels, num_classes)
    raise InvalidInputError(f"unknown architecture {architecture!r}; choose from {ARCHITECTURES}")


# --------------------------------------------------------------------------
# Handle
# --------------------------------------------------------------------------

def to_nchw(images: np.ndarray | torch.Tensor, dtype=torch.float32, device="cpu") -> torch.Tensor:
    t = images if torch.is_tensor(images) else torch.from_numpy(np.array(images, copy=True))
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).to(device=device, dtype=dtype)


class Classifier:
    """Differentiable C-class classifier over (H, W, C) images in [0, 1].

    All array arguments and results use numpy in (N, H, W, C) layout. Channel
    masks from :meth:`mask_channels` are applied at the penultimate layer only
    and never touch the stored weights.
    """

    def __init__(self, module: nn.Module, num_classes: int, input_shape: ImageShape,
                 architecture: str = "custom", masked_channels=frozenset(),
                 device: str = "cpu", info: dict | None = None, batch_size: int = 256):
        self.module = module.to(device).eval()
        self.num_classes = num_classes
        self.input_shape = input_shape
        self.architecture = architecture
        self.masked_channels = frozenset(int(i) for i in masked_channels)
        self.device = device
        self.info = dict(info or {})
        self.batch_size = batch_size

    # -- plumbing ---------------------------------------------------------
    @property
    def dtype(self) -> torch.dtype:
        p = next(self.module.parameters(), None)
        return p.dtype if p is not None else torch.float32

    @property
    def feature_channels(self) -> int:
        n = getattr(self.module, "feature_channels", None)
        if n is None:
            raise UnsupportedError(f"{type(self.module).__name__} has no penultimate feature layer")
        return n

    def _channel_mask(self):
        if not self.masked_channels:
            return None
        mask = torch.ones(self.feature_channels, dtype=self.dtype, device=self.device)
        mask[list(self.masked_channels)] = 0
        return mask

    def _check_shape(self, images: np.ndarray):
        if tuple(images.shape[-3:]) != self.input_shape.as_tuple:
            raise InvalidInputError(
                f"input shape {tuple(images.shape[-3:])} != model shape {self.input_shape.as_tuple}")

    def forward_tensor(self, x_nchw: torch.Tensor) -> torch.Tensor:
        mask = self._channel_mask()
        if mask is None:
            return self.module(x_nchw)
        return self.module(x_nchw, channel_mask=mask)

    def with_dtype(self, dtype: torch.dtype) -> "Classifier":
        """Copy of this handle whose module runs in ``dtype`` (e.g. float64 for gradient checks)."""
        import copy
        module = copy.deepcopy(self.module).to(dtype)
        return Classifier(module, self.num_classes, self.input_shape, self.architecture,
                          self.masked_channels, self.device, self.info, self.batch_size)

    # -- inference ----------------------------------------------------------
    @torch.no_grad()
    def logits(self, images) -> np.ndarray:
        images = np.asarray(images)
        single = images.ndim == 3
        if single:
            images = images[None]
        self._check_shape(images)
        out = []
        for start in range(0, len(images), self.batch_size):
            x = to_nchw(images[start:start + self.batch_size], self.dtype, self.device)
            out.append(self.forward_tensor(x).double().cpu().numpy())
        result = np.concatenate(out) if out else np.zeros((0, self.num_classes))
        return result[0] if single else result

    def probabilities(self, images) -> np.ndarray:
        z = self.logits(images)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, images) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lowest class index on ties.
        return np.argmax(self.logits(images), axis=-1)

    @torch.no_grad()
    def penultimate(self, images) -> np.ndarray:
        pooled = getattr(self.module, "pooled", None)
        if pooled is None:
            raise UnsupportedError(f"{type(self.module).__name__} has no penultimate feature layer")
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        self._check_shape(images)
        out = []
        for start in range(0, len(images), self.batch_size):
            x = to_nchw(images[start:start + self.batch_size], self.dtype, self.device)
            out.append(pooled(x, self._channel_mask()).double().cpu().numpy())
        return np.concatenate(out) if out else np.zeros((0, self.feature_channels))

    def loss_and_input_gradient(self, images, targets) -> tuple[float, np.ndarray]:
        """Mean cross-entropy against ``targets`` and its gradient w.r.t. the images."""
        images = np.asarray(images)
        self._check_shape(images)
        x = to_nchw(images, self.dtype, self.device).requires_grad_(True)
        y = torch.from_numpy(np.array(targets, dtype=np.int64)).to(self.device)
        loss = F.cross_entropy(self.forward_tensor(x), y)
        (grad,) = torch.autograd.grad(loss, x)
        return float(loss.detach()), grad.permute(0, 2, 3, 1).double().cpu().numpy()

    def mask_channels(self, channel_indices) -> "Classifier":
        """View of this model with extra penultimate channels zeroed at inference."""
        indices = {int(i) for i in channel_indices}
        n = self.feature_channels
        bad = [i for i in indices if not 0 <= i < n]
        if bad:
            raise InvalidInputError(f"channel indices out of range [0, {n}): {sorted(bad)[:5]}")
        return Classifier(self.module, self.num_classes, self.input_shape, self.architecture,
                          self.masked_channels | indices, self.device, self.info, self.batch_size)

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.module.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    # -- persistence --------------------------------------------------------
    def save(self, path) -> None:
        """Write ``path`` (torch state dict) and ``path.meta`` (key=value sidecar)."""
        path = Path(path)
        torch.save(self.module.state_dict(), path)
        meta = {
            "architecture": self.architecture,
            "num_classes": self.num_classes,
            "input_shape": "x".join(map(str, self.input_shape.as_tuple)),
            **{k: v for k, v in self.info.items()},
        }
        write_key_values(path.with_suffix(path.suffix + ".meta"), meta)

    @classmethod
    def load(cls, path, device: str = "cpu") -> "Classifier":
        path = Path(path)
        meta = read_key_values(path.with_suffix(path.suffix + ".meta"))
        shape = ImageShape(*map(int, meta["input_shape"].split("x")))
        num_classes = int(meta["num_classes"])
        module = build_network(meta["architecture"], shape, num_classes)
        module.load_state_dict(torch.load(path, map_location=device, weights_only=True))
        info = {k: v for k, v in meta.items() if k not in ("architecture", "num_classes", "input_shape")}
        return cls(module, num_classes, shape, meta["architecture"], device=device, info=info)


def write_key_values(path, mapping: dict) -> None:
    with open(path, "w") as fh:
        for key, value in mapping.items():
            fh.write(f"{key}={value}\n")


def read_key_values(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def predict_labels(model: Classifier, images) -> np.ndarray:
    return model.predict(images)


def penultimate_activations(model: Classifier, images) -> np.ndarray:
    return model.penultimate(images)


def mask_channels(model: Classifier, channel_indices) -> Classifier:
    return model.mask_channels(channel_indices)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    architecture: str = "small-resnet"
    epochs: int = 100
    initial_lr: float = 0.1
    lr_milestones: tuple[int, ...] = (60, 90)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    random_crop: bool = True
    horizontal_flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise InvalidInputError(f"unknown architecture {self.architecture!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidInputError("epochs must be >= 0 and batch_size >= 1")
        ms = tuple(self.lr_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise InvalidInputError(f"lr_milestones must be strictly increasing: {ms}")
        if self.epochs and ms and ms[-1] >= self.epochs:
            raise InvalidInputError(f"lr_milestones {ms} must be < epochs ({self.epochs})")
        object.__setattr__(self, "lr_milestones", ms)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _augment(x: torch.Tensor, crop: bool, flip: bool, gen: torch.Generator) -> torch.Tensor:
    b, _, h, w = x.shape
    if crop:
        pad = 4
        padded = F.pad(x, (pad, pad, pad, pad))
        oy = torch.randint(0, 2 * pad + 1, (b,), generator=gen)
        ox = torch.randint(0, 2 * pad + 1, (b,), generator=gen)
        rows = (oy[:, None] + torch.arange(h))[:, :, None]
        cols = (ox[:, None] + torch.arange(w))[:, None, :]
        x = padded.permute(0, 2, 3, 1)[torch.arange(b)[:, None, None], rows, cols].permute(0, 3, 1, 2)
    if flip:
        flip_mask = torch.rand(b, generator=gen) < 0.5
        x = torch.where(flip_mask.view(-1, 1, 1, 1), x.flip(3), x)
    return x


def train_classifier(data: LabeledImageSet, config: TrainConfig, test: LabeledImageSet | None = None,
                     device: str = "cpu", progress: bool = False) -> Classifier:
    """SGD training with step-decayed learning rate.

    Returns a handle whose ``info`` records the final train loss and, when
    ``test`` is given, the benign accuracy on it.
    """
    if len(data) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    module = build_network(config.architecture, data.shape, data.num_classes).to(device)
    optimizer = torch.optim.SGD(module.parameters(), lr=config.initial_lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, list(config.lr_milestones), gamma=0.1)

    x_all = to_nchw(data.images)
    y_all = torch.from_numpy(np.array(data.labels, dtype=np.int64))
    n = len(data)
    final_loss = math.nan
    if config.epochs == 0:
        warnings.warn("epochs = 0: returning an untrained model", stacklevel=2)

    for epoch in range(config.epochs):
        module.train()
        order = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # BatchNorm cannot normalize a single sample
            x = _augment(x_all[idx], config.random_crop, config.horizontal_flip, gen).to(device)
            y = y_all[idx].to(device)
            if len(idx) == 1:
                module.eval()  # single-sample dataset: use running stats
            loss = F.cross_entropy(module(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {start // config.batch_size}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            count += len(idx)
        scheduler.step()
        final_loss = total / max(count, 1)
        if progress:
            log.info("epoch %d/%d loss %.4f lr %.4g", epoch + 1, config.epochs, final_loss,
                     scheduler.get_last_lr()[0])

    info = {"config_hash": config.digest(), "seed": config.seed, "epochs": config.epochs,
            "final_train_loss": final_loss}
    model = Classifier(module, data.num_classes, data.shape, config.architecture, device=device, info=info)
    if test is not None and len(test):
        model.info["benign_accuracy"] = float(np.mean(model.predict(test.images) == test.labels))
    return model
