import numpy as np
import pytest
import torch
from torch import nn

from siba.core import ImageShape
from siba.data import make_synthetic_dataset
from siba.models import Classifier, TrainConfig, train_classifier


class ConstantLogits(nn.Module):
    """Ignores its input and returns fixed logits; exposes a 4-channel penultimate layer."""

    feature_channels = 4

    def __init__(self, logits):
        super().__init__()
        self.bias = nn.Parameter(torch.as_tensor(logits, dtype=torch.float32), requires_grad=False)

    def pooled(self, x, channel_mask=None):
        f = torch.ones(x.shape[0], self.feature_channels, dtype=x.dtype, device=x.device)
        return f if channel_mask is None else f * channel_mask

    def forward(self, x, channel_mask=None):
        # 0 * x keeps the output inside the autograd graph.
        return self.bias.to(x.dtype).expand(x.shape[0], -1) + 0.0 * x.sum(dim=(1, 2, 3))[:, None]


def constant_model(logits, shape=ImageShape(8, 8, 3)) -> Classifier:
    return Classifier(ConstantLogits(logits), len(logits), shape, "constant")


@pytest.fixture(scope="session")
def tiny_data():
    train = make_synthetic_dataset(num_classes=4, per_class=40, height=8, width=8, seed=3)
    test = make_synthetic_dataset(num_classes=4, per_class=10, height=8, width=8, seed=3, split="test")
    return train, test


@pytest.fixture(scope="session")
def tiny_model(tiny_data):
    torch.manual_seed(0)
    cfg = TrainConfig("small-cnn", epochs=4, initial_lr=0.05, lr_milestones=(3,), batch_size=32, random_crop=False)
    return train_classifier(tiny_data[0], cfg, test=tiny_data[1])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
