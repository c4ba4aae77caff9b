import numpy as np
import pytest
import torch

from siba.core import ImageShape, InvalidInputError, LabeledImageSet
from siba.models import (Classifier, TrainConfig, TrainingError, UnsupportedError, build_network, mask_channels,
                         penultimate_activations, predict_labels, train_classifier)

from conftest import constant_model


def test_train_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(epochs=10, lr_milestones=(5, 3))
    with pytest.raises(InvalidInputError):
        TrainConfig(epochs=10, lr_milestones=(10,))
    with pytest.raises(InvalidInputError):
        TrainConfig(architecture="mlp")
    assert TrainConfig().digest() == TrainConfig().digest() != TrainConfig(seed=1).digest()


@pytest.mark.parametrize("arch,channels", [("small-resnet", 512), ("small-vgg", 512), ("small-cnn", 128)])
def test_architectures(arch, channels):
    shape = ImageShape(16, 16, 3)
    model = Classifier(build_network(arch, shape, 10), 10, shape, arch)
    x = np.zeros((2, 16, 16, 3), np.float32)
    assert model.logits(x).shape == (2, 10)
    acts = model.penultimate(x)
    assert acts.shape == (2, channels) and np.all(np.isfinite(acts))
    np.testing.assert_array_equal(acts, penultimate_activations(model, x))
    _, g = model.loss_and_input_gradient(x, np.zeros(2, dtype=np.int64))
    assert g.shape == (2, 16, 16, 3)


def test_vgg_needs_16_pixels():
    with pytest.raises(InvalidInputError):
        build_network("small-vgg", ImageShape(8, 8, 3), 10)


def test_constant_model_predicts_class_zero():
    model = constant_model(np.zeros(10))
    assert np.all(predict_labels(model, np.random.rand(5, 8, 8, 3).astype(np.float32)) == 0)


def test_one_sample_memorized():
    data = LabeledImageSet(np.full((1, 8, 8, 3), 0.3, np.float32), np.array([2]), 3)
    cfg = TrainConfig("small-cnn", epochs=1, initial_lr=0.1, lr_milestones=(), random_crop=False,
                      horizontal_flip=False)
    model = train_classifier(data, cfg, test=data)
    assert model.info["benign_accuracy"] == 1.0
    assert predict_labels(model, data.images)[0] == 2


def test_training_is_reproducible(tiny_data):
    cfg = TrainConfig("small-cnn", epochs=1, initial_lr=0.05, lr_milestones=(), batch_size=32)
    a = train_classifier(tiny_data[0], cfg)
    b = train_classifier(tiny_data[0], cfg)
    assert a.parameter_digest() == b.parameter_digest()
    assert a.info["final_train_loss"] == b.info["final_train_loss"]


def test_epochs_zero_warns(tiny_data):
    with pytest.warns(UserWarning, match="untrained"):
        train_classifier(tiny_data[0], TrainConfig("small-cnn", epochs=0, lr_milestones=()))


def test_divergence_raises(tiny_data):
    cfg = TrainConfig("small-cnn", epochs=3, initial_lr=1e30, lr_milestones=(), batch_size=32)
    with pytest.raises(TrainingError):
        train_classifier(tiny_data[0], cfg)


def test_batch_and_single_prediction_agree(tiny_model, tiny_data):
    imgs = tiny_data[1].images[:12]
    batch = tiny_model.predict(imgs)
    single = np.array([tiny_model.predict(im) for im in imgs])
    np.testing.assert_array_equal(batch, single)


def test_mask_channels(tiny_model, tiny_data):
    x = tiny_data[1].images
    digest = tiny_model.parameter_digest()
    np.testing.assert_array_equal(mask_channels(tiny_model, set()).predict(x), tiny_model.predict(x))
    n = tiny_model.feature_channels
    everything = tiny_model.mask_channels(range(n))
    z = everything.logits(x)
    np.testing.assert_allclose(z, np.broadcast_to(z[0], z.shape), atol=1e-6)
    bias = tiny_model.module.head.bias.detach().double().numpy()
    np.testing.assert_allclose(z[0], bias, atol=1e-6)
    ab = tiny_model.mask_channels({1, 2}).mask_channels({2, 7})
    union = tiny_model.mask_channels({1, 2, 7})
    np.testing.assert_array_equal(ab.logits(x), union.logits(x))
    assert tiny_model.parameter_digest() == digest and not tiny_model.masked_channels
    with pytest.raises(InvalidInputError):
        tiny_model.mask_channels({n})


def test_penultimate_unsupported():
    model = Classifier(torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(12, 2)), 2, ImageShape(2, 2, 3))
    with pytest.raises(UnsupportedError):
        model.penultimate(np.zeros((1, 2, 2, 3), np.float32))


def test_input_gradient_matches_finite_differences(tiny_model, tiny_data, rng):
    m64 = tiny_model.with_dtype(torch.float64)
    x = np.clip(tiny_data[1].images[:3].astype(np.float64), 0.1, 0.9)
    y = tiny_data[1].labels[:3]
    _, g = m64.loss_and_input_gradient(x, y)
    coords = rng.choice(x.size, 10, replace=False)
    fd = []
    for c in coords:
        vals = []
        for s in (1, -1):
            xp = x.copy()
            xp.ravel()[c] += s * 1e-4
            vals.append(m64.loss_and_input_gradient(xp, y)[0])
        fd.append((vals[0] - vals[1]) / 2e-4)
    fd = np.array(fd)
    assert np.linalg.norm(g.ravel()[coords] - fd) / np.linalg.norm(fd) < 1e-3


def test_save_load_round_trip(tmp_path, tiny_model, tiny_data):
    path = tmp_path / "model.pt"
    tiny_model.save(path)
    meta = (tmp_path / "model.pt.meta").read_text()
    assert "architecture=small-cnn" in meta and "config_hash=" in meta
    back = Classifier.load(path)
    np.testing.assert_array_equal(back.logits(tiny_data[1].images), tiny_model.logits(tiny_data[1].images))
    assert back.info["config_hash"] == tiny_model.info["config_hash"]
