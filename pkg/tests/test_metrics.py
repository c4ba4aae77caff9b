import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from siba.core import LabeledImageSet
from siba.metrics import (MetricsRow, attack_success_rate, benign_accuracy, mean_perceptual_distance, mean_ssim,
                          perceptual_distance, read_metrics_csv, register_perceptual_scorer, ssim,
                          write_metrics_csv)

from conftest import constant_model


def _skimage_ssim(a, b):
    return structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                 data_range=1.0, channel_axis=-1)


@pytest.mark.parametrize("size", [11, 16, 32])
def test_ssim_matches_reference_implementation(size, rng):
    a = rng.random((size, size, 3))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(_skimage_ssim(a, b), abs=1e-9)


def test_ssim_small_image_single_cropped_window(rng):
    # 8x8 < 11: one window, the centre 8x8 taps of the 11x11 Gaussian, renormalized.
    a, b = rng.random((8, 8, 1)), rng.random((8, 8, 1))
    x = np.arange(11) - 5
    k = np.exp(-x ** 2 / (2 * 1.5 ** 2))[1:9]
    w = np.outer(k, k)
    w /= w.sum()
    a2, b2 = a[..., 0], b[..., 0]
    mu_a, mu_b = (w * a2).sum(), (w * b2).sum()
    va = (w * a2 ** 2).sum() - mu_a ** 2
    vb = (w * b2 ** 2).sum() - mu_b ** 2
    cov = (w * a2 * b2).sum() - mu_a * mu_b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expected = (2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    assert ssim(a, b) == pytest.approx(expected, abs=1e-12)


def test_ssim_examples(rng):
    a = rng.random((32, 32, 3))
    assert abs(ssim(a, a) - 1.0) <= 1e-9
    flat = np.full((8, 8, 3), 0.5)
    assert abs(ssim(flat, 1.0 - flat) - 1.0) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(4, 20))
def test_ssim_symmetric_and_reflexive(seed, size):
    rng = np.random.default_rng(seed)
    a, b = rng.random((size, size, 3)), rng.random((size, size, 3))
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9
    assert abs(ssim(a, a) - 1.0) <= 1e-9
    assert -1.0 <= ssim(a, b) <= 1.0


def test_mean_ssim(rng):
    a = rng.random((3, 16, 16, 3))
    b = np.clip(a + 0.01, 0, 1)
    assert mean_ssim(a, b) == pytest.approx(np.mean([ssim(x, y) for x, y in zip(a, b)]))


def test_accuracy_and_asr_examples(rng):
    imgs = rng.random((100, 8, 8, 3)).astype(np.float32)
    balanced = LabeledImageSet(imgs, np.arange(100) % 10, 10)
    always_zero = constant_model(np.zeros(10))
    assert benign_accuracy(always_zero, balanced) == pytest.approx(0.1)
    target_all = LabeledImageSet(imgs, np.zeros(100, dtype=np.int64), 10)
    assert attack_success_rate(always_zero, target_all) == 1.0
    logits = np.zeros(10)
    logits[3] = 1
    assert attack_success_rate(constant_model(logits), target_all) == 0.0


def test_metrics_permutation_invariant(tiny_model, tiny_data, rng):
    test = tiny_data[1]
    perm = rng.permutation(len(test))
    shuffled = LabeledImageSet(test.images[perm], test.labels[perm], test.num_classes)
    assert benign_accuracy(tiny_model, test) == benign_accuracy(tiny_model, shuffled)
    assert attack_success_rate(tiny_model, test) == attack_success_rate(tiny_model, shuffled)


def test_asr_plus_non_target_is_one(tiny_model, tiny_data):
    test = tiny_data[1]
    target = LabeledImageSet(test.images, np.zeros(len(test), dtype=np.int64), test.num_classes)
    asr = attack_success_rate(tiny_model, target)
    other = float(np.mean(tiny_model.predict(test.images) != 0))
    assert asr + other == pytest.approx(1.0, abs=1e-12)


def test_perceptual_hook(rng):
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    register_perceptual_scorer(None)
    assert perceptual_distance(a, b) is None
    assert mean_perceptual_distance(a[None], b[None]) is None
    assert MetricsRow("e", "x", "m", 1.0, 0.5).formatted()["LPIPS"] == "n/a"
    mad = lambda x, y: float(np.mean(np.abs(np.asarray(x) - np.asarray(y))))  # noqa: E731
    try:
        register_perceptual_scorer(mad)
        assert perceptual_distance(a, b) == pytest.approx(np.abs(a - b).mean())
        assert perceptual_distance(a, a) == 0.0
    finally:
        register_perceptual_scorer(None)


def test_metrics_csv_round_trip(tmp_path):
    rows = [MetricsRow("exp", "SIBA", "small-resnet", 0.9467, 0.976, 100, 8 / 255, 0.993, None)]
    path = write_metrics_csv(rows, tmp_path / "m.csv")
    back = read_metrics_csv(path)
    assert list(back[0]) == ["experiment_id", "attack", "model", "BA", "ASR", "L0", "Linf", "SSIM", "LPIPS"]
    assert back[0]["L0"] == "100" and back[0]["LPIPS"] == "n/a"
    write_metrics_csv(rows, path, append=True)
    assert len(read_metrics_csv(path)) == 2
