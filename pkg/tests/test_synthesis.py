import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from siba.core import (AllToAll, AllToOne, ImageShape, InvalidInputError, LabeledImageSet, NumericError,
                       SparsityMask, TriggerPattern, l0_norm, linf_norm)
from siba.synthesis import (SynthesisConfig, apply_mask, lemma1_bruteforce_projection, linf_sign_step,
                            poisoned_loss_gradient, random_support_mask, sparse_baseline_trace,
                            surrogate_loss, synthesize_trigger, topk_mask)

from conftest import constant_model

EPS = 8 / 255


def _fd_relative_error(model, batch, trigger, rule, coords, h=1e-4):
    """Central differences of the loss at ``coords`` vs the analytic gradient there."""
    m64 = model.with_dtype(torch.float64)
    g = poisoned_loss_gradient(m64, batch, trigger, rule)
    fd = []
    for c in coords:
        vals = []
        for sign in (1, -1):
            v = trigger.values.copy()
            v.ravel()[c] += sign * h
            vals.append(surrogate_loss(m64, batch, TriggerPattern(v, v.size, 1.0), rule))
        fd.append((vals[0] - vals[1]) / (2 * h))
    fd = np.array(fd)
    an = g.ravel()[coords]
    return np.linalg.norm(an - fd) / np.linalg.norm(fd)


def test_gradient_matches_finite_differences(tiny_model, tiny_data, rng):
    train = tiny_data[0]
    # Keep pixels away from 0 and 1 so clipping stays inactive under the probe steps.
    batch = LabeledImageSet(np.clip(train.images[:1], 0.1, 0.9), train.labels[:1], train.num_classes)
    values = rng.uniform(-0.02, 0.02, batch.shape.as_tuple)
    trigger = TriggerPattern(values, values.size, 0.02)
    coords = rng.choice(values.size, 10, replace=False)
    assert _fd_relative_error(tiny_model, batch, trigger, AllToOne(1), coords) < 1e-3


def test_gradient_of_constant_model_is_zero():
    model = constant_model(np.zeros(10))
    batch = LabeledImageSet(np.full((3, 8, 8, 3), 0.5, np.float32), np.array([1, 2, 3]), 10)
    g = poisoned_loss_gradient(model, batch, TriggerPattern.zeros(model.input_shape, 5, EPS), AllToOne(0))
    assert g.shape == (8, 8, 3)
    assert not np.any(g)


def test_trigger_gradient_equals_input_gradient(tiny_model, tiny_data, rng):
    train = tiny_data[0]
    images = np.clip(train.images[:5], 0.1, 0.9)
    batch = LabeledImageSet(images, train.labels[:5], train.num_classes)
    values = rng.uniform(-0.01, 0.01, batch.shape.as_tuple)
    trigger = TriggerPattern(values, values.size, 0.01)
    g_t = poisoned_loss_gradient(tiny_model, batch, trigger, AllToOne(0))
    targets = np.zeros(5, dtype=np.int64)
    _, g_x = tiny_model.loss_and_input_gradient((images + values).astype(np.float32), targets)
    # d/dt sum over samples of d/dx at x + t (mean loss, so the per-sample grads already carry 1/N).
    np.testing.assert_allclose(g_t, g_x.sum(axis=0), rtol=1e-4, atol=1e-7)


def test_gradient_shape_mismatch(tiny_model):
    batch = LabeledImageSet(np.zeros((1, 4, 4, 3), np.float32), np.array([0]), 4)
    with pytest.raises(InvalidInputError):
        poisoned_loss_gradient(tiny_model, batch, TriggerPattern.zeros(ImageShape(4, 4, 3), 1, EPS), AllToOne(0))


def test_sign_step_from_zero():
    out = linf_sign_step(np.zeros(6), np.ones(6), 0.2, EPS)
    np.testing.assert_allclose(out, -0.2 * EPS, rtol=0, atol=1e-15)
    assert out[0] == pytest.approx(-0.00627, abs=1e-5)


def test_sign_step_sign_zero_keeps_coordinate():
    out = linf_sign_step(np.zeros(3), np.array([0.0, 1.0, -1.0]), 0.2, EPS)
    assert out[0] == 0.0 and out[1] < 0 < out[2]


def test_sign_step_boundary():
    out = linf_sign_step(np.array([EPS]), np.array([-1.0]), 0.2, EPS)
    assert out[0] <= EPS


def test_sign_step_rejects_non_finite():
    with pytest.raises(NumericError):
        linf_sign_step(np.zeros(2), np.array([1.0, np.nan]), 0.2, EPS)


@pytest.mark.parametrize("alpha", [0.2, 0.3, 0.25, 0.7, 1.0])
def test_sign_step_saturates_within_ceil_inverse_alpha(alpha, rng):
    g = rng.standard_normal(20)
    t = np.zeros(20)
    for _ in range(math.ceil(1 / alpha)):
        t = linf_sign_step(t, g, alpha, EPS)
    np.testing.assert_allclose(np.abs(t), EPS, rtol=1e-12)
    np.testing.assert_array_equal(np.sign(t), -np.sign(g))


def test_topk_examples():
    m = topk_mask(np.array([0.5, 0.1, 0.9, 0.3]), 2)
    assert set(m.indices()) == {0, 2}
    m = topk_mask(np.full(6, 0.7), 3)
    assert list(m.indices()) == [0, 1, 2]
    m = topk_mask(np.array([-0.9, 0.1, 0.9, -0.1]), 1)
    assert list(m.indices()) == [0]


def test_topk_rejects_k_above_d():
    with pytest.raises(InvalidInputError):
        topk_mask(np.ones(4), 5)


def test_topk_spatial_grouping():
    g = np.zeros((2, 2, 3))
    g[1, 0] = [0.3, 0.3, 0.3]
    g[0, 1, 0] = 0.8
    m = topk_mask(g, 1, spatial_grouping=True)
    assert m.count == 3
    np.testing.assert_array_equal(m.bits[1, 0], [1, 1, 1])


def test_apply_mask_examples(rng):
    v = np.array([0.1, -0.2, 0.3]).reshape(1, 3, 1)
    t = TriggerPattern(v, 3, 0.3)
    np.testing.assert_array_equal(apply_mask(t, SparsityMask(np.ones((1, 3, 1)))).values, v)
    assert not np.any(apply_mask(t, SparsityMask(np.zeros((1, 3, 1)))).values)
    out = apply_mask(t, SparsityMask(np.array([1, 0, 1]).reshape(1, 3, 1))).values
    np.testing.assert_array_equal(out.ravel(), [0.1, 0, 0.3])


def _projection_instance(rng, d, k, eps, alpha=0.2):
    g = rng.standard_normal(d)
    v = linf_sign_step(np.zeros(d), g, alpha, eps)
    return g, v


@pytest.mark.parametrize("seed", range(50))
def test_topk_matches_bruteforce_projection(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(4, 13))
    k = int(rng.integers(1, 5))
    eps = float(rng.choice([0.03, 0.1]))
    g, v = _projection_instance(rng, d, k, eps)
    _, support = lemma1_bruteforce_projection(v, g, k, eps, return_support=True)
    assert support == frozenset(topk_mask(g, k).indices())


def test_bruteforce_edge_cases(rng):
    g, v = _projection_instance(rng, 6, 6, 0.1)
    np.testing.assert_array_equal(lemma1_bruteforce_projection(v, g, 6, 0.1), v)
    assert not np.any(lemma1_bruteforce_projection(v, g, 0, 0.1))
    with pytest.raises(InvalidInputError):
        lemma1_bruteforce_projection(np.zeros(21), np.ones(21), 2, 0.1)


def test_synthesis_zero_iterations(tiny_model, tiny_data):
    trace = synthesize_trigger(tiny_model, tiny_data[0], SynthesisConfig(iterations=0, k_budget=10))
    assert trace.losses == [] and trace.mask_update_iterations == []
    assert l0_norm(trace.final_trigger.values) == 0


def test_synthesis_mask_cadence(tiny_model, tiny_data):
    cfg = SynthesisConfig(batch_size=16, iterations=6, mask_update_period=1, k_budget=10)
    assert synthesize_trigger(tiny_model, tiny_data[0], cfg).mask_update_iterations == list(range(6))
    cfg = SynthesisConfig(batch_size=16, iterations=12, mask_update_period=5, k_budget=10)
    assert synthesize_trigger(tiny_model, tiny_data[0], cfg).mask_update_iterations == [0, 5, 10]


def test_synthesis_support_stays_in_mask_between_updates(tiny_model, tiny_data):
    # Equal-size sign steps can return a coordinate to exactly 0 and later move it
    # off again, so the support need not shrink; it must stay inside the frozen mask.
    k, supports = 12, {}
    for T in range(4, 13):  # the config requires K <= T
        cfg = SynthesisConfig(batch_size=16, iterations=T, mask_update_period=4, k_budget=k, seed=5)
        supports[T] = set(np.flatnonzero(synthesize_trigger(tiny_model, tiny_data[0], cfg).final_trigger.values))
    for start in (1, 5, 9):  # iterations start-1 .. start+2 share one mask
        assert len(set().union(*(supports[T] for T in range(start, start + 4) if T in supports))) <= k


def test_synthesis_reproducible(tiny_model, tiny_data):
    cfg = SynthesisConfig(batch_size=16, iterations=10, mask_update_period=5, k_budget=20, seed=9)
    a = synthesize_trigger(tiny_model, tiny_data[0], cfg)
    b = synthesize_trigger(tiny_model, tiny_data[0], cfg)
    np.testing.assert_array_equal(a.final_trigger.values, b.final_trigger.values)
    assert a.losses == b.losses


def test_synthesis_makes_progress(tiny_model, tiny_data):
    data = tiny_data[0]
    cfg = SynthesisConfig(batch_size=32, iterations=30, mask_update_period=5, k_budget=40, eps_budget=16 / 255)
    trace = synthesize_trigger(tiny_model, data, cfg)
    zero = TriggerPattern.zeros(data.shape, 40, 16 / 255)
    assert surrogate_loss(tiny_model, data, trace.final_trigger, cfg.label_rule) <= \
        surrogate_loss(tiny_model, data, zero, cfg.label_rule)
    assert l0_norm(trace.final_trigger.values) == 40


def test_synthesis_warns_when_loss_is_flat():
    model = constant_model(np.zeros(4))
    data = LabeledImageSet(np.full((8, 8, 8, 3), 0.5, np.float32), np.arange(8) % 4, 4)
    with pytest.warns(RuntimeWarning, match="did not decrease"):
        synthesize_trigger(model, data, SynthesisConfig(batch_size=4, iterations=5, k_budget=3))


def test_synthesis_config_validation():
    with pytest.raises(InvalidInputError):
        SynthesisConfig(iterations=3, mask_update_period=5)
    with pytest.raises(InvalidInputError):
        SynthesisConfig(eps_budget=0)
    with pytest.raises(InvalidInputError):
        SynthesisConfig(k_budget=10_000).element_budget(ImageShape(8, 8, 3))


@settings(max_examples=12, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(k=st.integers(1, 192), eps=st.floats(1e-3, 0.5), alpha=st.floats(0.05, 1.5),
       period=st.integers(1, 4), all_to_all=st.booleans(), grouping=st.booleans())
def test_synthesis_budgets_hold(tiny_model, tiny_data, k, eps, alpha, period, all_to_all, grouping):
    if grouping:
        k = max(1, k // 3)
    rule = AllToAll() if all_to_all else AllToOne(2)
    cfg = SynthesisConfig(batch_size=16, step_size=alpha, iterations=6, mask_update_period=period,
                          k_budget=k, eps_budget=eps, label_rule=rule, spatial_grouping=grouping)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        t = synthesize_trigger(tiny_model, tiny_data[0], cfg).final_trigger
    assert l0_norm(t.values) <= cfg.element_budget(tiny_data[0].shape)
    assert linf_norm(t.values) <= eps + 1e-6


def test_sparse_baseline_fixed_mask(tiny_model, tiny_data):
    cfg = SynthesisConfig(batch_size=16, iterations=10, mask_update_period=5, k_budget=15, seed=2)
    trace = sparse_baseline_trace(tiny_model, tiny_data[0], cfg)
    assert trace.mask_update_iterations == [0]
    support = set(np.flatnonzero(trace.final_trigger.values))
    assert support <= set(random_support_mask(tiny_data[0].shape, 15, 2).indices())
    assert linf_norm(trace.final_trigger.values) <= cfg.eps_budget + 1e-6


@pytest.mark.filterwarnings("ignore:synthesis loss did not decrease")
def test_trace_csv(tmp_path, tiny_model, tiny_data):
    cfg = SynthesisConfig(batch_size=16, iterations=5, mask_update_period=5, k_budget=5)
    trace = synthesize_trigger(tiny_model, tiny_data[0], cfg)
    trace.write_csv(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss" and len(lines) == 6
