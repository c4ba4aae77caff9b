"""Sparse-and-invisible trigger synthesis on a benign surrogate model.

Each iteration samples a mini-batch, takes an L-inf projected sign step on the
trigger, and multiplies by a binary mask that keeps the ``k`` coordinates with
the largest gradient magnitude. The mask is refreshed every ``K`` iterations.
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import (FLOAT_TOL, AllToOne, ImageShape, InvalidInputError, LabeledImageSet, LabelRule, NumericError,
                   SparsityMask, TriggerPattern, l0_norm, linf_norm)
from .models import Classifier, to_nchw

ORACLE_MAX_DIM = 20


@dataclass(frozen=True)
class SynthesisConfig:
    batch_size: int = 128
    step_size: float = 0.2
    iterations: int = 200
    mask_update_period: int = 5
    k_budget: int = 100
    eps_budget: float = 8 / 255
    label_rule: LabelRule = field(default_factory=lambda: AllToOne(0))
    seed: int = 0
    spatial_grouping: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.mask_update_period < 1 or self.k_budget < 1:
            raise InvalidInputError("batch_size, mask_update_period and k_budget must be positive")
        if self.iterations < 0:
            raise InvalidInputError("iterations must be non-negative")
        if self.iterations and self.mask_update_period > self.iterations:
            raise InvalidInputError("mask_update_period must not exceed iterations")
        if self.step_size <= 0:
            raise InvalidInputError("step_size must be positive")
        if not 0 < self.eps_budget <= 1:
            raise InvalidInputError("eps_budget must lie in (0, 1]")

    def element_budget(self, shape: ImageShape) -> int:
        """Nonzero-element budget; with spatial grouping one pixel covers all channels."""
        k = self.k_budget * shape.channels if self.spatial_grouping else self.k_budget
        if k > shape.pixel_count:
            raise InvalidInputError(f"k budget {k} exceeds dimensionality {shape.pixel_count}")
        return k


@dataclass
class SynthesisTrace:
    losses: list[float]
    mask_update_iterations: list[int]
    final_trigger: TriggerPattern

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss"])
            writer.writerows(enumerate(self.losses))


def _loss_and_trigger_gradient(model: Classifier, images: np.ndarray, targets: np.ndarray,
                               trigger_values: np.ndarray) -> tuple[float, np.ndarray]:
    x = to_nchw(images, model.dtype, model.device)
    t = torch.as_tensor(np.array(trigger_values, copy=True), dtype=model.dtype,
                        device=model.device).permute(2, 0, 1).requires_grad_(True)
    y = torch.from_numpy(np.array(targets, dtype=np.int64)).to(model.device)
    loss = F.cross_entropy(model.forward_tensor(torch.clamp(x + t, 0.0, 1.0)), y)
    (grad,) = torch.autograd.grad(loss, t)
    return float(loss.detach()), grad.permute(1, 2, 0).double().cpu().numpy()


def poisoned_loss_gradient(model: Classifier, batch: LabeledImageSet, trigger: TriggerPattern,
                           label_rule: LabelRule) -> np.ndarray:
    """Gradient w.r.t. the trigger of the mean cross-entropy on ``clip(x + t)`` vs rule targets."""
    if len(batch) == 0:
        raise InvalidInputError("empty batch")
    if batch.shape != model.input_shape or trigger.shape != model.input_shape:
        raise InvalidInputError(
            f"shape mismatch: batch {batch.shape}, trigger {trigger.shape}, model {model.input_shape}")
    targets = label_rule.apply(batch.labels, batch.num_classes)
    return _loss_and_trigger_gradient(model, batch.images, targets, trigger.values)[1]


def linf_sign_step(trigger, gradient, alpha: float, eps: float) -> np.ndarray:
    """``clip(t - alpha * eps * sign(g), -eps, eps)`` with sign(0) = 0."""
    t = trigger.values if isinstance(trigger, TriggerPattern) else np.asarray(trigger, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    if t.shape != g.shape:
        raise InvalidInputError(f"trigger shape {t.shape} != gradient shape {g.shape}")
    if alpha <= 0 or eps <= 0:
        raise InvalidInputError("alpha and eps must be positive")
    if not np.all(np.isfinite(g)):
        raise NumericError("gradient contains non-finite elements")
    return np.clip(t - alpha * eps * np.sign(g), -eps, eps)


def topk_mask(gradient, k: int, spatial_grouping: bool = False) -> SparsityMask:
    """Ones at the ``k`` largest ``|gradient|`` entries, lowest flat index first on ties.

    With ``spatial_grouping`` the magnitudes are summed over the channel axis of an
    (H, W, C) gradient, ``k`` counts pixels, and each chosen pixel opens all channels.
    """
    g = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError("gradient contains non-finite elements")
    scores = np.abs(g).sum(axis=-1) if spatial_grouping else np.abs(g)
    flat = scores.ravel()
    if not 0 <= k <= flat.size:
        raise InvalidInputError(f"k = {k} outside [0, {flat.size}]")
    # Stable sort on -|g| keeps the lower index ahead among equal magnitudes.
    chosen = np.argsort(-flat, kind="stable")[:k]
    bits = np.zeros(flat.size)
    bits[chosen] = 1.0
    bits = bits.reshape(scores.shape)
    if spatial_grouping:
        bits = np.repeat(bits[..., None], g.shape[-1], axis=-1)
    return SparsityMask(bits)


def apply_mask(trigger: TriggerPattern, mask: SparsityMask) -> TriggerPattern:
    if mask.bits.shape != trigger.values.shape:
        raise InvalidInputError(f"mask shape {mask.bits.shape} != trigger shape {trigger.values.shape}")
    return TriggerPattern(trigger.values * mask.bits, trigger.k_budget, trigger.eps_budget)


def lemma1_bruteforce_projection(v, gradient, k: int, eps: float, alpha: float = 0.2,
                                 return_support: bool = False):
    """Exhaustive L0 projection of the sign-step iterate, starting from t = 0.

    With t = 0 the unconstrained gradient iterate is ``s = -alpha * g``. Every
    ``k``-subset C is scored by ``||s - u_C||^2`` where ``u_C`` keeps ``v`` on C
    and is zero elsewhere; the first minimizing subset in lexicographic order wins.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    g = np.asarray(gradient, dtype=np.float64).ravel()
    d = v.size
    if d > ORACLE_MAX_DIM:
        raise InvalidInputError(f"oracle refuses d = {d} > {ORACLE_MAX_DIM}")
    if g.size != d:
        raise InvalidInputError("v and gradient sizes differ")
    if not 0 <= k <= d:
        raise InvalidInputError(f"k = {k} outside [0, {d}]")
    s = -alpha * g
    best, best_subset = math.inf, ()
    for subset in itertools.combinations(range(d), k):
        u = np.zeros(d)
        idx = list(subset)
        u[idx] = v[idx]
        obj = float(np.sum((s - u) ** 2))
        if obj < best:
            best, best_subset = obj, subset
    out = np.zeros(d)
    out[list(best_subset)] = v[list(best_subset)]
    if return_support:
        return out, frozenset(best_subset)
    return out


class _BatchSampler:
    """Without-replacement passes over the data, reshuffled when exhausted."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._order, self._pos = rng.permutation(n), 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._order, self._pos = self.rng.permutation(self.n), 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _run(model: Classifier, data: LabeledImageSet, config: SynthesisConfig,
         fixed_mask: SparsityMask | None = None) -> SynthesisTrace:
    if len(data) == 0:
        raise InvalidInputError("synthesis needs a non-empty dataset")
    if data.shape != model.input_shape:
        raise InvalidInputError(f"data shape {data.shape} != model shape {model.input_shape}")
    shape = data.shape
    k = config.element_budget(shape)
    eps = config.eps_budget
    rng = np.random.default_rng(config.seed)
    sampler = _BatchSampler(len(data), config.batch_size, rng)
    targets_all = config.label_rule.apply(data.labels, data.num_classes)

    t = np.zeros(shape.as_tuple)
    mask = fixed_mask
    losses, updates = [], []
    for i in range(config.iterations):
        idx = sampler.next()
        loss, grad = _loss_and_trigger_gradient(model, data.images[idx], targets_all[idx], t)
        losses.append(loss)
        if fixed_mask is None and i % config.mask_update_period == 0:
            mask = topk_mask(grad, config.k_budget, config.spatial_grouping)
            updates.append(i)
        elif fixed_mask is not None and i == 0:
            updates.append(0)
        t = linf_sign_step(t, grad, config.step_size, eps) * mask.bits
        assert l0_norm(t) <= k, f"L0 budget violated at iteration {i}"
        assert linf_norm(t) <= eps + FLOAT_TOL, f"L-inf budget violated at iteration {i}"

    if len(losses) >= 2 and losses[-1] >= losses[0]:
        warnings.warn(f"synthesis loss did not decrease ({losses[0]:.4f} -> {losses[-1]:.4f})",
                      RuntimeWarning, stacklevel=3)
    return SynthesisTrace(losses, updates, TriggerPattern(t, k, eps))


def synthesize_trigger(model: Classifier, data: LabeledImageSet, config: SynthesisConfig) -> SynthesisTrace:
    """Optimize a sparse, bounded trigger against the surrogate ``model``."""
    return _run(model, data, config)


def random_support_mask(shape: ImageShape, k: int, seed: int, spatial_grouping: bool = False) -> SparsityMask:
    rng = np.random.default_rng(seed)
    if spatial_grouping:
        n = shape.height * shape.width
        if k > n:
            raise InvalidInputError(f"k = {k} exceeds pixel count {n}")
        bits = np.zeros(n)
        bits[rng.choice(n, size=k, replace=False)] = 1
        bits = np.repeat(bits.reshape(shape.height, shape.width, 1), shape.channels, axis=-1)
    else:
        if k > shape.pixel_count:
            raise InvalidInputError(f"k = {k} exceeds dimensionality {shape.pixel_count}")
        bits = np.zeros(shape.pixel_count)
        bits[rng.choice(shape.pixel_count, size=k, replace=False)] = 1
        bits = bits.reshape(shape.as_tuple)
    return SparsityMask(bits)


def sparse_baseline_trace(model: Classifier, data: LabeledImageSet, config: SynthesisConfig) -> SynthesisTrace:
    """Sign-step optimization on a random support fixed once at iteration 0."""
    mask = random_support_mask(data.shape, config.k_budget, config.seed, config.spatial_grouping)
    return _run(model, data, config, fixed_mask=mask)


def baseline_sparse_trigger(model: Classifier, data: LabeledImageSet, config: SynthesisConfig) -> TriggerPattern:
    return sparse_baseline_trace(model, data, config).final_trigger


def surrogate_loss(model: Classifier, data: LabeledImageSet, trigger: TriggerPattern,
                   label_rule: LabelRule) -> float:
    """Mean targeted cross-entropy of ``model`` on triggered ``data``."""
    targets = label_rule.apply(data.labels, data.num_classes)
    logits = model.logits(trigger.apply(data.images))
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(targets)), targets].mean())
