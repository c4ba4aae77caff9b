"""Sparse and invisible backdoor attacks: trigger synthesis, poisoning, evaluation and defenses."""

from .core import (AllToAll, AllToOne, ImageShape, InvalidInputError, LabeledImageSet, NumericError,
                   PoisonPlan, SparsityMask, TriggerPattern, clip_to_valid_range, l0_norm, linf_norm)
from .models import Classifier, TrainConfig, train_classifier
from .synthesis import SynthesisConfig, SynthesisTrace, synthesize_trigger

__version__ = "0.1.0"

__all__ = [
    "AllToAll", "AllToOne", "Classifier", "ImageShape", "InvalidInputError", "LabeledImageSet",
    "NumericError", "PoisonPlan", "SparsityMask", "SynthesisConfig", "SynthesisTrace", "TrainConfig",
    "TriggerPattern", "clip_to_valid_range", "l0_norm", "linf_norm", "synthesize_trigger", "train_classifier",
]
