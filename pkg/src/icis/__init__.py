"""Classifier-weight injection for unseen classes.

Train paired encoder/decoder networks on (class descriptor, classifier
weight) pairs of seen classes, infer weight rows for classes that have no
training images, and inject those rows into the existing linear head.
"""

from .data import (
    ClassifierHead,
    DescriptorSet,
    FeatureSet,
    PairSet,
    SplitManifest,
    SynthTask,
    derive_validation_split,
    load_classifier_head,
    load_descriptor_set,
    load_feature_set,
    load_manifest,
    load_matrix,
    make_pairs,
    save_manifest,
    save_matrix,
    subsample_pairs,
    synth_generate,
)
from .errors import (
    ClassIdError,
    DataFormatError,
    DivergenceError,
    IcisError,
    ShapeMismatchError,
    ZeroNormError,
)
from .evaluation import (
    EvalReport,
    FailureHistogram,
    bin_predictions,
    classify,
    evaluate,
    failure_histogram,
    harmonic_mean,
    mean_prediction_entropy,
    micro_accuracy,
    per_class_mean_accuracy,
)
from .model import (
    IcisModel,
    LossConfig,
    LossTrace,
    TrainConfig,
    ablation_variants,
    infer_and_inject,
    infer_weights,
    inject,
    load_checkpoint,
    loss_a_to_a,
    loss_a_to_w,
    loss_w_to_a,
    loss_w_to_w,
    save_checkpoint,
    should_stop,
    stopping_threshold,
    total_loss,
    train,
)
from .tensor import RngState

__version__ = "0.1.0"

__all__ = [
    "ClassIdError",
    "ClassifierHead",
    "DataFormatError",
    "DescriptorSet",
    "DivergenceError",
    "EvalReport",
    "FailureHistogram",
    "FeatureSet",
    "IcisError",
    "IcisModel",
    "LossConfig",
    "LossTrace",
    "PairSet",
    "RngState",
    "ShapeMismatchError",
    "SplitManifest",
    "SynthTask",
    "TrainConfig",
    "ZeroNormError",
    "ablation_variants",
    "bin_predictions",
    "classify",
    "derive_validation_split",
    "evaluate",
    "failure_histogram",
    "harmonic_mean",
    "infer_and_inject",
    "infer_weights",
    "inject",
    "load_checkpoint",
    "load_classifier_head",
    "load_descriptor_set",
    "load_feature_set",
    "load_manifest",
    "load_matrix",
    "loss_a_to_a",
    "loss_a_to_w",
    "loss_w_to_a",
    "loss_w_to_w",
    "make_pairs",
    "mean_prediction_entropy",
    "micro_accuracy",
    "per_class_mean_accuracy",
    "save_checkpoint",
    "save_manifest",
    "save_matrix",
    "should_stop",
    "stopping_threshold",
    "subsample_pairs",
    "synth_generate",
    "total_loss",
    "train",
]
